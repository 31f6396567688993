//! Geometry of Z^d: sites, neighbor enumeration, canonical undirected edges,
//! and the point symmetries used to validate jump kernels.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::fmt;

/// Coordinate storage; inline up to d = 4 so the hot loops never touch the
/// heap for the dimensions the experiments actually use.
pub type Coords = SmallVec<[i64; 4]>;

/// A lattice site. Coordinates are 64-bit signed; desk-scale horizons
/// (<= 1e9 steps) cannot overflow them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Site {
    pub coords: Coords,
}

impl Site {
    pub fn new(coords: impl Into<Coords>) -> Self {
        Self { coords: coords.into() }
    }

    pub fn origin(dimension: usize) -> Self {
        Self { coords: smallvec::smallvec![0; dimension] }
    }

    pub fn dimension(&self) -> usize {
        self.coords.len()
    }

    pub fn l1_norm(&self) -> u64 {
        self.coords.iter().map(|c| c.unsigned_abs()).sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.coords.iter().map(|&c| (c as f64) * (c as f64)).sum()
    }

    pub fn is_origin(&self) -> bool {
        self.coords.iter().all(|&c| c == 0)
    }
}

impl fmt::Display for Site {
    /// Textual form: comma-separated coordinates, e.g. `1,-2,3`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Canonical undirected nearest-neighbour edge: `base` is the endpoint with
/// the smaller coordinate along `axis`; the edge is {base, base + e_axis}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub base: Site,
    pub axis: u8,
}

impl Edge {
    pub fn endpoints(&self) -> (Site, Site) {
        let mut upper = self.base.clone();
        upper.coords[self.axis as usize] += 1;
        (self.base.clone(), upper)
    }
}

impl fmt::Display for Edge {
    /// Textual form: `base|axis`, e.g. `0,-1|1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.base, self.axis)
    }
}

/// The 2d neighbors of `x` in a fixed deterministic order: axis-major,
/// minus direction before plus. Index 2a is x - e_a, index 2a+1 is x + e_a.
/// The order is part of the reproducibility contract: neighbor selection
/// consumes one uniform draw against this ordering.
pub fn neighbors(x: &Site) -> Vec<Site> {
    let mut out = Vec::with_capacity(2 * x.dimension());
    neighbors_into(x, &mut out);
    out
}

/// Allocation-free variant for the simulation loop.
pub fn neighbors_into(x: &Site, out: &mut Vec<Site>) {
    out.clear();
    for axis in 0..x.dimension() {
        for sign in [-1i64, 1i64] {
            let mut s = x.clone();
            s.coords[axis] += sign;
            out.push(s);
        }
    }
}

/// Canonical form of the undirected edge {x, y}. Errors unless |x-y|_1 = 1.
pub fn canonical_edge(x: &Site, y: &Site) -> Result<Edge> {
    if x.dimension() != y.dimension() {
        return Err(Error::Geometry(format!(
            "edge endpoints have dimensions {} and {}",
            x.dimension(),
            y.dimension()
        )));
    }
    let mut axis = None;
    for (a, (&cx, &cy)) in x.coords.iter().zip(y.coords.iter()).enumerate() {
        if cx != cy {
            if cx.abs_diff(cy) != 1 || axis.is_some() {
                return Err(Error::Geometry(format!(
                    "sites {x} and {y} are not lattice neighbors"
                )));
            }
            axis = Some(a);
        }
    }
    let Some(axis) = axis else {
        return Err(Error::Geometry(format!("degenerate edge at site {x}")));
    };
    let base = if x.coords[axis] < y.coords[axis] { x.clone() } else { y.clone() };
    Ok(Edge { base, axis: axis as u8 })
}

/// A signed permutation of the axes: the lattice symmetries fixing a point.
/// Image coordinate i is sign_i * source[perm[i]].
#[derive(Debug, Clone)]
pub struct SignedPerm {
    perm: SmallVec<[u8; 4]>,
    sign_mask: u32,
}

impl SignedPerm {
    /// Apply to an offset vector (coordinates relative to the fixed point).
    pub fn apply_offset(&self, v: &Site) -> Site {
        let mut coords: Coords = SmallVec::with_capacity(v.dimension());
        for i in 0..v.dimension() {
            let c = v.coords[self.perm[i] as usize];
            coords.push(if self.sign_mask >> i & 1 == 1 { -c } else { c });
        }
        Site { coords }
    }

    /// Apply to an absolute site, fixing `center`.
    pub fn apply_about(&self, center: &Site, p: &Site) -> Site {
        let offset = Site {
            coords: p
                .coords
                .iter()
                .zip(center.coords.iter())
                .map(|(a, b)| a - b)
                .collect(),
        };
        let img = self.apply_offset(&offset);
        Site {
            coords: img
                .coords
                .iter()
                .zip(center.coords.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Image of an edge under the symmetry about `center`.
    pub fn apply_to_edge(&self, center: &Site, e: &Edge) -> Edge {
        let (p, q) = e.endpoints();
        let ip = self.apply_about(center, &p);
        let iq = self.apply_about(center, &q);
        // Images of adjacent sites are adjacent; canonicalization cannot fail.
        canonical_edge(&ip, &iq).expect("symmetry preserves adjacency")
    }

    /// Group inverse: image[i] = s_i * v[perm[i]] inverts to
    /// inv.perm[perm[i]] = i with the sign carried to the target slot.
    pub fn inverse(&self) -> SignedPerm {
        let d = self.perm.len();
        let mut perm: SmallVec<[u8; 4]> = SmallVec::from_elem(0, d);
        let mut sign_mask = 0u32;
        for i in 0..d {
            let j = self.perm[i] as usize;
            perm[j] = i as u8;
            if self.sign_mask >> i & 1 == 1 {
                sign_mask |= 1 << j;
            }
        }
        SignedPerm { perm, sign_mask }
    }
}

/// All 2^d * d! signed permutations for d <= 5; beyond that a fixed
/// pseudorandom sample of `SYMMETRY_SAMPLE` elements (full enumeration gets
/// pointless as a test battery and the kernels under test live in d <= 4).
pub fn symmetry_group(dimension: usize) -> Vec<SignedPerm> {
    const SYMMETRY_SAMPLE: usize = 1024;
    if dimension <= 5 {
        let mut perms: Vec<SmallVec<[u8; 4]>> = Vec::new();
        let mut idx: SmallVec<[u8; 4]> = (0..dimension as u8).collect();
        heap_permutations(&mut idx, dimension, &mut perms);
        let mut out = Vec::with_capacity(perms.len() << dimension);
        for perm in perms {
            for sign_mask in 0..(1u32 << dimension) {
                out.push(SignedPerm { perm: perm.clone(), sign_mask });
            }
        }
        out
    } else {
        let mut rng = crate::rng::SplitMix64::new(0x5957_4D4D_4554_5259);
        (0..SYMMETRY_SAMPLE)
            .map(|_| {
                let mut perm: SmallVec<[u8; 4]> = (0..dimension as u8).collect();
                for i in (1..dimension).rev() {
                    let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                    perm.swap(i, j);
                }
                let sign_mask = (rng.next_u64() & ((1u64 << dimension) - 1)) as u32;
                SignedPerm { perm, sign_mask }
            })
            .collect()
    }
}

fn heap_permutations(a: &mut SmallVec<[u8; 4]>, k: usize, out: &mut Vec<SmallVec<[u8; 4]>>) {
    if k <= 1 {
        out.push(a.clone());
        return;
    }
    for i in 0..k {
        heap_permutations(a, k - 1, out);
        if k % 2 == 0 {
            a.swap(i, k - 1);
        } else {
            a.swap(0, k - 1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn site(cs: &[i64]) -> Site {
        Site::new(SmallVec::from_slice(cs))
    }

    #[test]
    fn neighbors_d1() {
        assert_eq!(neighbors(&site(&[0])), vec![site(&[-1]), site(&[1])]);
    }

    #[test]
    fn neighbors_d2_order() {
        assert_eq!(
            neighbors(&site(&[0, 0])),
            vec![site(&[-1, 0]), site(&[1, 0]), site(&[0, -1]), site(&[0, 1])]
        );
    }

    #[test]
    fn neighbors_d3_count_and_distance() {
        let x = site(&[1, 2, 3]);
        let ns = neighbors(&x);
        assert_eq!(ns.len(), 6);
        let mut seen = std::collections::HashSet::new();
        for n in &ns {
            let dist: u64 = n
                .coords
                .iter()
                .zip(x.coords.iter())
                .map(|(a, b)| a.abs_diff(*b))
                .sum();
            assert_eq!(dist, 1);
            assert!(seen.insert(n.clone()));
        }
    }

    #[test]
    fn canonical_edge_examples() {
        let e = canonical_edge(&site(&[0]), &site(&[1])).unwrap();
        assert_eq!(e, Edge { base: site(&[0]), axis: 0 });
        let e2 = canonical_edge(&site(&[1]), &site(&[0])).unwrap();
        assert_eq!(e, e2);
        let e3 = canonical_edge(&site(&[0, 0]), &site(&[0, -1])).unwrap();
        assert_eq!(e3, Edge { base: site(&[0, -1]), axis: 1 });
    }

    #[test]
    fn canonical_edge_rejects_non_neighbors() {
        assert!(canonical_edge(&site(&[0, 0]), &site(&[1, 1])).is_err());
        assert!(canonical_edge(&site(&[0]), &site(&[2])).is_err());
        assert!(canonical_edge(&site(&[0]), &site(&[0])).is_err());
        assert!(canonical_edge(&site(&[0]), &site(&[0, 0])).is_err());
    }

    #[test]
    fn edge_round_trip() {
        // Random adjacent pairs across dimensions: canonicalization is
        // symmetric and endpoints() inverts it.
        let mut rng = SplitMix64::new(7);
        for _ in 0..2000 {
            let d = 1 + (rng.next_u64() % 5) as usize;
            let x = Site {
                coords: (0..d).map(|_| (rng.next_u64() % 41) as i64 - 20).collect(),
            };
            let ns = neighbors(&x);
            let y = ns[(rng.next_u64() % ns.len() as u64) as usize].clone();
            let e = canonical_edge(&x, &y).unwrap();
            assert_eq!(e, canonical_edge(&y, &x).unwrap());
            let (p, q) = e.endpoints();
            assert_eq!(canonical_edge(&p, &q).unwrap(), e);
            assert!((p == x && q == y) || (p == y && q == x));
        }
    }

    #[test]
    fn display_forms() {
        assert_eq!(site(&[1, -2, 3]).to_string(), "1,-2,3");
        let e = canonical_edge(&site(&[0, 0]), &site(&[0, -1])).unwrap();
        assert_eq!(e.to_string(), "0,-1|1");
    }

    #[test]
    fn site_serializes_as_plain_array() {
        let s = serde_json::to_string(&site(&[1, -2, 3])).unwrap();
        assert_eq!(s, "[1,-2,3]");
    }

    #[test]
    fn symmetry_group_orders() {
        assert_eq!(symmetry_group(1).len(), 2);
        assert_eq!(symmetry_group(2).len(), 8);
        assert_eq!(symmetry_group(3).len(), 48);
    }

    #[test]
    fn symmetry_group_distinct_and_norm_preserving() {
        let g = symmetry_group(3);
        let probe = site(&[1, 2, 3]);
        let mut images = std::collections::HashSet::new();
        for s in &g {
            let img = s.apply_offset(&probe);
            // Signed permutations preserve the coordinate multiset up to sign.
            let mut abs: Vec<i64> = img.coords.iter().map(|c| c.abs()).collect();
            abs.sort_unstable();
            assert_eq!(abs, vec![1, 2, 3]);
            assert!(images.insert(img));
        }
        // All 48 images of (1,2,3) are distinct, so the elements are too.
        assert_eq!(images.len(), 48);
    }

    #[test]
    fn symmetry_about_center_fixes_center() {
        let g = symmetry_group(2);
        let center = site(&[5, -3]);
        for s in &g {
            assert_eq!(s.apply_about(&center, &center), center);
            // Adjacency is preserved about the center.
            let n = site(&[6, -3]);
            let img = s.apply_about(&center, &n);
            let dist: u64 = img
                .coords
                .iter()
                .zip(center.coords.iter())
                .map(|(a, b)| a.abs_diff(*b))
                .sum();
            assert_eq!(dist, 1);
        }
    }

    #[test]
    fn edge_image_consistent_with_endpoint_images() {
        let g = symmetry_group(3);
        let center = site(&[1, 0, -2]);
        let e = canonical_edge(&site(&[1, 0, -1]), &site(&[1, 1, -1])).unwrap();
        for s in &g {
            let img = s.apply_to_edge(&center, &e);
            let (p, q) = e.endpoints();
            let expect =
                canonical_edge(&s.apply_about(&center, &p), &s.apply_about(&center, &q)).unwrap();
            assert_eq!(img, expect);
        }
    }

    #[test]
    fn inverse_undoes_application() {
        let mut rng = crate::rng::SplitMix64::new(7);
        for d in 1..=4usize {
            let center = Site::origin(d);
            for g in &symmetry_group(d) {
                let inv = g.inverse();
                let coords: Coords =
                    (0..d).map(|_| (rng.next_u64() % 9) as i64 - 4).collect();
                let p = Site::new(coords);
                assert_eq!(inv.apply_about(&center, &g.apply_about(&center, &p)), p);
                assert_eq!(g.apply_about(&center, &inv.apply_about(&center, &p)), p);
            }
        }
    }
}
