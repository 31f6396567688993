//! Regeneration-time machinery: offline detection over a K-sequence, the
//! online candidate scan, exact and Monte Carlo tau_1 computations, and
//! extraction of the regeneration sub-walk.
//!
//! A time n >= 1 regenerates when K_{n+i} <= i for every i >= 0: no later
//! memory window reaches back across n. The event constrains the entire
//! future, so at a finite horizon a candidate is only *confirmed* after W
//! clean look-ahead steps, W being the smallest integer with
//! tail(W) < confirmation_tolerance; later indices are censored, never
//! guessed.

use crate::lattice::{Coords, Site};
use crate::memory::{MemoryLaw, Tolerances};
use crate::rng::SplitMix64;
use crate::{Error, Result};
use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One regeneration block: time increment tau_{k+1} - tau_k and the
/// displacement Y_{k+1} - Y_k. Serializes flat as [dt, dy0, dy1, ...].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegenIncrement {
    pub dt: u64,
    pub dy: Coords,
}

impl Serialize for RegenIncrement {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(1 + self.dy.len()))?;
        seq.serialize_element(&(self.dt as i64))?;
        for c in &self.dy {
            seq.serialize_element(c)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for RegenIncrement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RegenIncrement;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("flat array [dt, dy0, dy1, ...]")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let dt: i64 = seq
                    .next_element()?
                    .ok_or_else(|| serde::de::Error::custom("empty increment"))?;
                let mut dy = Coords::new();
                while let Some(c) = seq.next_element::<i64>()? {
                    dy.push(c);
                }
                Ok(RegenIncrement { dt: dt as u64, dy })
            }
        }
        d.deserialize_seq(V)
    }
}

/// Detection output for one K-sequence at a finite horizon.
///
/// `regen_indices` holds only confirmed times (strictly increasing);
/// `censored_from` is the smallest index whose status the horizon cannot
/// settle; `increments` is filled by [`extract_subwalk`] and skips the first
/// block (whose law differs from the rest), so its length is one less than
/// the confirmed count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenerationReport {
    pub regens: Vec<u64>,
    pub censored_from: u64,
    pub increments: Vec<RegenIncrement>,
}

/// Smallest W >= 0 with tail(W) < tolerance: the look-ahead depth after
/// which an unrefuted candidate is declared confirmed.
pub fn confirmation_window(law: &MemoryLaw, tolerance: f64) -> u64 {
    let mut w = 0u64;
    while law.tail(w as i64) >= tolerance {
        w += 1;
    }
    w
}

/// Offline detection over ks = [K_0, ..., K_N].
///
/// One backward pass computes M_n = min over l in [n, N] of (l - K_l); the
/// index n is a regeneration iff M_n >= n, and is reported only when also
/// n <= N - W (confirmed, not censored). K_0 never constrains anything: a
/// memory window only reaches backward.
pub fn detect_offline(
    ks: &[u64],
    law: &MemoryLaw,
    tol: &Tolerances,
) -> Result<RegenerationReport> {
    if ks.is_empty() {
        return Err(Error::Domain("detect_offline: empty K-sequence".into()));
    }
    let n_max = (ks.len() - 1) as u64;
    let w = confirmation_window(law, tol.confirmation_tolerance);
    let censored_from = if w >= n_max { 1 } else { n_max - w + 1 };

    // Suffix minima of l - K_l, l = 1..=N, in i128: K values can dwarf l.
    let mut suffix = vec![0i128; ks.len()];
    let mut m = i128::MAX;
    for l in (1..ks.len()).rev() {
        m = m.min(l as i128 - ks[l] as i128);
        suffix[l] = m;
    }
    let mut regens = Vec::new();
    for n in 1..censored_from {
        if suffix[n as usize] >= n as i128 {
            regens.push(n);
        }
    }
    Ok(RegenerationReport { regens, censored_from, increments: Vec::new() })
}

/// Online scan for the first regeneration time. Feed K_1, K_2, ... in
/// order; `candidate` is always the smallest index not yet refuted, and a
/// candidate c is confirmed once `survived() >= W`.
#[derive(Debug, Clone)]
pub struct OnlineCandidate {
    c: u64,
    t: u64,
}

impl OnlineCandidate {
    pub fn new() -> Self {
        Self { c: 1, t: 0 }
    }

    /// Consume K_t for the next t; returns the current candidate.
    /// Refutation: K_t > t - c means the window at t reaches back past c.
    pub fn push(&mut self, k: u64) -> u64 {
        self.t += 1;
        if k > self.t - self.c {
            self.c = self.t + 1;
        }
        self.c
    }

    pub fn candidate(&self) -> u64 {
        self.c
    }

    /// How many checks K_l <= l - c the current candidate has survived.
    /// Zero right after a refutation, when c sits one past t.
    pub fn survived(&self) -> u64 {
        (self.t + 1).saturating_sub(self.c)
    }

    /// Confirmed once the candidate survives W + 1 checks (l = c ..= c + W),
    /// matching the offline censor rule n <= N - W.
    pub fn confirmed(&self, window: u64) -> bool {
        self.survived() > window
    }
}

impl Default for OnlineCandidate {
    fn default() -> Self {
        Self::new()
    }
}

/// Draw one tau_1 by streaming K values until the candidate survives the
/// confirmation window. Consumes tau_1 + W rng words.
pub fn sample_tau1(law: &MemoryLaw, rng: &mut SplitMix64, tol: &Tolerances) -> u64 {
    let w = confirmation_window(law, tol.confirmation_tolerance);
    let mut cand = OnlineCandidate::new();
    loop {
        let c = cand.push(law.sample_k(rng));
        if cand.confirmed(w) {
            return c;
        }
    }
}

/// Monte Carlo estimate of P[tau_1 = n] with its standard error, from
/// `samples` independent K-streams. Errors when tau_1 is almost surely
/// infinite (infinite-mean law, or no mass at K = 0).
pub fn tau1_pmf_oracle(
    law: &MemoryLaw,
    n: u64,
    samples: u64,
    rng: &mut SplitMix64,
    tol: &Tolerances,
) -> Result<(f64, f64)> {
    if law.prob_regen_at_fixed_time() <= 0.0 {
        return Err(Error::Domain(format!(
            "P[tau1 < infinity] = 0 regime for {law}: no finite regeneration time exists"
        )));
    }
    let mut hits = 0u64;
    for _ in 0..samples {
        if sample_tau1(law, rng, tol) == n {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let se = (p * (1.0 - p) / samples as f64).sqrt();
    Ok((p, se))
}

/// Exact pmf of tau_1 on 1..=n_max for finite-support laws, by the renewal
/// recursion over failed candidates: a candidate either succeeds (prob
/// p* = P[tau_1 = 1]) or fails with overshoot s (prob prefix(s) * tail(s)),
/// restarting the scan s + 1 steps later.
pub fn tau1_pmf_exact(law: &MemoryLaw, n_max: u64) -> Result<Vec<f64>> {
    let support = match *law {
        MemoryLaw::Degenerate { k } => k,
        MemoryLaw::Bernoulli { .. } => 1,
        MemoryLaw::Uniform { m } => m,
        _ => {
            return Err(Error::Domain(format!(
                "exact tau1 pmf needs a finite-support law, got {law}"
            )))
        }
    };
    let p_star = law.prob_regen_at_fixed_time();
    if p_star <= 0.0 {
        return Err(Error::Domain(format!(
            "P[tau1 < infinity] = 0 regime for {law}: no finite regeneration time exists"
        )));
    }
    // Unconditional overshoot weights q(s) = prefix(s) * tail(s), s < support.
    let mut q = Vec::with_capacity(support as usize);
    let mut prefix = 1.0;
    for s in 0..support {
        q.push(prefix * law.tail(s as i64));
        prefix *= law.cdf(s as i64);
    }
    let mut g = vec![0.0; n_max as usize + 1];
    if n_max >= 1 {
        g[1] = p_star;
    }
    for n in 2..=n_max as usize {
        let mut acc = 0.0;
        for (s, &qs) in q.iter().enumerate() {
            if n >= s + 2 {
                acc += qs * g[n - s - 1];
            }
        }
        g[n] = acc;
    }
    Ok(g)
}

/// The sub-walk Y_k = X_{tau_k} over confirmed regenerations (tau_0 = 0),
/// from positions recorded at stride 1. Fills `report.increments` with the
/// blocks from k = 1 on — the first block's law differs from the rest and
/// is excluded from i.i.d. statistics.
pub fn extract_subwalk(positions: &[Site], report: &mut RegenerationReport) -> Result<Vec<Site>> {
    if positions.is_empty() {
        return Err(Error::Domain("extract_subwalk: empty trajectory".into()));
    }
    if let Some(&last) = report.regens.last() {
        if last as usize >= positions.len() {
            return Err(Error::Domain(format!(
                "extract_subwalk: trajectory has {} positions but regeneration index {last} \
                 requires stride-1 recording up to it",
                positions.len()
            )));
        }
    }
    let mut y = Vec::with_capacity(report.regens.len() + 1);
    y.push(positions[0].clone());
    for &t in &report.regens {
        y.push(positions[t as usize].clone());
    }
    report.increments.clear();
    for k in 1..report.regens.len() {
        let dt = report.regens[k] - report.regens[k - 1];
        let dy: Coords = y[k + 1]
            .coords
            .iter()
            .zip(y[k].coords.iter())
            .map(|(a, b)| a - b)
            .collect();
        report.increments.push(RegenIncrement { dt, dy });
    }
    Ok(y)
}

/// Rejection predicate approximating the walk conditioned to regenerate at
/// time 0: accept a K-sequence iff K_i <= i for all i <= depth. The
/// acceptance event differs from the exact conditioning by at most
/// `error_bound` in probability. Diagnostic only — increment statistics
/// from k >= 1 are exact without any conditioning.
#[derive(Debug, Clone)]
pub struct ConditionedStart {
    pub depth: u64,
    pub error_bound: f64,
}

impl ConditionedStart {
    pub fn new(law: &MemoryLaw, depth: u64) -> Result<Self> {
        if law.prob_regen_at_fixed_time() <= 0.0 {
            return Err(Error::Domain(format!(
                "conditioning on a regeneration at time 0 is void for {law}"
            )));
        }
        Ok(Self { depth, error_bound: law.tail_sum_above(depth as i64) })
    }

    /// ks must cover indices 0..=depth.
    pub fn accepts(&self, ks: &[u64]) -> bool {
        debug_assert!(ks.len() > self.depth as usize);
        ks.iter().take(self.depth as usize + 1).enumerate().all(|(i, &k)| k <= i as u64)
    }
}
