//! Distribution families for the i.i.d. memory lengths K_n, with exact
//! cdf/tail access, inverse-cdf sampling on a single uniform draw, and the
//! closed-form renewal quantities of the regeneration decomposition.

use crate::rng::SplitMix64;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Numerical thresholds for the exact operations. `mass_epsilon` bounds the
/// truncation error of infinite sums/products; `confirmation_tolerance` sets
/// the look-ahead window for regeneration confirmation (smallest W with
/// tail(W) below it).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub mass_epsilon: f64,
    pub confirmation_tolerance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { mass_epsilon: 1e-12, confirmation_tolerance: 1e-6 }
    }
}

/// Linear inverse-cdf scan length before switching to a closed-form guess.
const SCAN_CAP: u64 = 64;

/// Tail size below which infinite sums/products switch to their analytic
/// remainder. Paired with a second-order correction this keeps truncation
/// error well under 1e-12.
const TAIL_CUT: f64 = 1e-10;

/// A memory-length distribution on the nonnegative integers.
///
/// `pareto(alpha)` has P[K >= k] = (1+k)^(-alpha), i.e. tail
/// P[K > k] = (2+k)^(-alpha); this keeps P[K=0] = 1 - 2^(-alpha) > 0, so
/// every shipped family except degenerate(k>=1) and bernoulli(1.0) puts
/// positive mass at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MemoryLaw {
    Degenerate { k: u64 },
    Bernoulli { p1: f64 },
    Geometric { p: f64 },
    Uniform { m: u64 },
    Pareto { alpha: f64 },
}

use MemoryLaw::*;

impl MemoryLaw {
    pub fn degenerate(k: u64) -> Self {
        Degenerate { k }
    }

    pub fn bernoulli(p1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p1) {
            return Err(Error::Config(format!("memory.p1: must be in [0,1] (got {p1})")));
        }
        Ok(Bernoulli { p1 })
    }

    pub fn geometric(p: f64) -> Result<Self> {
        // Upper cap keeps the truncated product loops bounded.
        if !(0.0..=0.999_999).contains(&p) {
            return Err(Error::Config(format!("memory.p: must be in [0, 0.999999] (got {p})")));
        }
        Ok(Geometric { p })
    }

    pub fn uniform(m: u64) -> Result<Self> {
        if m > 1 << 50 {
            return Err(Error::Config(format!("memory.m: must be <= 2^50 (got {m})")));
        }
        Ok(Uniform { m })
    }

    pub fn pareto(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha > 64.0 {
            return Err(Error::Config(format!("memory.alpha: must be in (0, 64] (got {alpha})")));
        }
        Ok(Pareto { alpha })
    }

    /// P[K <= i]; defined for all i with cdf(-1) = 0.
    pub fn cdf(&self, i: i64) -> f64 {
        if i < 0 {
            return 0.0;
        }
        let i = i as u64;
        match *self {
            Degenerate { k } => {
                if i >= k {
                    1.0
                } else {
                    0.0
                }
            }
            Bernoulli { p1 } => {
                if i >= 1 {
                    1.0
                } else {
                    1.0 - p1
                }
            }
            Geometric { p } => 1.0 - pow_u64(p, i + 1),
            Uniform { m } => {
                if i >= m {
                    1.0
                } else {
                    (i + 1) as f64 / (m + 1) as f64
                }
            }
            Pareto { alpha } => 1.0 - ((2 + i) as f64).powf(-alpha),
        }
    }

    /// P[K > i]; tail(-1) = 1. Computed directly (not as 1 - cdf) so deep
    /// tails keep full relative precision.
    pub fn tail(&self, i: i64) -> f64 {
        if i < 0 {
            return 1.0;
        }
        let i = i as u64;
        match *self {
            Degenerate { k } => {
                if i >= k {
                    0.0
                } else {
                    1.0
                }
            }
            Bernoulli { p1 } => {
                if i >= 1 {
                    0.0
                } else {
                    p1
                }
            }
            Geometric { p } => pow_u64(p, i + 1),
            Uniform { m } => {
                if i >= m {
                    0.0
                } else {
                    (m - i) as f64 / (m + 1) as f64
                }
            }
            Pareto { alpha } => ((2 + i) as f64).powf(-alpha),
        }
    }

    /// P[K = k] = tail(k-1) - tail(k).
    pub fn pmf(&self, k: u64) -> f64 {
        self.tail(k as i64 - 1) - self.tail(k as i64)
    }

    /// One draw by inverse cdf. Consumes exactly one rng word regardless of
    /// the outcome: the smallest k with u < cdf(k), found by a short linear
    /// scan and, past SCAN_CAP, a closed-form guess corrected against cdf.
    pub fn sample_k(&self, rng: &mut SplitMix64) -> u64 {
        let u = rng.next_f64();
        for k in 0..SCAN_CAP {
            if u < self.cdf(k as i64) {
                return k;
            }
        }
        self.sample_deep(u)
    }

    /// Inverse cdf for u past the scanned prefix (support beyond SCAN_CAP).
    fn sample_deep(&self, u: f64) -> u64 {
        let guess = match *self {
            Degenerate { k } => return k,
            Bernoulli { .. } => return 1, // support < SCAN_CAP; unreachable
            Geometric { p } => ((1.0 - u).ln() / p.ln()).ceil() - 1.0,
            Uniform { m } => (u * (m + 1) as f64).floor().min(m as f64),
            Pareto { alpha } => (1.0 - u).powf(-1.0 / alpha).ceil() - 2.0,
        };
        let mut k = guess.max(0.0) as u64;
        // The guess is within a few ulps of the scan's answer; nudge it onto
        // the exact inverse so every code path agrees bit-for-bit.
        while k > 0 && u < self.cdf(k as i64 - 1) {
            k -= 1;
        }
        while u >= self.cdf(k as i64) {
            k += 1;
        }
        k
    }

    /// Whether E[K^m] is finite.
    pub fn moment_finite(&self, m: u32) -> bool {
        match *self {
            Pareto { alpha } => (m as f64) < alpha,
            _ => true,
        }
    }

    /// E[K] = sum of tail(i) over i >= 0; +inf for heavy tails with
    /// exponent <= 1.
    pub fn mean(&self) -> f64 {
        self.tail_sum_above(-1)
    }

    /// Sum of tail(i) over i > bound, exactly (closed forms) or to ~1e-12
    /// (power tail: partial sum plus Euler-Maclaurin remainder).
    pub fn tail_sum_above(&self, bound: i64) -> f64 {
        match *self {
            Degenerate { k } => (k as i64 - 1 - bound.max(-1)).max(0) as f64,
            Bernoulli { p1 } => {
                if bound < 0 {
                    p1
                } else {
                    0.0
                }
            }
            Geometric { p } => {
                if p == 0.0 {
                    return 0.0;
                }
                // sum_{j > bound} p^{j+1}, j clamped to >= 0
                let first = (bound + 1).max(0) as u64;
                pow_u64(p, first + 1) / (1.0 - p)
            }
            Uniform { m } => {
                let first = (bound + 1).max(0) as u64;
                if first >= m {
                    return 0.0;
                }
                // sum of (m-j)/(m+1) for j in [first, m-1]
                let n = (m - first) as f64;
                n * (n + 1.0) / (2.0 * (m + 1) as f64)
            }
            Pareto { alpha } => {
                if alpha <= 1.0 {
                    return f64::INFINITY;
                }
                let mut j = (bound + 1).max(0) as u64;
                let mut sum = 0.0;
                let mut comp = 0.0;
                let mut terms = 0u32;
                loop {
                    let t = self.tail(j as i64);
                    if t < TAIL_CUT || terms >= 200_000 {
                        return sum + comp + pareto_tail_em(alpha, j);
                    }
                    kahan(&mut sum, &mut comp, t);
                    j += 1;
                    terms += 1;
                }
            }
        }
    }

    /// P[tau_1 = 1] = prod over i >= 0 of P[K <= i]. Positive exactly when
    /// the law has finite mean and positive mass at zero; evaluated to
    /// absolute error well below 1e-10 via truncation at tail < 1e-10 plus
    /// the second-order analytic remainder.
    pub fn prob_regen_at_fixed_time(&self) -> f64 {
        match *self {
            Degenerate { k } => {
                if k == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Bernoulli { p1 } => 1.0 - p1,
            Uniform { m } => {
                // prod_{i<m} (i+1)/(m+1) = m! / (m+1)^m
                let mf = (m + 1) as f64;
                (ln_gamma(mf) - m as f64 * mf.ln()).exp()
            }
            Geometric { p } => {
                if p == 0.0 {
                    return 1.0;
                }
                let mut log_sum = 0.0;
                let mut comp = 0.0;
                let mut t = p;
                let mut i = 0u64;
                while t >= TAIL_CUT {
                    kahan(&mut log_sum, &mut comp, (-t).ln_1p());
                    i += 1;
                    t = if i % 4096 == 0 { pow_u64(p, i + 1) } else { t * p };
                }
                // ln prod_{j>=i} (1-t_j) = -(S1 + S2/2 + O(S3)), geometric sums
                let s1 = pow_u64(p, i + 1) / (1.0 - p);
                let s2 = pow_u64(p, 2 * (i + 1)) / (1.0 - p * p);
                (log_sum + comp - s1 - s2 / 2.0).exp()
            }
            Pareto { alpha } => {
                if alpha <= 1.0 {
                    return 0.0; // infinite mean: the product diverges to 0
                }
                let mut log_sum = 0.0;
                let mut comp = 0.0;
                let mut i = 0u64;
                loop {
                    let t = self.tail(i as i64);
                    if t < TAIL_CUT {
                        break;
                    }
                    kahan(&mut log_sum, &mut comp, (-t).ln_1p());
                    i += 1;
                }
                let s1 = pareto_tail_em(alpha, i);
                let s2 = pareto_tail_em(2.0 * alpha, i);
                (log_sum + comp - s1 - s2 / 2.0).exp()
            }
        }
    }

    /// P[S_1 = k | S_1 < infinity] where S_1 is the overshoot of the first
    /// failed regeneration candidate: prod_{i<k}(1-tail(i)) * tail(k),
    /// normalized by 1 - P[tau_1 = 1]. Errors when the conditioning is
    /// degenerate (P[tau_1 = 1] is 0 or 1).
    pub fn s1_conditional_pmf(&self, k: u64) -> Result<f64> {
        let p_star = self.prob_regen_at_fixed_time();
        if p_star <= 0.0 || p_star >= 1.0 {
            return Err(Error::Domain(format!(
                "s1 conditioning is degenerate: P[tau1=1] = {p_star} for {self}"
            )));
        }
        let mut prefix = 1.0;
        for i in 0..k {
            prefix *= self.cdf(i as i64);
            if prefix == 0.0 {
                return Ok(0.0);
            }
        }
        Ok(prefix * self.tail(k as i64) / (1.0 - p_star))
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Degenerate { .. } => "degenerate",
            Bernoulli { .. } => "bernoulli",
            Geometric { .. } => "geometric",
            Uniform { .. } => "uniform",
            Pareto { .. } => "pareto",
        }
    }
}

impl fmt::Display for MemoryLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Degenerate { k } => write!(f, "degenerate(k={k})"),
            Bernoulli { p1 } => write!(f, "bernoulli(p1={p1})"),
            Geometric { p } => write!(f, "geometric(p={p})"),
            Uniform { m } => write!(f, "uniform(m={m})"),
            Pareto { alpha } => write!(f, "pareto(alpha={alpha})"),
        }
    }
}

#[inline]
fn kahan(sum: &mut f64, comp: &mut f64, term: f64) {
    let y = term - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// p^n for u64 n via the float powi/powf split; exact enough and consistent
/// across call sites (all tail() values come from here).
#[inline]
fn pow_u64(p: f64, n: u64) -> f64 {
    if n <= i32::MAX as u64 {
        p.powi(n as i32)
    } else {
        p.powf(n as f64)
    }
}

/// Euler-Maclaurin for sum_{i>=n} (2+i)^(-alpha), alpha > 1. The omitted
/// term is O((2+n)^(-alpha-3)); callers only use this where the head of the
/// sum has already been taken out, so the absolute error is negligible.
fn pareto_tail_em(alpha: f64, n: u64) -> f64 {
    let x = (2 + n) as f64;
    x.powf(1.0 - alpha) / (alpha - 1.0) + 0.5 * x.powf(-alpha)
        + alpha * x.powf(-alpha - 1.0) / 12.0
}

/// ln Gamma(x) for x >= 1 (Lanczos, g=7, 9 terms). Used only for the exact
/// uniform-family product; ~1e-14 relative accuracy.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let z = x - 1.0;
    let mut a = G[0];
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}
