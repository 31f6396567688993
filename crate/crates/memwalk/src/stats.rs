//! Estimators and hypothesis tests over replica ensembles: MSD curves,
//! origin-return statistics, coordinatewise CLT checks, Kolmogorov-Smirnov
//! tests (exact small-sample two-sample variant included), the Hill tail
//! index, and chi-square goodness of fit.
//!
//! Everything here is a deterministic function of its inputs; pooled
//! statistics sort by replica index first so results never depend on
//! worker scheduling.

use crate::lattice::Site;
use crate::regen::RegenIncrement;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// One replica's distilled output, as persisted in the artifact rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica: u64,
    pub final_position: Site,
    pub returns: u64,
    pub last_return: u64,
    pub checkpoint_positions: Vec<(u64, Site)>,
    pub regens: Vec<u64>,
    pub censored_from: u64,
    pub increments: Vec<RegenIncrement>,
    pub k_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdPoint {
    pub checkpoint: u64,
    pub mean: f64,
    pub se: f64,
}

/// Mean squared displacement with standard errors, one point per checkpoint.
/// All replicas must share the checkpoint grid.
pub fn msd_curve(ensemble: &[&[(u64, Site)]]) -> Result<Vec<MsdPoint>> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::Stats("msd_curve: empty ensemble".into()))?;
    let grid: Vec<u64> = first.iter().map(|(n, _)| *n).collect();
    for (r, reps) in ensemble.iter().enumerate() {
        let g: Vec<u64> = reps.iter().map(|(n, _)| *n).collect();
        if g != grid {
            return Err(Error::Stats(format!(
                "msd_curve: replica {r} has checkpoint grid {g:?}, expected {grid:?}"
            )));
        }
    }
    let rn = ensemble.len() as f64;
    let mut out = Vec::with_capacity(grid.len());
    for (ci, &cp) in grid.iter().enumerate() {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for reps in ensemble {
            let v = reps[ci].1.l2_norm_sq();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / rn;
        let var = ((sumsq / rn - mean * mean) * rn / (rn - 1.0).max(1.0)).max(0.0);
        let se = (var / rn).sqrt();
        out.push(MsdPoint { checkpoint: cp, mean, se });
    }
    Ok(out)
}

/// Least-squares fit of y = a + b x; returns (a, b, relative residual),
/// the latter being ||y - fit|| / ||y||.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Stats("linear_fit: need two or more points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Stats("linear_fit: degenerate abscissae".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| y * y).sum();
    let rel = if ss_tot > 0.0 { (ss_res / ss_tot).sqrt() } else { 0.0 };
    Ok((a, b, rel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean_returns: f64,
    pub se_returns: f64,
    /// Fraction of replicas whose last origin visit is after the cutoff.
    pub fraction_late: f64,
    pub late_cutoff: u64,
}

/// Pooled origin-return statistics. `late_cutoff` is the T0 after which a
/// return counts as "late" (a transient walk should almost never produce
/// one at large horizons).
pub fn return_statistics(records: &[(u64, u64)], late_cutoff: u64) -> ReturnStats {
    if records.is_empty() {
        return ReturnStats {
            mean_returns: 0.0,
            se_returns: 0.0,
            fraction_late: 0.0,
            late_cutoff,
        };
    }
    let n = records.len() as f64;
    let sum: f64 = records.iter().map(|&(r, _)| r as f64).sum();
    let mean = sum / n;
    let var: f64 =
        records.iter().map(|&(r, _)| (r as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let late = records.iter().filter(|&&(_, last)| last > late_cutoff).count() as f64;
    ReturnStats {
        mean_returns: mean,
        se_returns: (var / n).sqrt(),
        fraction_late: late / n,
        late_cutoff,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov's Q(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2);
/// the asymptotic survival function of the KS statistic.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        if term < 1e-18 {
            break;
        }
        sum += sign * term;
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS statistic scaled to the integer lattice: max over
/// tie-block boundaries of |i*n - j*m|, so that D = value / (m*n). Exact
/// integer arithmetic keeps boundary comparisons in the permutation test
/// free of rounding (1 - 1/3 and 2/3 differ as floats).
fn ks_statistic_int(a: &[f64], b: &[f64]) -> u64 {
    let (m, n) = (a.len() as i64, b.len() as i64);
    let mut d: i64 = 0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as i64 * n - j as i64 * m).abs());
    }
    d as u64
}

fn binomial_u128(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exact permutation p-value P[D >= d_obs] by counting assignments of the
/// pooled multiset whose lattice gap |i*n - j*m| stays strictly below the
/// observed integer statistic at every distinct-value boundary. Tie blocks
/// contribute binomial factors; all comparisons are integer-exact.
fn ks_exact_p(a: &[f64], b: &[f64], d_int: u64) -> f64 {
    let (m, n) = (a.len(), b.len());
    // Pooled tie blocks: distinct values with total multiplicities.
    let mut pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut blocks: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        blocks.push(j - i);
        i = j;
    }
    // f[i] = weighted count of prefixes with i values assigned to sample a.
    let mut f = vec![0u128; m + 1];
    f[0] = 1;
    let mut consumed = 0usize;
    let mut choose: Vec<Vec<u128>> = Vec::new(); // small Pascal triangle
    let maxs = blocks.iter().copied().max().unwrap_or(0);
    for s in 0..=maxs {
        let mut row = vec![1u128; s + 1];
        for t in 1..s {
            row[t] = choose[s - 1][t - 1] + choose[s - 1][t];
        }
        choose.push(row);
    }
    for &s in &blocks {
        let mut next = vec![0u128; m + 1];
        for (ia, &ways) in f.iter().enumerate() {
            if ways == 0 {
                continue;
            }
            let jb = consumed - ia;
            for t in 0..=s.min(m - ia) {
                let jb_new = jb + (s - t);
                if jb_new > n {
                    continue;
                }
                let ia_new = ia + t;
                let gap = (ia_new as i64 * n as i64 - jb_new as i64 * m as i64).unsigned_abs();
                if gap < d_int {
                    next[ia_new] += ways * choose[s][t];
                }
            }
        }
        f = next;
        consumed += s;
    }
    let valid = f[m];
    let total = binomial_u128((m + n) as u64, m as u64);
    1.0 - valid as f64 / total as f64
}

/// Two-sample Kolmogorov-Smirnov test. Exact permutation p-value when both
/// samples have fewer than 30 points; Stephens' corrected asymptotic
/// otherwise.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("ks_two_sample: both samples must be nonempty".into()));
    }
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    if a.iter().chain(b.iter()).any(|x| x.is_nan()) {
        return Err(Error::Stats("ks_two_sample: NaN in sample".into()));
    }
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let d_int = ks_statistic_int(&a, &b);
    let d = d_int as f64 / (a.len() * b.len()) as f64;
    let p = if a.len() < 30 && b.len() < 30 {
        ks_exact_p(&a, &b, d_int)
    } else {
        let me = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
        let lambda = (me.sqrt() + 0.12 + 0.11 / me.sqrt()) * d;
        kolmogorov_q(lambda)
    };
    Ok(KsResult { statistic: d, p_value: p })
}

/// One-sample KS against the standard normal.
pub fn ks_one_sample_normal(sample: &[f64]) -> Result<KsResult> {
    if sample.is_empty() {
        return Err(Error::Stats("ks_one_sample_normal: empty sample".into()));
    }
    let mut xs = sample.to_vec();
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Stats("ks_one_sample_normal: NaN in sample".into()));
    }
    xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = xs.len() as f64;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let c = normal.cdf(x);
        d = d.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HillEstimate {
    pub estimate: f64,
    pub se: f64,
    /// Number of top order statistics used.
    pub k: usize,
    /// False when the estimate exceeds 10: no polynomial tail at this depth.
    pub heavy_tail: bool,
}

/// Hill estimator of the tail index over the largest ceil(fraction * n)
/// order statistics. SE is the asymptotic estimate / sqrt(k).
pub fn hill_tail_index(sample: &[f64], fraction: f64) -> Result<HillEstimate> {
    if !(0.0..=0.5).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Stats(format!(
            "hill_tail_index: fraction must be in (0, 0.5] (got {fraction})"
        )));
    }
    if sample.is_empty() {
        return Err(Error::Stats("hill_tail_index: empty sample".into()));
    }
    if sample.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Stats("hill_tail_index: sample must be strictly positive".into()));
    }
    let k = (fraction * sample.len() as f64).ceil() as usize;
    if k + 1 > sample.len() {
        return Err(Error::Stats(format!(
            "hill_tail_index: need at least {} points for fraction {fraction}",
            k + 1
        )));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|x, y| y.partial_cmp(x).unwrap()); // descending
    let threshold = xs[k];
    let logsum: f64 = xs[..k].iter().map(|x| (x / threshold).ln()).sum();
    if logsum <= 0.0 {
        return Err(Error::Stats(
            "hill_tail_index: top order statistics are all equal; no tail to estimate".into(),
        ));
    }
    let estimate = k as f64 / logsum;
    Ok(HillEstimate {
        estimate,
        se: estimate / (k as f64).sqrt(),
        k,
        heavy_tail: estimate <= 10.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson chi-square goodness of fit of observed counts against cell
/// probabilities (renormalized). df = cells - 1.
pub fn chi_square_gof(observed: &[u64], expected_probs: &[f64]) -> Result<ChiSquare> {
    if observed.len() != expected_probs.len() || observed.len() < 2 {
        return Err(Error::Stats(
            "chi_square_gof: need matching cell counts and at least two cells".into(),
        ));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::Stats("chi_square_gof: no observations".into()));
    }
    let mass: f64 = expected_probs.iter().sum();
    if !(mass > 0.0) || expected_probs.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Stats("chi_square_gof: expected probabilities must be positive".into()));
    }
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        let e = p / mass * total as f64;
        stat += (o as f64 - e) * (o as f64 - e) / e;
    }
    let df = observed.len() - 1;
    let dist = ChiSquared::new(df as f64).unwrap();
    Ok(ChiSquare { statistic: stat, df, p_value: 1.0 - dist.cdf(stat) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub at_checkpoint: u64,
    pub replicas: usize,
    /// KS p-value of each coordinate of X_n / (sigma_hat sqrt(n)) vs N(0,1).
    pub per_axis_ks_p: Vec<f64>,
    /// Empirical covariance of X_n / sqrt(n).
    pub covariance: Vec<Vec<f64>>,
    pub max_offdiag_z: f64,
    pub max_diag_gap_z: f64,
    pub isotropic: bool,
    pub sigma_hat: f64,
    pub sigma_sq_se: f64,
    pub non_degenerate: bool,
    pub diagnostic: Option<String>,
}

impl CltReport {
    /// All three checks at significance `alpha` for the KS legs.
    pub fn passed(&self, alpha: f64) -> bool {
        self.non_degenerate && self.isotropic && self.per_axis_ks_p.iter().all(|&p| p > alpha)
    }
}

pub const CLT_MIN_REPLICAS: usize = 500;

/// Coordinatewise CLT verification at step n: marginal normality after
/// studentizing by the pooled per-axis deviation, covariance isotropy
/// within 3 SE (normal-theory errors), and non-degeneracy of sigma_hat.
pub fn clt_tests(positions: &[Site], n: u64) -> Result<CltReport> {
    let r = positions.len();
    if r < CLT_MIN_REPLICAS {
        return Err(Error::Stats(format!(
            "clt_tests: needs at least {CLT_MIN_REPLICAS} replicas (got {r})"
        )));
    }
    if n == 0 {
        return Err(Error::Stats("clt_tests: n must be positive".into()));
    }
    let d = positions[0].dimension();
    if positions.iter().any(|p| p.dimension() != d) {
        return Err(Error::Stats("clt_tests: mixed dimensions in ensemble".into()));
    }
    let sqrt_n = (n as f64).sqrt();
    // y_{r,a} = X_a / sqrt(n)
    let ys: Vec<Vec<f64>> = positions
        .iter()
        .map(|p| p.coords.iter().map(|&c| c as f64 / sqrt_n).collect())
        .collect();
    let rf = r as f64;
    let means: Vec<f64> =
        (0..d).map(|a| ys.iter().map(|y| y[a]).sum::<f64>() / rf).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for y in &ys {
        for a in 0..d {
            for b in a..d {
                cov[a][b] += (y[a] - means[a]) * (y[b] - means[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= rf - 1.0;
            cov[b][a] = cov[a][b];
        }
    }
    let sigma_sq = (0..d).map(|a| cov[a][a]).sum::<f64>() / d as f64;
    let sigma_hat = sigma_sq.sqrt();
    // Normal-theory standard error of the pooled variance.
    let mut sum_sq = 0.0;
    for a in 0..d {
        for b in 0..d {
            sum_sq += cov[a][b] * cov[a][b];
        }
    }
    let sigma_sq_se = (2.0 * sum_sq / (d * d) as f64 / (rf - 1.0)).sqrt();
    // Degeneracy gate is relative to the data scale: identical replicas
    // leave O(eps^2) covariance residue from the mean subtraction.
    let scale_sq = ys
        .iter()
        .flat_map(|y| y.iter())
        .map(|&v| v * v)
        .fold(0.0f64, f64::max);
    if sigma_sq <= scale_sq * 1e-24 {
        return Ok(CltReport {
            at_checkpoint: n,
            replicas: r,
            per_axis_ks_p: vec![0.0; d],
            covariance: cov,
            max_offdiag_z: f64::INFINITY,
            max_diag_gap_z: 0.0,
            isotropic: false,
            sigma_hat: 0.0,
            sigma_sq_se,
            non_degenerate: false,
            diagnostic: Some(
                "degenerate ensemble: zero variance at the checkpoint (identical replicas?)"
                    .into(),
            ),
        });
    }
    let mut per_axis_ks_p = Vec::with_capacity(d);
    for a in 0..d {
        let scaled: Vec<f64> = ys.iter().map(|y| y[a] / sigma_hat).collect();
        per_axis_ks_p.push(ks_one_sample_normal(&scaled)?.p_value);
    }
    let mut max_off: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    for a in 0..d {
        for b in (a + 1)..d {
            let se_off =
                ((cov[a][a] * cov[b][b] + cov[a][b] * cov[a][b]) / (rf - 1.0)).sqrt();
            if se_off > 0.0 {
                max_off = max_off.max(cov[a][b].abs() / se_off);
            }
            let var_gap = 2.0
                * (cov[a][a] * cov[a][a] + cov[b][b] * cov[b][b]
                    - 2.0 * cov[a][b] * cov[a][b])
                / (rf - 1.0);
            let se_gap = var_gap.max(0.0).sqrt();
            if se_gap > 0.0 {
                max_gap = max_gap.max((cov[a][a] - cov[b][b]).abs() / se_gap);
            }
        }
    }
    let non_degenerate = sigma_sq - 3.0 * sigma_sq_se > 0.0;
    Ok(CltReport {
        at_checkpoint: n,
        replicas: r,
        per_axis_ks_p,
        covariance: cov,
        max_offdiag_z: max_off,
        max_diag_gap_z: max_gap,
        isotropic: max_off <= 3.0 && max_gap <= 3.0,
        sigma_hat,
        sigma_sq_se,
        non_degenerate,
        diagnostic: if non_degenerate {
            None
        } else {
            Some(format!(
                "sigma^2 = {sigma_sq:.3e} does not exclude 0 at 3 SE ({sigma_sq_se:.3e})"
            ))
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenPooled {
    pub confirmed_regens: u64,
    pub increment_count: usize,
    pub mean_dt: f64,
    pub dt_se: f64,
    pub mean_dy: Vec<f64>,
    pub dy_se: Vec<f64>,
    /// Two-sample KS p between the first and second half of the pooled dt
    /// sample (exchangeability of increments); None below 20 increments.
    pub dt_halves_ks_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledStats {
    pub replicas: usize,
    pub dimension: usize,
    pub checkpoints: Vec<u64>,
    pub msd: Vec<MsdPoint>,
    pub returns: ReturnStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regen: Option<RegenPooled>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clt: Option<CltReport>,
    /// Hill estimate over pooled regeneration time increments.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<HillEstimate>,
}

/// An ensemble: per-replica records (sorted by replica index) plus the
/// pooled statistics derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub records: Vec<ReplicaRecord>,
    pub pooled: PooledStats,
}

#[derive(Debug, Clone)]
pub struct SummarizeOptions {
    pub late_cutoff: u64,
    /// Pool regeneration increments and test exchangeability.
    pub regen: bool,
    /// Run clt_tests at the last checkpoint.
    pub clt: bool,
    /// Hill fraction for the dt tail estimate (requires `regen`).
    pub tail: Option<f64>,
}

/// Deterministic ensemble fold: sorts by replica index, pools MSD, returns,
/// regeneration increments, and (optionally) the CLT report at the last
/// checkpoint. Replica reordering cannot change the output.
pub fn summarize(mut records: Vec<ReplicaRecord>, opts: &SummarizeOptions) -> Result<EnsembleSummary> {
    if records.is_empty() {
        return Err(Error::Stats("summarize: empty ensemble".into()));
    }
    records.sort_by_key(|r| r.replica);
    if records.windows(2).any(|w| w[0].replica == w[1].replica) {
        return Err(Error::Stats("summarize: duplicate replica indices".into()));
    }
    let dimension = records[0].final_position.dimension();
    let checkpoints: Vec<u64> =
        records[0].checkpoint_positions.iter().map(|(n, _)| *n).collect();
    let msd = if checkpoints.is_empty() {
        Vec::new()
    } else {
        let views: Vec<&[(u64, Site)]> =
            records.iter().map(|r| r.checkpoint_positions.as_slice()).collect();
        msd_curve(&views)?
    };
    let returns_data: Vec<(u64, u64)> =
        records.iter().map(|r| (r.returns, r.last_return)).collect();
    let returns = return_statistics(&returns_data, opts.late_cutoff);

    let mut dts: Vec<f64> = Vec::new();
    let regen = if opts.regen {
        let mut dy_sum = vec![0.0f64; dimension];
        let mut dy_sumsq = vec![0.0f64; dimension];
        let mut confirmed = 0u64;
        for rec in &records {
            confirmed += rec.regens.len() as u64;
            for inc in &rec.increments {
                dts.push(inc.dt as f64);
                for (a, &c) in inc.dy.iter().enumerate() {
                    dy_sum[a] += c as f64;
                    dy_sumsq[a] += (c * c) as f64;
                }
            }
        }
        let m = dts.len();
        if m == 0 {
            Some(RegenPooled {
                confirmed_regens: confirmed,
                increment_count: 0,
                mean_dt: 0.0,
                dt_se: 0.0,
                mean_dy: vec![0.0; dimension],
                dy_se: vec![0.0; dimension],
                dt_halves_ks_p: None,
            })
        } else {
            let mf = m as f64;
            let mean_dt = dts.iter().sum::<f64>() / mf;
            let dt_var =
                dts.iter().map(|x| (x - mean_dt).powi(2)).sum::<f64>() / (mf - 1.0).max(1.0);
            let mean_dy: Vec<f64> = dy_sum.iter().map(|s| s / mf).collect();
            let dy_se: Vec<f64> = (0..dimension)
                .map(|a| {
                    let var = (dy_sumsq[a] / mf - mean_dy[a] * mean_dy[a]).max(0.0) * mf
                        / (mf - 1.0).max(1.0);
                    (var / mf).sqrt()
                })
                .collect();
            let dt_halves_ks_p = if m >= 20 {
                let (first, second) = dts.split_at(m / 2);
                Some(ks_two_sample(first, second)?.p_value)
            } else {
                None
            };
            Some(RegenPooled {
                confirmed_regens: confirmed,
                increment_count: m,
                mean_dt,
                dt_se: (dt_var / mf).sqrt(),
                mean_dy,
                dy_se,
                dt_halves_ks_p,
            })
        }
    } else {
        None
    };

    let clt = if opts.clt {
        let &last = checkpoints.last().ok_or_else(|| {
            Error::Analysis(
                "clt analysis requested but no checkpoint positions were recorded".into(),
            )
        })?;
        let idx = checkpoints.len() - 1;
        let positions: Vec<Site> =
            records.iter().map(|r| r.checkpoint_positions[idx].1.clone()).collect();
        Some(clt_tests(&positions, last)?)
    } else {
        None
    };

    let tail = match opts.tail {
        None => None,
        Some(frac) => {
            if !opts.regen {
                return Err(Error::Analysis(
                    "tail analysis requires regeneration increments; enable regen".into(),
                ));
            }
            Some(hill_tail_index(&dts, frac)?)
        }
    };

    let pooled = PooledStats {
        replicas: records.len(),
        dimension,
        checkpoints,
        msd,
        returns,
        regen,
        clt,
        tail,
    };
    Ok(EnsembleSummary { records, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use smallvec::SmallVec;

    fn site(cs: &[i64]) -> Site {
        Site::new(SmallVec::from_slice(cs))
    }

    fn normal_draw(rng: &mut SplitMix64) -> f64 {
        let u1 = rng.next_f64().max(1e-300);
        let u2 = rng.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn kolmogorov_q_oracle_values() {
        assert!((kolmogorov_q(0.5) - 0.9639452436648751).abs() < 1e-12);
        assert!((kolmogorov_q(1.0) - 0.2699996716773545).abs() < 1e-12);
        assert!((kolmogorov_q(1.5) - 0.022217962616525128).abs() < 1e-12);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn ks_two_sample_disjoint_small() {
        // D = 1; only the two fully separated assignments reach it: p = 2/20.
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((r.statistic - 1.0).abs() < 1e-15);
        assert!((r.p_value - 0.1).abs() < 1e-12, "p = {}", r.p_value);
    }

    #[test]
    fn ks_two_sample_identical() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn ks_exact_matches_enumeration_with_ties() {
        // Brute force over all assignments of the pooled multiset.
        let mut rng = SplitMix64::new(99);
        for case in 0..40 {
            let m = 2 + (case % 4) as usize;
            let n = 2 + (case / 10) as usize;
            let a: Vec<f64> = (0..m).map(|_| (rng.next_u64() % 4) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| (rng.next_u64() % 4) as f64).collect();
            let got = match ks_two_sample(&a, &b) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let d_obs = ks_statistic_int(&sa, &sb);
            let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let total = pooled.len();
            let mut hits = 0u64;
            let mut count = 0u64;
            for mask in 0u32..(1 << total) {
                if mask.count_ones() as usize != m {
                    continue;
                }
                count += 1;
                let mut xa: Vec<f64> = Vec::new();
                let mut xb: Vec<f64> = Vec::new();
                for (i, &v) in pooled.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        xa.push(v);
                    } else {
                        xb.push(v);
                    }
                }
                xa.sort_by(|x, y| x.partial_cmp(y).unwrap());
                xb.sort_by(|x, y| x.partial_cmp(y).unwrap());
                if ks_statistic_int(&xa, &xb) >= d_obs {
                    hits += 1;
                }
            }
            let brute = hits as f64 / count as f64;
            assert!(
                (got.p_value - brute).abs() < 1e-10,
                "a={a:?} b={b:?}: exact {} vs brute {brute}",
                got.p_value
            );
        }
    }

    #[test]
    fn ks_two_sample_separated_gaussians() {
        let mut rng = SplitMix64::new(5);
        let a: Vec<f64> = (0..1000).map(|_| normal_draw(&mut rng)).collect();
        let b: Vec<f64> = (0..1000).map(|_| normal_draw(&mut rng) + 3.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);

        let c: Vec<f64> = (0..1000).map(|_| normal_draw(&mut rng)).collect();
        let r2 = ks_two_sample(&a, &c).unwrap();
        assert!(r2.p_value > 0.01, "p = {}", r2.p_value);
    }

    #[test]
    fn ks_exact_close_to_asymptotic_at_the_boundary() {
        // The exact permutation law is discrete, so only coarse agreement
        // with the corrected asymptotic is meaningful at n ~ 29.
        let mut rng = SplitMix64::new(500);
        for _ in 0..5 {
            let a: Vec<f64> = (0..28).map(|_| normal_draw(&mut rng)).collect();
            let b: Vec<f64> = (0..29).map(|_| normal_draw(&mut rng)).collect();
            let exact = ks_two_sample(&a, &b).unwrap();
            let me = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
            let lambda = (me.sqrt() + 0.12 + 0.11 / me.sqrt()) * exact.statistic;
            let asym = kolmogorov_q(lambda);
            assert!(
                (exact.p_value - asym).abs() < 0.1,
                "exact {} vs asymptotic {asym}",
                exact.p_value
            );
        }
    }

    #[test]
    fn ks_one_sample_normal_behaviour() {
        let mut rng = SplitMix64::new(42);
        let good: Vec<f64> = (0..2000).map(|_| normal_draw(&mut rng)).collect();
        assert!(ks_one_sample_normal(&good).unwrap().p_value > 0.01);

        let shifted: Vec<f64> = good.iter().map(|x| x + 0.5).collect();
        assert!(ks_one_sample_normal(&shifted).unwrap().p_value < 1e-6);
        assert!(ks_one_sample_normal(&[]).is_err());
    }

    #[test]
    fn hill_recovers_pareto_index() {
        let mut rng = SplitMix64::new(7);
        let alpha = 2.5;
        let xs: Vec<f64> =
            (0..1_000_000).map(|_| (1.0 - rng.next_f64()).powf(-1.0 / alpha)).collect();
        let h = hill_tail_index(&xs, 0.01).unwrap();
        assert!(h.estimate > 2.2 && h.estimate < 2.8, "estimate {}", h.estimate);
        assert!(h.heavy_tail);
        assert!((h.se - h.estimate / (h.k as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hill_flags_thin_tails() {
        // Exponential tails: the estimate grows as the fraction shrinks.
        let mut rng = SplitMix64::new(8);
        let xs: Vec<f64> = (0..200_000).map(|_| -(1.0 - rng.next_f64()).ln()).collect();
        let wide = hill_tail_index(&xs, 0.05).unwrap();
        let narrow = hill_tail_index(&xs, 0.001).unwrap();
        assert!(narrow.estimate > wide.estimate);

        // Nearly-constant positive sample: enormous estimate, flagged.
        let flat: Vec<f64> = (0..10_000).map(|i| 1.0 + i as f64 * 1e-9).collect();
        let h = hill_tail_index(&flat, 0.01).unwrap();
        assert!(h.estimate > 10.0);
        assert!(!h.heavy_tail);

        assert!(hill_tail_index(&vec![3.0; 100], 0.1).is_err()); // all equal
        assert!(hill_tail_index(&xs, 0.7).is_err());
        assert!(hill_tail_index(&xs, 0.0).is_err());
        assert!(hill_tail_index(&[1.0, -2.0], 0.5).is_err());
    }

    #[test]
    fn chi_square_oracle_values() {
        // Survival values pinned against scipy.stats.chi2.sf.
        let d12 = ChiSquared::new(12.0).unwrap();
        assert!((1.0 - d12.cdf(21.026) - 0.05000101541694227).abs() < 1e-10);
        let d3 = ChiSquared::new(3.0).unwrap();
        assert!((1.0 - d3.cdf(5.0) - 0.17179714429673313).abs() < 1e-10);

        let probs = vec![0.25; 4];
        let obs = vec![260u64, 240, 255, 245];
        let r = chi_square_gof(&obs, &probs).unwrap();
        assert_eq!(r.df, 3);
        assert!(r.p_value > 0.5, "p = {}", r.p_value);
        assert!(chi_square_gof(&[0, 0], &[0.5, 0.5]).is_err());
        assert!(chi_square_gof(&[1, 2], &[0.5]).is_err());
    }

    #[test]
    fn msd_curve_exact_on_synthetic_data() {
        // Two replicas, positions chosen so the means are hand-computable.
        let e1 = vec![(0u64, site(&[0, 0])), (4, site(&[2, 0]))];
        let e2 = vec![(0u64, site(&[0, 0])), (4, site(&[0, 4]))];
        let views: Vec<&[(u64, Site)]> = vec![&e1, &e2];
        let curve = msd_curve(&views).unwrap();
        assert_eq!(curve[0].mean, 0.0);
        assert_eq!(curve[0].se, 0.0);
        assert_eq!(curve[1].mean, 10.0); // (4 + 16) / 2
        // sample var = ((4-10)^2 + (16-10)^2) / 1 = 72; se = sqrt(72/2) = 6
        assert!((curve[1].se - 6.0).abs() < 1e-12);

        assert!(msd_curve(&[]).is_err());
        let bad = vec![(1u64, site(&[0, 0]))];
        let views: Vec<&[(u64, Site)]> = vec![&e1, &bad];
        assert!(msd_curve(&views).is_err());
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x).collect();
        let (a, b, rel) = linear_fit(&xs, &ys).unwrap();
        assert!((a - 3.0).abs() < 1e-10);
        assert!((b - 2.0).abs() < 1e-10);
        assert!(rel < 1e-12);
    }

    #[test]
    fn return_statistics_cases() {
        let r = return_statistics(&[], 100);
        assert_eq!((r.mean_returns, r.fraction_late), (0.0, 0.0));

        // returns: 2, 4; late: one of two replicas beyond 100.
        let data = vec![(2u64, 50u64), (4, 150)];
        let r = return_statistics(&data, 100);
        assert_eq!(r.mean_returns, 3.0);
        assert_eq!(r.fraction_late, 0.5);
        // var = ((2-3)^2 + (4-3)^2)/1 = 2, se = 1
        assert!((r.se_returns - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clt_accepts_gaussian_ensemble() {
        let mut rng = SplitMix64::new(77);
        let n = 10_000u64;
        let sigma = 0.8;
        let positions: Vec<Site> = (0..800)
            .map(|_| {
                let x = (sigma * (n as f64).sqrt() * normal_draw(&mut rng)).round() as i64;
                let y = (sigma * (n as f64).sqrt() * normal_draw(&mut rng)).round() as i64;
                site(&[x, y])
            })
            .collect();
        let rep = clt_tests(&positions, n).unwrap();
        assert!(rep.passed(0.01), "{rep:?}");
        assert!((rep.sigma_hat - sigma).abs() < 0.1);
        assert!(rep.diagnostic.is_none());
    }

    #[test]
    fn clt_rejects_degenerate_and_small_ensembles() {
        let positions: Vec<Site> = (0..600).map(|_| site(&[3, -1])).collect();
        let rep = clt_tests(&positions, 100).unwrap();
        assert!(!rep.non_degenerate);
        assert!(rep.diagnostic.is_some());
        assert!(!rep.passed(0.01));

        let few: Vec<Site> = (0..100).map(|_| site(&[1, 0])).collect();
        assert!(clt_tests(&few, 100).is_err());
    }

    #[test]
    fn clt_flags_anisotropy() {
        // Second axis stretched 1.6x: diagonal gap must exceed 3 SE.
        let mut rng = SplitMix64::new(13);
        let n = 10_000u64;
        let positions: Vec<Site> = (0..1_000)
            .map(|_| {
                let x = (100.0 * normal_draw(&mut rng)).round() as i64;
                let y = (160.0 * normal_draw(&mut rng)).round() as i64;
                site(&[x, y])
            })
            .collect();
        let rep = clt_tests(&positions, n).unwrap();
        assert!(!rep.isotropic, "{rep:?}");
    }

    fn record(replica: u64, fin: &[i64], returns: u64, last: u64) -> ReplicaRecord {
        ReplicaRecord {
            replica,
            final_position: site(fin),
            returns,
            last_return: last,
            checkpoint_positions: vec![(10, site(fin))],
            regens: vec![2, 5],
            censored_from: 9,
            increments: vec![RegenIncrement { dt: 3, dy: SmallVec::from_slice(&[1, 0]) }],
            k_digest: None,
        }
    }

    #[test]
    fn summarize_is_reorder_invariant() {
        let recs = vec![
            record(0, &[1, 2], 1, 3),
            record(1, &[-2, 0], 0, 0),
            record(2, &[3, 3], 2, 8),
        ];
        let opts = SummarizeOptions { late_cutoff: 5, regen: true, clt: false, tail: None };
        let a = summarize(recs.clone(), &opts).unwrap();
        let mut shuffled = recs.clone();
        shuffled.reverse();
        let b = summarize(shuffled, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a.pooled).unwrap(),
            serde_json::to_string(&b.pooled).unwrap()
        );
        assert_eq!(a.records, b.records);
        assert_eq!(a.pooled.regen.as_ref().unwrap().increment_count, 3);
        assert_eq!(a.pooled.returns.fraction_late, 1.0 / 3.0);

        let mut dup = recs;
        dup[1].replica = 0;
        assert!(summarize(dup, &opts).is_err());
    }

    #[test]
    fn summarize_clt_needs_checkpoints() {
        let mut recs: Vec<ReplicaRecord> =
            (0..600).map(|i| record(i, &[i as i64 % 7 - 3, 1], 0, 0)).collect();
        for r in &mut recs {
            r.checkpoint_positions.clear();
        }
        let opts = SummarizeOptions { late_cutoff: 5, regen: false, clt: true, tail: None };
        match summarize(recs, &opts) {
            Err(Error::Analysis(msg)) => assert!(msg.contains("checkpoint")),
            other => panic!("expected analysis error, got {other:?}"),
        }
    }
}
