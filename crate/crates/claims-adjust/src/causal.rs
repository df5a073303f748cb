//! The weighting estimator: per-draw inverse-probability-of-treatment
//! weights, conjugate beta posteriors for the weighted group event
//! probabilities, risk differences, and covariate-balance diagnostics.
//!
//! For each posterior draw of the propensity model, subjects are weighted by
//! w_i = X_i/π_i + (1−X_i)/(1−π_i), the weighted event and non-event counts
//! in each treatment group are renormalized to the group's original size
//! (γ_g = n_g over the group's total weight), and the group event probability
//! gets the conjugate posterior p_g ~ Beta(1 + γ_g·E_g, 1 + γ_g·F_g). One
//! Beta draw per group per propensity draw propagates the propensity model's
//! uncertainty into the risk difference Δ = p₁ − p₀.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::ingest::AnalysisDataset;
use crate::model::{Model, PROPENSITY_EPS};
use crate::sampler::PosteriorDraws;
use crate::util::{mean, quantile, sample_variance};

/// Propensities outside this range are counted as positivity concerns.
pub const POSITIVITY_RANGE: (f64, f64) = (0.01, 0.99);

/// Balance window on the ×100 percent scale.
pub const BALANCE_WINDOW: (f64, f64) = (-10.0, 10.0);

/// Conjugate beta parameters for one treatment group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCounts {
    /// 1 + γ·(weighted events).
    pub a_star: f64,
    /// 1 + γ·(weighted non-events); derived through the normalization
    /// identity so that a* + b* = 2 + n holds bitwise (it agrees with the
    /// direct formula to a rounding error).
    pub b_star: f64,
    /// Normalizer γ = n / (total weight in the group).
    pub gamma: f64,
    /// Raw group size.
    pub n: usize,
}

/// Conjugate beta parameters for both treatment groups under one weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCounts {
    pub control: GroupCounts,
    pub treated: GroupCounts,
}

/// Posterior summary of the risk difference for one outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSummary {
    pub outcome: String,
    /// One (p₀, p₁, Δ) triple per propensity draw.
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    pub delta: Vec<f64>,
    pub p0_mean: f64,
    pub p1_mean: f64,
    pub mean_delta: f64,
    /// Equal-tailed 95% credible interval for Δ and its width.
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_width: f64,
    /// Subjects whose posterior-mean propensity falls outside
    /// [`POSITIVITY_RANGE`] — a positivity diagnostic.
    pub n_extreme_pi: usize,
}

/// One covariate's standardized-difference distribution across draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub name: String,
    /// Mean standardized difference across draws, ×100 percent scale.
    pub mean_sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// True when the covariate was constant (zero pooled SD); the
    /// standardized difference is defined as 0 in that case.
    pub constant: bool,
}

/// Covariate balance across posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    /// Covariates whose mean standardized difference lies outside the window.
    pub n_mean_outside: usize,
    /// Covariates whose 95% interval is not contained in the window.
    pub n_interval_outside: usize,
    pub window: (f64, f64),
}

/// Options for the balance computation.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOptions {
    /// Upper bound on the number of posterior draws used (evenly thinned);
    /// `None` evaluates every draw.
    pub max_draws: Option<usize>,
    pub window: (f64, f64),
}

impl Default for BalanceOptions {
    fn default() -> Self {
        BalanceOptions { max_draws: Some(500), window: BALANCE_WINDOW }
    }
}

/// Inverse-probability-of-treatment weights w_i = X_i/π_i + (1−X_i)/(1−π_i).
pub fn ipw_weights(pi: &[f64], x: &[u8]) -> Result<Vec<f64>> {
    if pi.len() != x.len() {
        return Err(Error::Validation(format!(
            "propensity and treatment lengths differ: {} vs {}",
            pi.len(),
            x.len()
        )));
    }
    let mut w = Vec::with_capacity(pi.len());
    for (i, (&p, &t)) in pi.iter().zip(x).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Validation(format!(
                "propensity for subject {i} is {p}, outside (0,1)"
            )));
        }
        if t > 1 {
            return Err(Error::Validation(format!(
                "treatment indicator for subject {i} is {t}, not 0/1"
            )));
        }
        w.push(if t == 1 { 1.0 / p } else { 1.0 / (1.0 - p) });
    }
    Ok(w)
}

/// Force `a + b == sum` bitwise by nudging `b` at most a couple of ulps.
/// Floating-point double rounding can otherwise break the identity in rare
/// tie cases even though b is constructed as sum − a.
fn enforce_sum(a: f64, mut b: f64, sum: f64) -> f64 {
    for _ in 0..4 {
        let got = a + b;
        if got == sum {
            break;
        }
        b = if got > sum {
            f64::from_bits(b.to_bits() - 1)
        } else {
            f64::from_bits(b.to_bits() + 1)
        };
    }
    b
}

/// Weighted event counts and conjugate beta parameters for both groups.
///
/// Weighted events E_g = Σ_{i∈g} w_i·Y_i and non-events F_g = Σ w_i·(1−Y_i)
/// are renormalized by γ_g = n_g/(E_g + F_g) so the beta posterior carries
/// exactly the group's observed information: a*_g + b*_g = 2 + n_g.
pub fn weighted_beta_params(pi: &[f64], x: &[u8], y: &[u8]) -> Result<WeightedCounts> {
    if y.len() != x.len() {
        return Err(Error::Validation(format!(
            "outcome and treatment lengths differ: {} vs {}",
            y.len(),
            x.len()
        )));
    }
    if y.iter().any(|v| *v > 1) {
        return Err(Error::Validation("outcome indicators must be 0/1".into()));
    }
    let w = ipw_weights(pi, x)?;
    let mut events = [0.0f64; 2];
    let mut nonevents = [0.0f64; 2];
    let mut sizes = [0usize; 2];
    for i in 0..x.len() {
        let g = x[i] as usize;
        sizes[g] += 1;
        if y[i] == 1 {
            events[g] += w[i];
        } else {
            nonevents[g] += w[i];
        }
    }
    let mut groups = Vec::with_capacity(2);
    for g in 0..2 {
        if sizes[g] == 0 {
            return Err(Error::Validation(format!(
                "treatment group {g} is empty: positivity fails at the design level"
            )));
        }
        let nf = sizes[g] as f64;
        let total = events[g] + nonevents[g];
        let gamma = nf / total;
        let a_star = 1.0 + gamma * events[g];
        let b_star = enforce_sum(a_star, (2.0 + nf) - a_star, 2.0 + nf);
        groups.push(GroupCounts { a_star, b_star, gamma, n: sizes[g] });
    }
    let treated = groups.pop().expect("two groups");
    let control = groups.pop().expect("two groups");
    Ok(WeightedCounts { control, treated })
}

/// Risk-difference posterior from an S×n propensity matrix (one row per
/// posterior draw). The model-facing entry point is [`draw_causal`].
pub fn causal_from_propensities(
    pi_matrix: ArrayView2<f64>,
    x: &[u8],
    y: &[u8],
    outcome: &str,
    seed: u64,
) -> Result<CausalSummary> {
    let (s, n) = pi_matrix.dim();
    if s == 0 {
        return Err(Error::Validation("no propensity draws".into()));
    }
    if n != x.len() {
        return Err(Error::Validation(format!(
            "propensity matrix has {n} columns but {} subjects",
            x.len()
        )));
    }
    let mut p0 = Vec::with_capacity(s);
    let mut p1 = Vec::with_capacity(s);
    let mut delta = Vec::with_capacity(s);
    let mut pi_mean = vec![0.0f64; n];
    let mut row = vec![0.0f64; n];
    for draw in 0..s {
        for (dst, v) in row.iter_mut().zip(pi_matrix.row(draw).iter()) {
            *dst = *v;
        }
        for (acc, v) in pi_mean.iter_mut().zip(&row) {
            *acc += v;
        }
        let counts = weighted_beta_params(&row, x, y)?;
        // One RNG stream per draw so results do not depend on draw order.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(draw as u64);
        let sample = |g: &GroupCounts, rng: &mut ChaCha8Rng| -> Result<f64> {
            let dist = Beta::new(g.a_star, g.b_star).map_err(|e| {
                Error::Validation(format!("invalid beta parameters: {e}"))
            })?;
            Ok(dist
                .sample(rng)
                .clamp(PROPENSITY_EPS, 1.0 - PROPENSITY_EPS))
        };
        let d0 = sample(&counts.control, &mut rng)?;
        let d1 = sample(&counts.treated, &mut rng)?;
        p0.push(d0);
        p1.push(d1);
        delta.push(d1 - d0);
    }
    let n_extreme_pi = pi_mean
        .iter()
        .filter(|&&acc| {
            let m = acc / s as f64;
            m < POSITIVITY_RANGE.0 || m > POSITIVITY_RANGE.1
        })
        .count();
    let ci_low = quantile(&delta, 0.025);
    let ci_high = quantile(&delta, 0.975);
    Ok(CausalSummary {
        outcome: outcome.to_string(),
        p0_mean: mean(&p0),
        p1_mean: mean(&p1),
        mean_delta: mean(&delta),
        ci_low,
        ci_high,
        ci_width: ci_high - ci_low,
        n_extreme_pi,
        p0,
        p1,
        delta,
    })
}

/// Risk-difference posterior for one outcome: propensities from the fitted
/// model's draws, one Beta draw per group per propensity draw.
pub fn draw_causal(
    model: &Model,
    ds: &AnalysisDataset,
    draws: &PosteriorDraws,
    outcome: &str,
    seed: u64,
) -> Result<CausalSummary> {
    let y = ds.outcome(outcome).ok_or_else(|| {
        Error::Validation(format!(
            "outcome '{outcome}' not in dataset (have: {})",
            ds.outcome_names().join(", ")
        ))
    })?;
    let pi = model.propensity_matrix(draws.flat().view())?;
    causal_from_propensities(pi.view(), &ds.treatment, y, outcome, seed)
}

/// The raw covariate matrix balance is assessed on: baseline columns followed
/// by claims columns, with their names.
pub fn balance_covariates(ds: &AnalysisDataset) -> (Array2<f64>, Vec<String>) {
    let n = ds.n();
    let q = ds.q();
    let p = ds.p();
    let mut m = Array2::zeros((q + p, n));
    for j in 0..q {
        for i in 0..n {
            m[[j, i]] = ds.baseline[[i, j]];
        }
    }
    for j in 0..p {
        for i in 0..n {
            m[[q + j, i]] = ds.claims[[i, j]];
        }
    }
    let mut names = ds.baseline_names.clone();
    names.extend(ds.claims_names.iter().cloned());
    (m, names)
}

/// Standardized differences from an S×n propensity matrix over a (p×n)
/// covariate matrix (one covariate per row). See
/// [`standardized_differences`] for the model-facing entry point.
pub fn balance_from_propensities(
    pi_matrix: ArrayView2<f64>,
    x: &[u8],
    covariates: ArrayView2<f64>,
    names: &[String],
    opts: &BalanceOptions,
) -> Result<BalanceReport> {
    let (s, n) = pi_matrix.dim();
    let (p, nc) = covariates.dim();
    if s == 0 {
        return Err(Error::Validation("no propensity draws".into()));
    }
    if nc != n || x.len() != n || names.len() != p {
        return Err(Error::Validation(format!(
            "balance shape mismatch: {s}×{n} propensities, {p}×{nc} covariates, \
             {} treatments, {} names",
            x.len(),
            names.len()
        )));
    }
    let (w_lo, w_hi) = opts.window;
    if !(w_lo < w_hi) {
        return Err(Error::Validation(format!(
            "balance window ({w_lo}, {w_hi}) is not an interval"
        )));
    }

    // Fixed, unweighted pooled standard deviation per covariate, so that
    // draw-to-draw variation in the statistic reflects the weights only.
    let mut pooled = Vec::with_capacity(p);
    for j in 0..p {
        let mut by_group: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for i in 0..n {
            by_group[x[i] as usize].push(covariates[[j, i]]);
        }
        if by_group[0].is_empty() || by_group[1].is_empty() {
            return Err(Error::Validation(
                "both treatment groups must be non-empty for balance".into(),
            ));
        }
        let v0 = sample_variance(&by_group[0]);
        let v1 = sample_variance(&by_group[1]);
        pooled.push(((v0 + v1) / 2.0).sqrt());
    }

    // Evenly thinned draw indices.
    let step = match opts.max_draws {
        Some(cap) if cap > 0 && s > cap => s.div_ceil(cap),
        Some(0) => {
            return Err(Error::Validation("max_draws must be positive".into()));
        }
        _ => 1,
    };
    let draw_idx: Vec<usize> = (0..s).step_by(step).collect();

    let mut per_cov: Vec<Vec<f64>> = vec![Vec::with_capacity(draw_idx.len()); p];
    let mut w = vec![0.0f64; n];
    for &draw in &draw_idx {
        let mut w_sum = [0.0f64; 2];
        for i in 0..n {
            let pi = pi_matrix[[draw, i]];
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::Validation(format!(
                    "propensity for subject {i} in draw {draw} is {pi}, outside (0,1)"
                )));
            }
            w[i] = if x[i] == 1 { 1.0 / pi } else { 1.0 / (1.0 - pi) };
            w_sum[x[i] as usize] += w[i];
        }
        for j in 0..p {
            if pooled[j] == 0.0 {
                per_cov[j].push(0.0);
                continue;
            }
            let mut m = [0.0f64; 2];
            let row = covariates.row(j);
            for i in 0..n {
                m[x[i] as usize] += w[i] * row[i];
            }
            let diff = m[1] / w_sum[1] - m[0] / w_sum[0];
            per_cov[j].push(100.0 * diff / pooled[j]);
        }
    }

    let mut rows = Vec::with_capacity(p);
    let mut n_mean_outside = 0;
    let mut n_interval_outside = 0;
    for j in 0..p {
        let mean_sd = mean(&per_cov[j]);
        let q025 = quantile(&per_cov[j], 0.025);
        let q975 = quantile(&per_cov[j], 0.975);
        if mean_sd <= w_lo || mean_sd >= w_hi {
            n_mean_outside += 1;
        }
        if q025 <= w_lo || q975 >= w_hi {
            n_interval_outside += 1;
        }
        rows.push(BalanceRow {
            name: names[j].clone(),
            mean_sd,
            q025,
            q975,
            constant: pooled[j] == 0.0,
        });
    }
    Ok(BalanceReport { rows, n_mean_outside, n_interval_outside, window: opts.window })
}

/// Covariate balance under the fitted propensity model: the standardized
/// difference of every baseline and claims covariate, once per (thinned)
/// posterior draw, summarized across draws on the ×100 percent scale.
pub fn standardized_differences(
    model: &Model,
    ds: &AnalysisDataset,
    draws: &PosteriorDraws,
    opts: &BalanceOptions,
) -> Result<BalanceReport> {
    let (cov, names) = balance_covariates(ds);
    let pi = model.propensity_matrix(draws.flat().view())?;
    balance_from_propensities(pi.view(), &ds.treatment, cov.view(), &names, opts)
}

/// Classic unadjusted standardized differences (×100): plain group means over
/// the fixed pooled SD. The weighted report under constant propensities
/// reproduces these.
pub fn unadjusted_standardized_differences(
    ds: &AnalysisDataset,
) -> Result<Vec<(String, f64)>> {
    let (cov, names) = balance_covariates(ds);
    let x = &ds.treatment;
    let n = ds.n();
    let mut out = Vec::with_capacity(names.len());
    for j in 0..names.len() {
        let mut by_group: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for i in 0..n {
            by_group[x[i] as usize].push(cov[[j, i]]);
        }
        if by_group[0].is_empty() || by_group[1].is_empty() {
            return Err(Error::Validation(
                "both treatment groups must be non-empty for balance".into(),
            ));
        }
        let pooled =
            ((sample_variance(&by_group[0]) + sample_variance(&by_group[1])) / 2.0).sqrt();
        let sd = if pooled == 0.0 {
            0.0
        } else {
            100.0 * (mean(&by_group[1]) - mean(&by_group[0])) / pooled
        };
        out.push((names[j].clone(), sd));
    }
    Ok(out)
}
