//! Predictive-accuracy diagnostics: Pareto-smoothed importance sampling
//! (PSIS) and the leave-one-out information criterion (LOO-IC).
//!
//! Given an S×n pointwise log-likelihood matrix (draw s, subject i), the
//! leave-one-out predictive density for subject i is approximated by
//! importance sampling with ratios 1/p(y_i | θ_s). The raw ratios have heavy
//! right tails, so the largest ones are replaced by expected order statistics
//! of a generalized Pareto distribution fitted to the tail — the PSIS
//! procedure. The fitted shape k̂ doubles as a reliability diagnostic:
//! subjects with k̂ > 0.7 have unstable importance estimates.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::util::{logsumexp, sample_variance};

/// Generalized Pareto fit to a vector of positive exceedances.
#[derive(Debug, Clone, PartialEq)]
pub struct GpdFit {
    /// Tail shape. Positive values mean heavier-than-exponential tails;
    /// `-inf` when the tail was degenerate (all exceedances equal).
    pub k: f64,
    /// Scale parameter (0 when degenerate).
    pub sigma: f64,
    /// True when the tail carried no usable information and no smoothing
    /// should be applied downstream.
    pub degenerate: bool,
}

/// Options shared by PSIS smoothing and LOO.
#[derive(Debug, Clone, PartialEq)]
pub struct PsisOptions {
    /// Tail fraction in M = min(⌈tail_fraction·S⌉, ⌈tail_multiplier·√S⌉).
    pub tail_fraction: f64,
    /// √S multiplier in the tail-size rule above.
    pub tail_multiplier: f64,
    /// Pareto-k threshold above which a subject's importance estimate is
    /// flagged unreliable.
    pub k_warn: f64,
}

impl Default for PsisOptions {
    fn default() -> Self {
        PsisOptions { tail_fraction: 0.2, tail_multiplier: 3.0, k_warn: 0.7 }
    }
}

impl PsisOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tail_fraction > 0.0 && self.tail_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "tail_fraction must lie in (0,1), got {}",
                self.tail_fraction
            )));
        }
        if !(self.tail_multiplier > 0.0) {
            return Err(Error::Validation(format!(
                "tail_multiplier must be positive, got {}",
                self.tail_multiplier
            )));
        }
        if !(self.k_warn > 0.0) {
            return Err(Error::Validation(format!(
                "k_warn must be positive, got {}",
                self.k_warn
            )));
        }
        Ok(())
    }

    fn tail_len(&self, s: usize) -> usize {
        let by_frac = (self.tail_fraction * s as f64).ceil() as usize;
        let by_sqrt = (self.tail_multiplier * (s as f64).sqrt()).ceil() as usize;
        by_frac.min(by_sqrt).clamp(1, s - 1)
    }
}

/// Smoothed importance weights for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PsisResult {
    /// Normalized weights (nonnegative, sum to 1), in input order.
    pub weights: Vec<f64>,
    /// Fitted Pareto tail shape (`-inf` when degenerate).
    pub k: f64,
    /// True when the tail was degenerate and the weights are the raw
    /// normalized ratios.
    pub degenerate: bool,
}

/// PSIS-LOO summary for a log-likelihood matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    /// Expected log pointwise predictive density, summed over subjects.
    pub elpd_loo: f64,
    /// −2·elpd_loo, on the deviance scale (lower is better).
    pub loo_ic: f64,
    /// Standard error √(n·var(elpd_i)) of elpd_loo.
    pub se: f64,
    /// Per-subject Pareto tail shapes.
    pub pareto_k: Vec<f64>,
    /// Number of subjects with k above the warning threshold.
    pub n_bad_k: usize,
    /// Per-subject elpd contributions.
    pub elpd_pointwise: Vec<f64>,
    /// True when S < 100, where the Pareto fit has little to work with.
    pub warn_small_s: bool,
}

/// Fit a generalized Pareto distribution to positive exceedances by the
/// Zhang–Stephens profile-likelihood method: a deterministic grid of
/// candidate values of θ = −k/σ, each with a closed-form conditional MLE for
/// k, averaged under weights proportional to profile likelihood. The shape is
/// then shrunk toward 1/2 with prior weight 10 pseudo-observations, which
/// stabilizes small tails.
pub fn fit_generalized_pareto(exceedances: &[f64]) -> Result<GpdFit> {
    let n = exceedances.len();
    if n < 5 {
        return Err(Error::Validation(format!(
            "generalized Pareto fit needs at least 5 exceedances, got {n}"
        )));
    }
    if exceedances.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(Error::Validation(
            "generalized Pareto exceedances must be positive and finite".into(),
        ));
    }
    let mut x = exceedances.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let x_max = x[n - 1];
    if x_max - x[0] <= 1e-12 * x_max {
        return Ok(GpdFit { k: f64::NEG_INFINITY, sigma: 0.0, degenerate: true });
    }

    let m = 30 + (n as f64).sqrt().floor() as usize;
    let quart = x[((n as f64 / 4.0 + 0.5).floor() as usize).saturating_sub(1)];
    let nf = n as f64;
    let mut theta = Vec::with_capacity(m);
    let mut profile = Vec::with_capacity(m);
    for j in 1..=m {
        let t = 1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * quart);
        // Conditional MLE of the shape given θ, and the profile log-likelihood.
        let k = x.iter().map(|xi| (-t * xi).ln_1p()).sum::<f64>() / nf;
        let l = nf * ((-t / k).ln() - k - 1.0);
        theta.push(t);
        profile.push(if l.is_finite() { l } else { f64::NEG_INFINITY });
    }
    let lse = logsumexp(&profile);
    if !lse.is_finite() {
        return Ok(GpdFit { k: f64::NEG_INFINITY, sigma: 0.0, degenerate: true });
    }
    let theta_hat: f64 =
        theta.iter().zip(&profile).map(|(t, l)| t * (l - lse).exp()).sum();
    let k_raw = x.iter().map(|xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / nf;
    let sigma = -k_raw / theta_hat;
    if !k_raw.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return Ok(GpdFit { k: f64::NEG_INFINITY, sigma: 0.0, degenerate: true });
    }
    // Weakly-informative shrinkage of the shape toward 1/2.
    let k = (k_raw * nf + 5.0) / (nf + 10.0);
    Ok(GpdFit { k, sigma, degenerate: false })
}

/// Generalized Pareto quantile function.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma * ((1.0 - p).powf(-k) - 1.0) / k
    }
}

/// Pareto-smoothed importance weights with default options.
pub fn psis_weights(log_ratios: &[f64]) -> Result<PsisResult> {
    psis_weights_with(log_ratios, &PsisOptions::default())
}

/// Pareto-smoothed importance weights.
///
/// The top M = min(⌈0.2·S⌉, ⌈tail_multiplier·√S⌉) raw ratios are replaced by
/// expected order statistics of a generalized Pareto distribution fitted to
/// their exceedances over the largest non-tail ratio, truncated at the raw
/// maximum, and the full vector is normalized to sum to one. A degenerate
/// tail (all ratios equal, or too few distinct exceedances) leaves the raw
/// normalized ratios untouched and flags `k = -inf`.
pub fn psis_weights_with(log_ratios: &[f64], opts: &PsisOptions) -> Result<PsisResult> {
    opts.validate()?;
    let s = log_ratios.len();
    if s < 25 {
        return Err(Error::Validation(format!(
            "PSIS needs at least 25 draws, got {s}"
        )));
    }
    if log_ratios.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("PSIS log-ratios must be finite".into()));
    }

    // Work on max-shifted log weights so exponentials stay in range; the raw
    // maximum is 0 on this scale.
    let shift = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|x| x - shift).collect();

    let m = opts.tail_len(s);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].partial_cmp(&lw[b]).unwrap());
    let cutoff = lw[order[s - m - 1]].exp();
    let tail = &order[s - m..];
    let exceedances: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - cutoff).collect();

    let usable = m >= 5 && exceedances.iter().all(|e| *e > 0.0);
    let fit = if usable {
        fit_generalized_pareto(&exceedances)?
    } else {
        GpdFit { k: f64::NEG_INFINITY, sigma: 0.0, degenerate: true }
    };

    if !fit.degenerate {
        for (rank, &i) in tail.iter().enumerate() {
            let p = (rank as f64 + 0.5) / m as f64;
            let smoothed = cutoff + gpd_quantile(p, fit.k, fit.sigma);
            // Truncate at the raw maximum (0 on the shifted log scale).
            lw[i] = smoothed.ln().min(0.0);
        }
    }

    let lse = logsumexp(&lw);
    let weights = lw.iter().map(|x| (x - lse).exp()).collect();
    Ok(PsisResult { weights, k: fit.k, degenerate: fit.degenerate })
}

/// PSIS-LOO with default options.
pub fn loo_ic(loglik: ArrayView2<f64>) -> Result<LooResult> {
    loo_ic_with(loglik, &PsisOptions::default())
}

/// PSIS-LOO from an S×n pointwise log-likelihood matrix.
///
/// For each subject the importance log-ratios are the negated log-likelihood
/// column; the PSIS-smoothed weights give
/// elpd_i = log Σ_s w_si·exp(loglik_si), and the summary is
/// elpd_loo = Σ elpd_i, se = √(n·var(elpd_i)), loo_ic = −2·elpd_loo.
pub fn loo_ic_with(loglik: ArrayView2<f64>, opts: &PsisOptions) -> Result<LooResult> {
    opts.validate()?;
    let (s, n) = loglik.dim();
    if n == 0 {
        return Err(Error::Validation("log-likelihood matrix has no subjects".into()));
    }
    if s < 25 {
        return Err(Error::Validation(format!(
            "LOO needs at least 25 posterior draws, got {s}"
        )));
    }
    if let Some(((r, c), v)) =
        loglik.indexed_iter().find(|(_, v)| !v.is_finite())
    {
        return Err(Error::NonFinite {
            slot: format!("loglik[{r},{c}]"),
            detail: format!("value {v}"),
        });
    }

    let mut pareto_k = Vec::with_capacity(n);
    let mut elpd_pointwise = Vec::with_capacity(n);
    let mut scratch = vec![0.0; s];
    for i in 0..n {
        let col = loglik.column(i);
        for (dst, v) in scratch.iter_mut().zip(col.iter()) {
            *dst = -v;
        }
        let psis = psis_weights_with(&scratch, opts)?;
        for ((dst, w), ll) in scratch.iter_mut().zip(&psis.weights).zip(col.iter()) {
            *dst = w.ln() + ll;
        }
        let elpd_i = logsumexp(&scratch);
        if !elpd_i.is_finite() {
            return Err(Error::NonFinite {
                slot: format!("elpd[{i}]"),
                detail: "leave-one-out predictive density was not finite".into(),
            });
        }
        pareto_k.push(psis.k);
        elpd_pointwise.push(elpd_i);
    }

    let elpd_loo: f64 = elpd_pointwise.iter().sum();
    let se = if n >= 2 {
        (n as f64 * sample_variance(&elpd_pointwise)).sqrt()
    } else {
        0.0
    };
    let n_bad_k = pareto_k.iter().filter(|k| **k > opts.k_warn).count();
    Ok(LooResult {
        elpd_loo,
        loo_ic: -2.0 * elpd_loo,
        se,
        pareto_k,
        n_bad_k,
        elpd_pointwise,
        warn_small_s: s < 100,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AnalysisDataset, ClaimsKind};
    use crate::model::{Model, PriorFamily};
    use crate::sampler::{run_chains, SamplerConfig};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gpd_sample(n: usize, k: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                gpd_quantile(u, k, sigma)
            })
            .collect()
    }

    #[test]
    fn gpd_fit_recovers_known_shapes() {
        // Simulated GPD(k = 0.3, σ = 1) exceedances.
        let xs = gpd_sample(2000, 0.3, 1.0, 11);
        let fit = fit_generalized_pareto(&xs).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.k - 0.3).abs() < 0.05, "k {}", fit.k);
        assert!((fit.sigma - 1.0).abs() < 0.15, "sigma {}", fit.sigma);

        // Exponential data is the k → 0 limit of the GPD family.
        let xs = gpd_sample(2000, 0.0, 1.0, 12);
        let fit = fit_generalized_pareto(&xs).unwrap();
        assert!(fit.k.abs() < 0.05, "k {}", fit.k);
        assert!((fit.sigma - 1.0).abs() < 0.15, "sigma {}", fit.sigma);

        // A heavier tail, different scale.
        let xs = gpd_sample(4000, 0.7, 2.5, 13);
        let fit = fit_generalized_pareto(&xs).unwrap();
        assert!((fit.k - 0.7).abs() < 0.05, "k {}", fit.k);
        assert!((fit.sigma / 2.5 - 1.0).abs() < 0.1, "sigma {}", fit.sigma);
    }

    #[test]
    fn gpd_fit_flags_degenerate_and_invalid_tails() {
        let fit = fit_generalized_pareto(&[2.0; 40]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.k, f64::NEG_INFINITY);

        assert!(fit_generalized_pareto(&[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(fit_generalized_pareto(&[1.0, 2.0, 3.0, 4.0, -1.0]).is_err());
        assert!(fit_generalized_pareto(&[1.0, 2.0, 3.0, 4.0, f64::NAN]).is_err());
    }

    #[test]
    fn psis_weights_form_a_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for s in [25usize, 100, 1000] {
            let lr: Vec<f64> = (0..s)
                .map(|_| {
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    2.0 * z
                })
                .collect();
            let res = psis_weights(&lr).unwrap();
            assert_eq!(res.weights.len(), s);
            assert!(res.weights.iter().all(|w| *w >= 0.0));
            let sum: f64 = res.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        }
    }

    use rand_distr::Distribution;

    #[test]
    fn equal_log_ratios_give_uniform_weights_and_degenerate_flag() {
        let lr = vec![0.7; 50];
        let res = psis_weights(&lr).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.k, f64::NEG_INFINITY);
        for w in &res.weights {
            assert!((w - 1.0 / 50.0).abs() < 1e-14);
        }
    }

    #[test]
    fn low_variance_ratios_are_barely_smoothed() {
        // N(0, 0.25) log-ratios: smoothing should move almost no mass.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let lr: Vec<f64> = (0..1000)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect();
        let res = psis_weights(&lr).unwrap();
        let lse = logsumexp(&lr);
        let raw: Vec<f64> = lr.iter().map(|x| (x - lse).exp()).collect();
        let tv = 0.5
            * res
                .weights
                .iter()
                .zip(&raw)
                .map(|(w, r)| (w - r).abs())
                .sum::<f64>();
        assert!(tv < 0.02, "total variation distance {tv}");
    }

    #[test]
    fn extreme_outlier_weight_shrinks_and_max_is_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut lr: Vec<f64> = (0..100)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        lr[7] = 12.0;
        let res = psis_weights(&lr).unwrap();
        let lse = logsumexp(&lr);
        let raw: Vec<f64> = lr.iter().map(|x| (x - lse).exp()).collect();
        assert!(
            res.weights[7] < raw[7],
            "smoothed {} vs raw {}",
            res.weights[7],
            raw[7]
        );
        // Truncation: no smoothed (unnormalized) weight exceeds the raw
        // maximum, so on the normalized scale the outlier cannot grow.
        assert!(res.k > 0.0);
    }

    #[test]
    fn psis_rejects_short_or_nonfinite_input() {
        assert!(psis_weights(&vec![0.0; 24]).is_err());
        let mut lr = vec![0.0; 30];
        lr[3] = f64::INFINITY;
        assert!(psis_weights(&lr).is_err());
        let bad = PsisOptions { tail_fraction: 1.5, ..Default::default() };
        assert!(psis_weights_with(&vec![0.0; 30], &bad).is_err());
    }

    #[test]
    fn identical_draws_reduce_loo_to_the_log_likelihood() {
        // A point-mass posterior: every draw identical, so elpd_i = loglik_i.
        let n = 12;
        let s = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let row: Vec<f64> = (0..n).map(|_| -rng.random_range(0.1..2.0)).collect();
        let mut ll = Array2::zeros((s, n));
        for si in 0..s {
            for i in 0..n {
                ll[[si, i]] = row[i];
            }
        }
        let res = loo_ic(ll.view()).unwrap();
        let total: f64 = row.iter().sum();
        for i in 0..n {
            assert!((res.elpd_pointwise[i] - row[i]).abs() < 1e-10);
        }
        assert!((res.elpd_loo - total).abs() < 1e-9);
        assert_eq!(res.loo_ic, -2.0 * res.elpd_loo);
        assert!(res.warn_small_s);
        assert_eq!(res.n_bad_k, 0);
    }

    #[test]
    fn loo_rejects_nonfinite_log_likelihoods() {
        let mut ll = Array2::zeros((30, 4));
        ll[[10, 2]] = f64::NEG_INFINITY;
        let err = loo_ic(ll.view()).unwrap_err();
        assert!(err.to_string().contains("loglik[10,2]"), "{err}");
    }

    /// Build a small binary-covariate cohort for logistic-model LOO tests.
    fn small_logistic_dataset(
        n: usize,
        prevalences: &[f64],
        coefs: &[f64],
        intercept: f64,
        seed: u64,
    ) -> AnalysisDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = prevalences.len();
        let mut claims = Array2::zeros((n, p));
        let mut treatment = Vec::with_capacity(n);
        for i in 0..n {
            let mut eta = intercept;
            for j in 0..p {
                if rng.random_range(0.0..1.0) < prevalences[j] {
                    claims[[i, j]] = 1.0;
                    eta += coefs[j];
                }
            }
            let pi = crate::util::sigmoid(eta);
            treatment.push(u8::from(rng.random_range(0.0..1.0) < pi));
        }
        AnalysisDataset {
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            treatment,
            outcomes: vec![],
            baseline_names: vec![],
            baseline: Array2::zeros((n, 0)),
            claims_names: (0..p).map(|j| format!("4{j:02}0")).collect(),
            claims,
            claims_kind: ClaimsKind::Codes,
        }
    }

    /// Exact log marginal likelihood of the 2-parameter logistic model
    /// (intercept + one binary covariate, N(0,10) and t5(0,2.5) priors) by
    /// 2-d Simpson quadrature, over an index subset of subjects.
    fn log_marginal_2d(x: &[f64], t: &[u8], keep: &[usize]) -> f64 {
        let lo = -9.0;
        let hi = 9.0;
        let steps = 180; // must be even for Simpson weights
        let h = (hi - lo) / steps as f64;
        let logpost = |b0: f64, b1: f64| -> f64 {
            // Hand-rolled priors so this oracle does not lean on the crate.
            let lp_b0 = -0.5 * (b0 / 10.0) * (b0 / 10.0)
                - 0.5 * (2.0 * std::f64::consts::PI).ln()
                - (10.0f64).ln();
            let df = 5.0;
            let s = 2.5;
            let z = b1 / s;
            // ln Γ(3) − ln Γ(2.5) − ½ln(5π) − ln 2.5 for the t5 constant.
            let t5_const = (2.0f64).ln() - 0.9227843350984671
                - 0.5 * (df * std::f64::consts::PI).ln()
                - s.ln();
            let lp_b1 = t5_const - 0.5 * (df + 1.0) * (1.0 + z * z / df).ln();
            let mut ll = 0.0;
            for &i in keep {
                let eta = b0 + b1 * x[i];
                ll += if t[i] == 1 {
                    -crate::util::softplus(-eta)
                } else {
                    -crate::util::softplus(eta)
                };
            }
            lp_b0 + lp_b1 + ll
        };
        let simpson_w = |k: usize| -> f64 {
            if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let mut terms = Vec::with_capacity((steps + 1) * (steps + 1));
        for a in 0..=steps {
            for b in 0..=steps {
                let w = simpson_w(a) * simpson_w(b);
                terms.push(w.ln() + logpost(lo + a as f64 * h, lo + b as f64 * h));
            }
        }
        logsumexp(&terms) + 2.0 * (h / 3.0).ln()
    }

    #[test]
    fn psis_loo_matches_exact_loo_by_quadrature() {
        // Exact LOO for subject i is log[Z_full / Z_without_i] where Z is the
        // marginal likelihood; both integrals are 2-d and evaluated by
        // Simpson quadrature, giving a deterministic oracle with no
        // importance sampling in it.
        let n = 32;
        let ds = small_logistic_dataset(n, &[0.45], &[1.1], 0.2, 61);
        let x: Vec<f64> = (0..n).map(|i| ds.claims[[i, 0]]).collect();
        let t = ds.treatment.clone();

        let all: Vec<usize> = (0..n).collect();
        let log_z_full = log_marginal_2d(&x, &t, &all);
        let exact: Vec<f64> = (0..n)
            .map(|i| {
                let keep: Vec<usize> = (0..n).filter(|j| *j != i).collect();
                log_z_full - log_marginal_2d(&x, &t, &keep)
            })
            .collect();

        let model = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
        let cfg = SamplerConfig { chains: 4, warmup: 500, samples: 500, seed: 6, ..Default::default() };
        let draws = run_chains(&model, &cfg).unwrap();
        let ll = model.log_lik_matrix(draws.flat().view()).unwrap();
        let res = loo_ic(ll.view()).unwrap();

        let exact_total: f64 = exact.iter().sum();
        assert!(
            (res.elpd_loo - exact_total).abs() < 0.5,
            "PSIS-LOO {} vs exact {}",
            res.elpd_loo,
            exact_total
        );
        // Pointwise contributions track the oracle as well.
        for i in 0..n {
            assert!(
                (res.elpd_pointwise[i] - exact[i]).abs() < 0.25,
                "subject {i}: {} vs {}",
                res.elpd_pointwise[i],
                exact[i]
            );
        }
    }

    #[test]
    fn noise_covariate_does_not_improve_loo_beyond_chance() {
        // Paired sign test over replicates: adding a pure-noise code to a
        // well-specified model should not lower LOO-IC more often than
        // coin-flipping would explain.
        let mut better = 0;
        let reps = 20;
        for rep in 0..reps {
            let n = 150;
            let ds_noise = small_logistic_dataset(n, &[0.4, 0.3], &[1.2, 0.0], -0.2, 100 + rep);
            // The well-specified model: same subjects, first code only.
            let mut claims = Array2::zeros((n, 1));
            for i in 0..n {
                claims[[i, 0]] = ds_noise.claims[[i, 0]];
            }
            let ds_clean = AnalysisDataset {
                claims,
                claims_names: vec![ds_noise.claims_names[0].clone()],
                ..ds_noise.clone()
            };
            let cfg = SamplerConfig {
                chains: 2,
                warmup: 250,
                samples: 250,
                seed: 1000 + rep,
                ..Default::default()
            };
            let mut ic = [0.0; 2];
            for (slot, ds) in [&ds_clean, &ds_noise].into_iter().enumerate() {
                let model = Model::new(PriorFamily::T5FourDigit, ds, None).unwrap();
                let draws = run_chains(&model, &cfg).unwrap();
                let ll = model.log_lik_matrix(draws.flat().view()).unwrap();
                ic[slot] = loo_ic(ll.view()).unwrap().loo_ic;
            }
            if ic[1] < ic[0] {
                better += 1;
            }
        }
        // One-sided sign test at ~2%: 15+ of 20 would be evidence the noise
        // covariate genuinely helps, which would mean a LOO defect.
        assert!(better <= 14, "noise model beat the clean model {better}/{reps} times");
    }
}
