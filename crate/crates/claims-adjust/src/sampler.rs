//! Hamiltonian Monte Carlo with dual-averaging step-size adaptation and a
//! diagonal mass matrix, plus the convergence diagnostics (split R-hat,
//! effective sample size) used to gate every fit.
//!
//! The sampler is deliberately plain HMC with a jittered number of leapfrog
//! steps (L ~ Uniform{1..L_max}, L_max ≈ 1/ε) rather than a dynamic
//! trajectory builder: the propensity posteriors targeted here are
//! log-concave-ish and well conditioned after mass adaptation, and the
//! jitter protects against resonant trajectory lengths.
//!
//! Warmup runs three windows (15% / 60% / 25% of warmup iterations):
//! step-size adaptation only, step size + mass estimation (variances taken
//! from the window's second half), then step-size-only again with the new
//! metric; the final step size is the dual-averaging iterate average.
//! Every chain draws from its own deterministic RNG stream, so results are
//! identical whether chains run in parallel or sequentially.

use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::util::sample_variance;

/// Energy-error threshold above which a trajectory counts as divergent.
pub const DIVERGENCE_ENERGY: f64 = 1000.0;

/// A differentiable unnormalized log density the sampler can explore.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log density (up to a constant) and its gradient, written into `grad`.
    /// May return `-inf` off the support; the sampler treats that as a
    /// rejected/divergent state rather than an error.
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Names for draw files and diagnostics; defaults to `p0..pN`.
    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("p{i}")).collect()
    }
}

impl Target for Model {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        Model::logp_grad(self, position, grad)
    }

    fn param_names(&self) -> Vec<String> {
        self.layout().names.clone()
    }
}

/// Sampler run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    /// Dual-averaging target acceptance probability.
    pub target_accept: f64,
    /// Hard cap on leapfrog steps per trajectory.
    pub max_leapfrog: usize,
    /// Initial positions are drawn uniformly from ±this.
    pub init_jitter: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_leapfrog: 1024,
            init_jitter: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 chains for split diagnostics, got {}",
                self.chains
            )));
        }
        if self.warmup < 1 || self.samples < 1 {
            return Err(Error::Validation("warmup and samples must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Validation(format!(
                "target_accept must lie in (0,1), got {}",
                self.target_accept
            )));
        }
        if self.max_leapfrog == 0 {
            return Err(Error::Validation("max_leapfrog must be positive".into()));
        }
        if !(self.init_jitter > 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::Validation("init_jitter must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Per-chain adaptation outcome and quality counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStats {
    pub divergences: usize,
    /// Frozen post-warmup step size.
    pub step_size: f64,
    /// Mean post-warmup acceptance probability.
    pub accept_rate: f64,
    /// Adapted inverse-mass diagonal (posterior variance estimates).
    pub inv_mass: Vec<f64>,
}

/// Posterior draws from all chains, `[chain, iteration, parameter]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub draws: Array3<f64>,
    /// Adaptation stats per chain; empty when draws were loaded from disk.
    pub stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.draws.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.draws.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.draws.shape()[2]
    }

    pub fn total_divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }

    /// Fraction of post-warmup transitions that diverged (0 when stats are
    /// unavailable).
    pub fn divergence_fraction(&self) -> f64 {
        if self.stats.is_empty() {
            return 0.0;
        }
        self.total_divergences() as f64 / (self.n_chains() * self.n_samples()) as f64
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All chains stacked into one (chains × samples) × dim matrix,
    /// chain-major order.
    pub fn flat(&self) -> Array2<f64> {
        let (c, s, p) = (self.n_chains(), self.n_samples(), self.dim());
        let mut out = Array2::zeros((c * s, p));
        for ci in 0..c {
            for si in 0..s {
                for pi in 0..p {
                    out[[ci * s + si, pi]] = self.draws[[ci, si, pi]];
                }
            }
        }
        out
    }

    /// One parameter's draws across all chains, chain-major.
    pub fn column_flat(&self, param: usize) -> Vec<f64> {
        let (c, s) = (self.n_chains(), self.n_samples());
        let mut out = Vec::with_capacity(c * s);
        for ci in 0..c {
            for si in 0..s {
                out.push(self.draws[[ci, si, param]]);
            }
        }
        out
    }

    /// Write draws as CSV: `chain,iter,<param names...>`, full precision.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for ci in 0..self.n_chains() {
            for si in 0..self.n_samples() {
                let mut row = vec![ci.to_string(), si.to_string()];
                for pi in 0..self.dim() {
                    row.push(format!("{}", self.draws[[ci, si, pi]]));
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a draws CSV written by [`PosteriorDraws::write_csv`]. Chain
    /// sample counts must agree; `stats` comes back empty.
    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<PosteriorDraws> {
        let path_str = path.as_ref().display().to_string();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
        let headers = rdr.headers()?.clone();
        let mut iter = headers.iter();
        if iter.next() != Some("chain") || iter.next() != Some("iter") {
            return Err(Error::Validation(format!(
                "{path_str}: draws CSV must start with chain,iter columns"
            )));
        }
        let names: Vec<String> = iter.map(|s| s.to_string()).collect();
        if names.is_empty() {
            return Err(Error::Validation(format!("{path_str}: no parameter columns")));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let record = i + 2;
            let rec = rec?;
            let parse_field = |idx: usize, what: &str| -> Result<f64> {
                rec.get(idx)
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path_str.clone(),
                        record,
                        msg: format!("bad {what} field"),
                    })
            };
            let chain = parse_field(0, "chain")? as usize;
            let mut vals = Vec::with_capacity(names.len());
            for k in 0..names.len() {
                vals.push(parse_field(k + 2, &names[k])?);
            }
            rows.push((chain, vals));
        }
        if rows.is_empty() {
            return Err(Error::Validation(format!("{path_str}: no draws")));
        }
        let n_chains = rows.iter().map(|(c, _)| *c).max().unwrap() + 1;
        let mut per_chain: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_chains];
        for (c, vals) in rows {
            per_chain[c].push(vals);
        }
        let n_samples = per_chain[0].len();
        if per_chain.iter().any(|c| c.len() != n_samples) || n_samples == 0 {
            return Err(Error::Validation(format!(
                "{path_str}: chains have unequal sample counts"
            )));
        }
        let mut draws = Array3::zeros((n_chains, n_samples, names.len()));
        for (ci, chain) in per_chain.iter().enumerate() {
            for (si, vals) in chain.iter().enumerate() {
                for (pi, v) in vals.iter().enumerate() {
                    draws[[ci, si, pi]] = *v;
                }
            }
        }
        Ok(PosteriorDraws { names, draws, stats: Vec::new() })
    }
}

// ---------------------------------------------------------------------------
// Dual averaging (Hoffman & Gelman constants).

#[derive(Debug, Clone)]
struct DualAverage {
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    hbar: f64,
    count: u64,
    target: f64,
}

impl DualAverage {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(initial_step: f64, target: f64) -> Self {
        DualAverage {
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            hbar: 0.0,
            count: 0,
            target,
        }
    }

    fn advance(&mut self, accept_prob: f64) {
        self.count += 1;
        let count = self.count as f64;
        let w = 1.0 / (count + Self::T0);
        self.hbar = (1.0 - w) * self.hbar + w * (self.target - accept_prob);
        self.log_step = self.mu - self.hbar * count.sqrt() / Self::GAMMA;
        let avg_w = count.powf(-Self::KAPPA);
        self.log_step_avg = avg_w * self.log_step + (1.0 - avg_w) * self.log_step_avg;
    }

    fn current(&self) -> f64 {
        self.log_step.exp().clamp(1e-10, 1e3)
    }

    fn adapted(&self) -> f64 {
        self.log_step_avg.exp().clamp(1e-10, 1e3)
    }
}

// ---------------------------------------------------------------------------
// Single chain

struct Chain<'a, T: Target> {
    target: &'a T,
    dim: usize,
    inv_mass: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a, T: Target> Chain<'a, T> {
    fn kinetic(&self, momentum: &[f64]) -> f64 {
        momentum
            .iter()
            .zip(&self.inv_mass)
            .map(|(p, im)| 0.5 * p * p * im)
            .sum()
    }

    fn sample_momentum(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z / self.inv_mass[k].sqrt()
            })
            .collect()
    }

    /// Stan-style initial step-size heuristic: double or halve until the
    /// one-step acceptance probability crosses 1/2.
    fn find_initial_step(&mut self, position: &[f64], lp0: f64, grad0: &[f64]) -> f64 {
        let mut eps = 1.0;
        let momentum = self.sample_momentum();
        let h0 = -lp0 + self.kinetic(&momentum);
        let energy_after = |eps: f64, chain: &mut Self| -> f64 {
            let mut q = position.to_vec();
            let mut p = momentum.clone();
            let mut g = grad0.to_vec();
            for k in 0..chain.dim {
                p[k] += 0.5 * eps * g[k];
            }
            for k in 0..chain.dim {
                q[k] += eps * chain.inv_mass[k] * p[k];
            }
            let lp = chain.target.logp_grad(&q, &mut g);
            for k in 0..chain.dim {
                p[k] += 0.5 * eps * g[k];
            }
            -lp + chain.kinetic(&p)
        };
        let h1 = energy_after(eps, self);
        let mut log_ratio = h0 - h1;
        if !log_ratio.is_finite() {
            log_ratio = f64::NEG_INFINITY;
        }
        let going_up = log_ratio > (0.5f64).ln();
        for _ in 0..100 {
            let crossed = if going_up {
                log_ratio <= (0.5f64).ln()
            } else {
                log_ratio > (0.5f64).ln()
            };
            if crossed {
                break;
            }
            eps *= if going_up { 2.0 } else { 0.5 };
            if !(1e-10..=1e3).contains(&eps) {
                break;
            }
            log_ratio = h0 - energy_after(eps, self);
            if !log_ratio.is_finite() {
                log_ratio = f64::NEG_INFINITY;
            }
        }
        eps.clamp(1e-10, 1e3)
    }

    /// One HMC transition. Returns (accept_prob, divergent) and updates
    /// `position`, `lp`, `grad` in place on acceptance.
    fn transition(
        &mut self,
        position: &mut Vec<f64>,
        lp: &mut f64,
        grad: &mut Vec<f64>,
        eps: f64,
        max_leapfrog: usize,
    ) -> (f64, bool) {
        let l_max = ((1.0 / eps).ceil() as usize).clamp(1, max_leapfrog);
        let l = self.rng.random_range(1..=l_max);

        let momentum0 = self.sample_momentum();
        let h0 = -*lp + self.kinetic(&momentum0);

        let mut q = position.clone();
        let mut p = momentum0;
        let mut g = grad.clone();
        let mut lp_new = *lp;
        let mut ok = true;
        for k in 0..self.dim {
            p[k] += 0.5 * eps * g[k];
        }
        for step in 0..l {
            for k in 0..self.dim {
                q[k] += eps * self.inv_mass[k] * p[k];
            }
            lp_new = self.target.logp_grad(&q, &mut g);
            if !lp_new.is_finite() || g.iter().any(|v| !v.is_finite()) {
                ok = false;
                break;
            }
            let scale = if step + 1 == l { 0.5 } else { 1.0 };
            for k in 0..self.dim {
                p[k] += scale * eps * g[k];
            }
        }

        let delta_h = if ok {
            (-lp_new + self.kinetic(&p)) - h0
        } else {
            f64::INFINITY
        };
        let divergent = !delta_h.is_finite() || delta_h > DIVERGENCE_ENERGY;
        let accept_prob = if divergent { 0.0 } else { (-delta_h).exp().min(1.0) };

        let u: f64 = self.rng.random();
        if !divergent && u < accept_prob {
            *position = q;
            *lp = lp_new;
            *grad = g;
        }
        (accept_prob, divergent)
    }
}

/// Regularized posterior-variance estimate (shrunk toward a small constant,
/// as in Stan's windowed adaptation).
fn update_inv_mass(inv_mass: &mut [f64], samples: &[Vec<f64>]) {
    let m = samples.len() as f64;
    for (k, im) in inv_mass.iter_mut().enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        let var = sample_variance(&col);
        *im = (m / (m + 5.0)) * var + 1e-3 * (5.0 / (m + 5.0)).max(1e-10);
        if *im <= 0.0 || !im.is_finite() {
            *im = 1e-3;
        }
    }
}

fn run_one_chain<T: Target>(
    target: &T,
    cfg: &SamplerConfig,
    chain_idx: usize,
) -> Result<(Array2<f64>, ChainStats)> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain_idx as u64);

    let mut chain = Chain { target, dim, inv_mass: vec![1.0; dim], rng };

    // Jittered initialization with a finite-gradient self-check.
    let mut position = vec![0.0; dim];
    let mut lp = f64::NEG_INFINITY;
    let mut grad = vec![0.0; dim];
    let mut initialized = false;
    for _attempt in 0..100 {
        for v in position.iter_mut() {
            *v = chain.rng.random_range(-cfg.init_jitter..cfg.init_jitter);
        }
        lp = target.logp_grad(&position, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            initialized = true;
            break;
        }
    }
    if !initialized {
        return Err(Error::Init(format!(
            "chain {chain_idx}: no finite log density in 100 jittered starts \
             (last lp = {lp}); check the model or reduce init_jitter"
        )));
    }

    let mut eps = chain.find_initial_step(&position, lp, &grad);
    let mut da = DualAverage::new(eps, cfg.target_accept);

    // Warmup windows: [0, w1) step only, [w1, w2) step + mass, [w2, warmup)
    // step only under the final metric. The mass window updates twice: a
    // rough estimate from its first half unsticks badly scaled coordinates,
    // and the final metric comes from the (now equilibrated) second half.
    // Mass adaptation is pointless for very short warmups.
    let use_mass = cfg.warmup >= 20;
    let (w1, w_mid, w2) = if use_mass {
        let w1 = ((cfg.warmup as f64 * 0.15).round() as usize).clamp(1, cfg.warmup - 2);
        let w2 = ((cfg.warmup as f64 * 0.75).round() as usize).clamp(w1 + 1, cfg.warmup);
        (w1, w1 + (w2 - w1) / 2, w2)
    } else {
        (usize::MAX, usize::MAX, usize::MAX)
    };
    let mut mass_samples: Vec<Vec<f64>> = Vec::new();

    let mut draws = Array2::zeros((cfg.samples, dim));
    let mut divergences = 0usize;
    let mut accept_sum = 0.0;

    for iter in 0..cfg.warmup + cfg.samples {
        let warming = iter < cfg.warmup;
        let (accept_prob, divergent) =
            chain.transition(&mut position, &mut lp, &mut grad, eps, cfg.max_leapfrog);

        if warming {
            da.advance(accept_prob);
            eps = da.current();
            if use_mass {
                if iter >= w1 && iter < w2 {
                    mass_samples.push(position.clone());
                }
                if (iter + 1 == w_mid || iter + 1 == w2) && mass_samples.len() >= 10 {
                    update_inv_mass(&mut chain.inv_mass, &mass_samples);
                    mass_samples.clear();
                    // Re-baseline the step size for the new metric.
                    eps = chain.find_initial_step(&position, lp, &grad);
                    da = DualAverage::new(eps, cfg.target_accept);
                }
            }
            if iter + 1 == cfg.warmup {
                eps = da.adapted();
            }
        } else {
            for (k, v) in position.iter().enumerate() {
                draws[[iter - cfg.warmup, k]] = *v;
            }
            if divergent {
                divergences += 1;
            }
            accept_sum += accept_prob;
        }
    }

    Ok((
        draws,
        ChainStats {
            divergences,
            step_size: eps,
            accept_rate: accept_sum / cfg.samples as f64,
            inv_mass: chain.inv_mass,
        },
    ))
}

/// Run all configured chains (in parallel when a rayon pool is available;
/// per-chain RNG streams make the result identical either way).
pub fn run_chains<T: Target>(target: &T, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    if target.dim() == 0 {
        return Err(Error::Validation("target has no parameters".into()));
    }
    let results: Vec<Result<(Array2<f64>, ChainStats)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_one_chain(target, cfg, c))
        .collect();

    let mut draws = Array3::zeros((cfg.chains, cfg.samples, target.dim()));
    let mut stats = Vec::with_capacity(cfg.chains);
    for (c, res) in results.into_iter().enumerate() {
        let (chain_draws, chain_stats) = res?;
        for si in 0..cfg.samples {
            for pi in 0..target.dim() {
                draws[[c, si, pi]] = chain_draws[[si, pi]];
            }
        }
        stats.push(chain_stats);
    }
    Ok(PosteriorDraws { names: target.param_names(), draws, stats })
}

/// Fit a propensity model: thin convenience wrapper so call sites read
/// naturally.
pub fn fit_model(model: &Model, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    run_chains(model, cfg)
}

// ---------------------------------------------------------------------------
// Convergence diagnostics

/// Split each chain in half (dropping a middle element when odd) and return
/// the per-parameter potential scale reduction factor.
///
/// Degenerate cases follow the reporting convention: if the within-chain
/// variance is zero the statistic is `+inf` (flagged upstream), never NaN.
pub fn split_rhat(draws: ArrayView3<f64>) -> Vec<f64> {
    per_param_split(draws, |seqs| {
        let (w, var_plus) = pooled_variances(seqs);
        if w <= 0.0 {
            return f64::INFINITY;
        }
        (var_plus / w).sqrt()
    })
}

/// Stan-style effective sample size on split chains: autocovariance by
/// direct summation, Geyer paired sums truncated at the first negative
/// pair with the monotone-decreasing envelope enforced.
///
/// A constant parameter has no information; its ESS is reported as 0.
pub fn effective_sample_size(draws: ArrayView3<f64>) -> Vec<f64> {
    per_param_split(draws, |seqs| {
        let m = seqs.len();
        let n = seqs[0].len();
        let (w, var_plus) = pooled_variances(seqs);
        if w <= 0.0 || var_plus <= 0.0 {
            return 0.0;
        }
        // Mean (across split chains) autocovariance at each lag, biased 1/n
        // normalization, by direct summation.
        let max_lag = n - 1;
        let mut mean_acov = vec![0.0; max_lag + 1];
        for seq in seqs {
            let mean = seq.iter().sum::<f64>() / n as f64;
            for (t, acc) in mean_acov.iter_mut().enumerate() {
                let mut c = 0.0;
                for i in 0..n - t {
                    c += (seq[i] - mean) * (seq[i + t] - mean);
                }
                *acc += c / n as f64 / m as f64;
            }
        }
        let rho_at = |t: usize| 1.0 - (w - mean_acov[t]) / var_plus;

        // Geyer pairs (ρ_{2k}, ρ_{2k+1}) kept while their sum is positive.
        let mut rho = vec![0.0; n + 2];
        rho[0] = 1.0;
        rho[1] = rho_at(1);
        let mut rho_even = rho[0];
        let mut rho_odd = rho[1];
        let mut s: usize = 1;
        while s + 4 < n && rho_even + rho_odd > 0.0 {
            rho_even = rho_at(s + 1);
            rho_odd = rho_at(s + 2);
            if rho_even + rho_odd >= 0.0 {
                rho[s + 1] = rho_even;
                rho[s + 2] = rho_odd;
            }
            s += 2;
        }
        let max_s = s;
        // Improved estimate keeps a trailing positive even term once.
        let rho_extra = if rho_even > 0.0 { rho_even } else { 0.0 };

        // Enforce the monotone-decreasing envelope on pair sums.
        let mut t = 1;
        while t + 3 <= max_s {
            if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
                let v = (rho[t - 1] + rho[t]) / 2.0;
                rho[t + 1] = v;
                rho[t + 2] = v;
            }
            t += 2;
        }

        let total = (m * n) as f64;
        let head: f64 = rho[..max_s].iter().sum();
        let tau = -1.0 + 2.0 * head + rho_extra;
        if tau <= 0.0 {
            return total; // pathological antithetic estimate; cap at nominal
        }
        (total / tau).min(total * total.log10()).max(0.0)
    })
}

/// Convergence summary for a set of draws, with named flags for parameters
/// whose diagnostics are degenerate (infinite R-hat or zero ESS).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub flagged: Vec<String>,
}

pub fn convergence_report(draws: &PosteriorDraws) -> ConvergenceReport {
    let rhat = split_rhat(draws.draws.view());
    let ess = effective_sample_size(draws.draws.view());
    let mut flagged = Vec::new();
    for (i, name) in draws.names.iter().enumerate() {
        if !rhat[i].is_finite() || ess[i] <= 0.0 {
            flagged.push(name.clone());
        }
    }
    let max_rhat = rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_ess = ess.iter().copied().fold(f64::INFINITY, f64::min);
    ConvergenceReport { rhat, ess, max_rhat, min_ess, flagged }
}

/// Split chains in half and hand per-parameter split sequences to `f`.
fn per_param_split<F: Fn(&[Vec<f64>]) -> f64>(draws: ArrayView3<f64>, f: F) -> Vec<f64> {
    let (c, s, p) = (draws.shape()[0], draws.shape()[1], draws.shape()[2]);
    let half = s / 2;
    assert!(c >= 1 && half >= 2, "diagnostics need >= 4 draws per chain");
    let mut out = Vec::with_capacity(p);
    for pi in 0..p {
        let mut seqs: Vec<Vec<f64>> = Vec::with_capacity(2 * c);
        for ci in 0..c {
            let first: Vec<f64> = (0..half).map(|si| draws[[ci, si, pi]]).collect();
            let second: Vec<f64> = (s - half..s).map(|si| draws[[ci, si, pi]]).collect();
            seqs.push(first);
            seqs.push(second);
        }
        out.push(f(&seqs));
    }
    out
}

/// (W, var⁺): mean within-sequence variance and the overestimating pooled
/// variance (n-1)/n·W + B/n used by both diagnostics.
fn pooled_variances(seqs: &[Vec<f64>]) -> (f64, f64) {
    let m = seqs.len() as f64;
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = if m > 1.0 {
        n * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let w = seqs.iter().map(|s| sample_variance(s)).sum::<f64>() / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (w, var_plus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AnalysisDataset, ClaimsKind};
    use crate::model::PriorFamily;
    use ndarray::Array2 as NdArray2;
    use statrs::distribution::{Beta as BetaDist, ContinuousCDF};

    /// Independent Gaussian target with per-coordinate means and sds.
    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl Target for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for k in 0..self.dim() {
                let z = (position[k] - self.mean[k]) / self.sd[k];
                lp += -0.5 * z * z;
                grad[k] = -z / self.sd[k];
            }
            lp
        }
    }

    fn small_cfg(seed: u64) -> SamplerConfig {
        SamplerConfig { chains: 4, warmup: 500, samples: 500, seed, ..Default::default() }
    }

    #[test]
    fn gaussian_moments_are_recovered_across_scales() {
        let target = Gaussian {
            mean: vec![-3.0, 0.0, 2.0, 7.0],
            sd: vec![0.5, 1.0, 3.0, 9.0],
        };
        let pd = run_chains(&target, &small_cfg(1)).unwrap();
        let report = convergence_report(&pd);
        assert!(report.max_rhat < 1.05, "rhat {}", report.max_rhat);
        assert!(report.min_ess > 150.0, "ess {}", report.min_ess);
        assert!(report.flagged.is_empty());

        for k in 0..target.dim() {
            let col = pd.column_flat(k);
            let m = crate::util::mean(&col);
            let sd = sample_variance(&col).sqrt();
            assert!(
                (m - target.mean[k]).abs() < 0.2 * target.sd[k],
                "param {k}: mean {m} vs {}",
                target.mean[k]
            );
            assert!(
                (sd / target.sd[k] - 1.0).abs() < 0.15,
                "param {k}: sd {sd} vs {}",
                target.sd[k]
            );
        }
    }

    #[test]
    fn post_warmup_acceptance_tracks_the_dual_averaging_target() {
        let target = Gaussian { mean: vec![0.0; 3], sd: vec![1.0; 3] };
        let pd = run_chains(&target, &small_cfg(7)).unwrap();
        for st in &pd.stats {
            assert!(
                (st.accept_rate - 0.8).abs() < 0.1,
                "acceptance {} strays from target 0.8",
                st.accept_rate
            );
            assert!(st.divergences == 0, "clean Gaussian should not diverge");
        }
    }

    #[test]
    fn adapted_mass_approximates_posterior_variances() {
        let target = Gaussian { mean: vec![0.0, 0.0], sd: vec![0.3, 6.0] };
        let cfg = SamplerConfig { warmup: 1000, samples: 200, ..small_cfg(3) };
        let pd = run_chains(&target, &cfg).unwrap();
        for st in &pd.stats {
            // inv_mass estimates variances: 0.09 and 36, within a factor ~2.
            assert!(
                st.inv_mass[0] > 0.03 && st.inv_mass[0] < 0.27,
                "inv_mass[0] = {}",
                st.inv_mass[0]
            );
            assert!(
                st.inv_mass[1] > 12.0 && st.inv_mass[1] < 100.0,
                "inv_mass[1] = {}",
                st.inv_mass[1]
            );
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise_identical_draws() {
        let target = Gaussian { mean: vec![1.0, -1.0], sd: vec![1.0, 2.0] };
        let a = run_chains(&target, &small_cfg(11)).unwrap();
        let b = run_chains(&target, &small_cfg(11)).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.stats, b.stats);
        let c = run_chains(&target, &small_cfg(12)).unwrap();
        assert_ne!(a.draws, c.draws, "different seeds must differ");
    }

    #[test]
    fn parallel_and_sequential_execution_agree() {
        // Chains own their RNG streams, so the thread schedule is
        // irrelevant; check by running under differently sized pools.
        let target = Gaussian { mean: vec![0.5, -0.5, 0.0], sd: vec![1.0, 1.0, 2.0] };
        let cfg = SamplerConfig { chains: 3, warmup: 200, samples: 200, ..small_cfg(5) };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let seq = pool1.install(|| run_chains(&target, &cfg)).unwrap();
        let par = pool4.install(|| run_chains(&target, &cfg)).unwrap();
        assert_eq!(seq.draws, par.draws);
    }

    #[test]
    fn hopeless_target_reports_initialization_failure() {
        struct Wall;
        impl Target for Wall {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, _p: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 0.0;
                f64::NEG_INFINITY
            }
        }
        let err = run_chains(&Wall, &small_cfg(0)).unwrap_err();
        assert!(matches!(err, Error::Init(_)), "got: {err:?}");
    }

    #[test]
    fn conjugate_beta_posterior_via_intercept_model() {
        // 70 treated of 100 with a flat-ish N(0,10) intercept prior: flat on
        // the logit scale means a 1/(π(1−π)) Jacobian tilt on the probability
        // scale, so the posterior of logit⁻¹(b0) is Beta(70, 30) (Haldane-
        // prior counts), not Beta(71, 31). Check mean/sd/median against it.
        let n = 100;
        let n_treated = 70;
        let ds = AnalysisDataset {
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            treatment: (0..n).map(|i| u8::from(i < n_treated)).collect(),
            outcomes: vec![],
            baseline_names: vec![],
            baseline: NdArray2::zeros((n, 0)),
            claims_names: vec![],
            claims: NdArray2::zeros((n, 0)),
            claims_kind: ClaimsKind::Codes,
        };
        let model = crate::model::Model::new(PriorFamily::Unadjusted, &ds, None).unwrap();
        let cfg = SamplerConfig { chains: 4, warmup: 600, samples: 1200, seed: 2, ..Default::default() };
        let pd = run_chains(&model, &cfg).unwrap();
        let report = convergence_report(&pd);
        assert!(report.max_rhat < 1.02, "rhat {}", report.max_rhat);

        let pis: Vec<f64> = pd.column_flat(0).iter().map(|&b| crate::util::sigmoid(b)).collect();
        let mean = crate::util::mean(&pis);
        let sd = sample_variance(&pis).sqrt();
        let beta = BetaDist::new(70.0, 30.0).unwrap();
        let true_mean = 70.0 / 100.0;
        let true_sd = (70.0 * 30.0 / (100.0f64 * 100.0 * 101.0)).sqrt();
        assert!((mean - true_mean).abs() < 0.01, "mean {mean} vs {true_mean}");
        assert!((sd / true_sd - 1.0).abs() < 0.15, "sd {sd} vs {true_sd}");
        // Posterior mass below the conjugate median should be about half.
        let median = beta.inverse_cdf(0.5);
        let below = pis.iter().filter(|&&p| p < median).count() as f64 / pis.len() as f64;
        assert!((below - 0.5).abs() < 0.03, "mass below conjugate median: {below}");
    }

    #[test]
    fn rhat_separates_mixed_from_disjoint_chains() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut good = Array3::zeros((4, 500, 1));
        let mut bad = Array3::zeros((4, 500, 1));
        for c in 0..4 {
            for s in 0..500 {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                good[[c, s, 0]] = z;
                bad[[c, s, 0]] = z + if c == 0 { 5.0 } else { 0.0 };
            }
        }
        assert!(split_rhat(good.view())[0] < 1.01);
        assert!(split_rhat(bad.view())[0] > 1.5);
    }

    #[test]
    fn ess_is_calibrated_on_iid_and_ar1_sequences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (c, s) = (4, 2000);

        // iid: ESS should be within 10% of the nominal draw count.
        let mut iid = Array3::zeros((c, s, 1));
        for ci in 0..c {
            for si in 0..s {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                iid[[ci, si, 0]] = z;
            }
        }
        let ess = effective_sample_size(iid.view())[0];
        let nominal = (c * s) as f64;
        assert!(
            (ess / nominal - 1.0).abs() < 0.10,
            "iid ESS {ess} vs nominal {nominal}"
        );

        // AR(1) with ρ = 0.9: ESS ≈ N(1-ρ)/(1+ρ) = N/19.
        let rho: f64 = 0.9;
        let innov_sd = (1.0 - rho * rho).sqrt();
        let mut ar = Array3::zeros((c, s, 1));
        for ci in 0..c {
            let mut x = 0.0;
            for si in 0..s {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                x = rho * x + innov_sd * z;
                ar[[ci, si, 0]] = x;
            }
        }
        let ess = effective_sample_size(ar.view())[0];
        let expected = nominal * (1.0 - rho) / (1.0 + rho);
        assert!(
            ess > 0.6 * expected && ess < 1.5 * expected,
            "AR(1) ESS {ess} vs theoretical {expected}"
        );
        // And R-hat still looks converged.
        assert!(split_rhat(ar.view())[0] < 1.05);
    }

    #[test]
    fn constant_parameters_are_flagged_as_degenerate() {
        let mut draws = Array3::zeros((2, 100, 2));
        for c in 0..2 {
            for s in 0..100 {
                draws[[c, s, 0]] = 3.5; // constant everywhere
                draws[[c, s, 1]] = c as f64; // constant per chain, split between
            }
        }
        let rhat = split_rhat(draws.view());
        let ess = effective_sample_size(draws.view());
        assert!(rhat[0].is_infinite() && rhat[1].is_infinite());
        assert_eq!(ess[0], 0.0);
        assert_eq!(ess[1], 0.0);

        let pd = PosteriorDraws {
            names: vec!["a".into(), "b".into()],
            draws,
            stats: Vec::new(),
        };
        let report = convergence_report(&pd);
        assert_eq!(report.flagged, vec!["a".to_string(), "b".to_string()]);
        assert!(report.max_rhat.is_infinite());
    }

    #[test]
    fn draws_survive_a_csv_round_trip() {
        let target = Gaussian { mean: vec![0.0, 1.0], sd: vec![1.0, 0.5] };
        let cfg = SamplerConfig { chains: 2, warmup: 50, samples: 40, ..small_cfg(4) };
        let pd = run_chains(&target, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.csv");
        pd.write_csv(&path).unwrap();
        let rt = PosteriorDraws::read_csv(&path).unwrap();
        assert_eq!(rt.names, pd.names);
        assert_eq!(rt.draws, pd.draws, "full-precision round trip must be exact");
        assert!(rt.stats.is_empty());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SamplerConfig { chains: 1, ..ok.clone() }.validate().is_err());
        assert!(SamplerConfig { samples: 0, ..ok.clone() }.validate().is_err());
        assert!(SamplerConfig { target_accept: 1.0, ..ok.clone() }.validate().is_err());
        assert!(SamplerConfig { init_jitter: 0.0, ..ok }.validate().is_err());
    }
}
