//! The Bayesian propensity model: logit P(X=1) = β₀ + β_B·B + β_C·C.
//!
//! One [`Model`] couples a cohort to a prior family and exposes the joint
//! log posterior and its gradient over an unconstrained parameter vector —
//! exactly what the HMC sampler consumes. The families differ in how the
//! claims-block coefficients are treated:
//!
//! * `T5FourDigit` — independent t₅(0, 2.5) per observed code.
//! * `T5ThreeDigit` — codes collapsed to their 3-digit parent (a column per
//!   parent is the OR of its member codes), then t₅(0, 2.5).
//! * `Horseshoe` — non-centered global–local shrinkage: β_Cj = z_j·λ_j·τ
//!   with z_j ~ N(0,1), λ_j ~ half-t₃, τ ~ half-Cauchy; λ and τ are sampled
//!   on the log scale with the Jacobian folded into the posterior.
//! * `Hierarchical` — members of a multi-code parent shrink to a group mean,
//!   β_Cj ~ Laplace(μ_l, 0.5), μ_l ~ t₅(0, 2.5); singleton codes get the
//!   t₅(0, 2.5) directly.
//! * `ComorbidityIndicator` / `ComorbidityContinuous` — the claims block has
//!   already been reduced by [`crate::ingest::apply_comorbidity_index`];
//!   coefficients get t₅(0, 2.5).
//! * `Unadjusted` — intercept only (no covariates at all), which makes the
//!   downstream weighting estimator collapse to raw group proportions.
//!
//! Baseline covariates are standardized internally (mean 0, sd 1) so one
//! prior scale is meaningful across covariates; the intercept keeps a wide
//! N(0, 10) prior. Claims indicators are left on their natural 0/1 scale.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ingest::{AnalysisDataset, ClaimsKind, CodeHierarchy};
use crate::priors::{self, PriorSpec};
use crate::util::{sigmoid, softplus};

/// Lower clamp for predicted propensities: keeps inverse-probability
/// weights finite without visibly distorting any realistic fit.
pub const PROPENSITY_EPS: f64 = 1e-12;

/// Prior family / model structure selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorFamily {
    T5ThreeDigit,
    T5FourDigit,
    Horseshoe,
    Hierarchical,
    ComorbidityIndicator,
    ComorbidityContinuous,
    Unadjusted,
}

impl PriorFamily {
    /// Name used by the command-line interface and reports.
    pub fn cli_name(&self) -> &'static str {
        match self {
            PriorFamily::T5ThreeDigit => "t5-3digit",
            PriorFamily::T5FourDigit => "t5-4digit",
            PriorFamily::Horseshoe => "horseshoe",
            PriorFamily::Hierarchical => "hierarchical",
            PriorFamily::ComorbidityIndicator => "elix-ind",
            PriorFamily::ComorbidityContinuous => "elix-cont",
            PriorFamily::Unadjusted => "unadjusted",
        }
    }

    pub fn from_cli_name(name: &str) -> Result<Self> {
        Ok(match name {
            "t5-3digit" => PriorFamily::T5ThreeDigit,
            "t5-4digit" => PriorFamily::T5FourDigit,
            "horseshoe" => PriorFamily::Horseshoe,
            "hierarchical" => PriorFamily::Hierarchical,
            "elix-ind" => PriorFamily::ComorbidityIndicator,
            "elix-cont" => PriorFamily::ComorbidityContinuous,
            "unadjusted" => PriorFamily::Unadjusted,
            other => {
                return Err(Error::Validation(format!(
                    "unknown prior family {other:?} (expected one of t5-3digit, t5-4digit, \
                     horseshoe, hierarchical, elix-ind, elix-cont, unadjusted)"
                )))
            }
        })
    }

    pub fn all() -> [PriorFamily; 7] {
        [
            PriorFamily::T5ThreeDigit,
            PriorFamily::T5FourDigit,
            PriorFamily::Horseshoe,
            PriorFamily::Hierarchical,
            PriorFamily::ComorbidityIndicator,
            PriorFamily::ComorbidityContinuous,
            PriorFamily::Unadjusted,
        ]
    }
}

impl std::fmt::Display for PriorFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayoutKind {
    /// Parameters are exactly the regression coefficients.
    Plain,
    /// [coefs..., z block replaced] + log local scales + log global scale.
    Horseshoe,
    /// Coefficients followed by group means.
    Hierarchical,
}

/// Slot map for a model's unconstrained parameter vector.
///
/// Slot order is: intercept, baseline coefficients, claims block, then any
/// family-specific auxiliary parameters (log scales or group means).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    /// One name per slot, used for draw CSV headers and reports.
    pub names: Vec<String>,
    q: usize,
    /// Claims-block width in the *design* (collapsed width for t5-3digit).
    p: usize,
    /// Number of group means (hierarchical only).
    n_groups: usize,
    kind: LayoutKind,
}

impl ParameterLayout {
    /// Total number of sampled parameters.
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Width of the effective coefficient vector (intercept + baselines +
    /// claims block) that multiplies the design matrix.
    pub fn coef_dim(&self) -> usize {
        1 + self.q + self.p
    }

    pub fn intercept_slot(&self) -> usize {
        0
    }

    pub fn baseline_slots(&self) -> std::ops::Range<usize> {
        1..1 + self.q
    }

    /// Claims-block slots: raw coefficients for plain/hierarchical layouts,
    /// the standardized `z` variables for the horseshoe.
    pub fn claims_slots(&self) -> std::ops::Range<usize> {
        1 + self.q..1 + self.q + self.p
    }

    pub fn log_local_slots(&self) -> Option<std::ops::Range<usize>> {
        match self.kind {
            LayoutKind::Horseshoe => Some(1 + self.q + self.p..1 + self.q + 2 * self.p),
            _ => None,
        }
    }

    pub fn log_global_slot(&self) -> Option<usize> {
        match self.kind {
            LayoutKind::Horseshoe => Some(1 + self.q + 2 * self.p),
            _ => None,
        }
    }

    pub fn group_mean_slots(&self) -> Option<std::ops::Range<usize>> {
        match self.kind {
            LayoutKind::Hierarchical => {
                let base = 1 + self.q + self.p;
                Some(base..base + self.n_groups)
            }
            _ => None,
        }
    }
}

/// A fitted-form propensity model: data, design, layout, and priors.
#[derive(Debug, Clone)]
pub struct Model {
    family: PriorFamily,
    layout: ParameterLayout,
    /// Treatment indicator as f64 for arithmetic.
    x: Vec<f64>,
    /// n × coef_dim design: [1 | standardized B | claims block].
    design: Array2<f64>,
    b_mean: Vec<f64>,
    b_sd: Vec<f64>,
    /// Hierarchical bookkeeping: (claims-slot indices, group-mean slot).
    groups: Vec<(Vec<usize>, usize)>,
    /// Hierarchical: claims slots with a direct t₅ prior.
    singleton_slots: Vec<usize>,
    intercept_prior: PriorSpec,
    coef_prior: PriorSpec,
    laplace_scale: f64,
    horseshoe_local_df: f64,
    /// Count of claims-derived variables in the design (reported by fits).
    n_claims_vars: usize,
}

impl Model {
    /// Build a model for `family` over `ds`. `hierarchy` is required by the
    /// `T5ThreeDigit` and `Hierarchical` families and ignored otherwise.
    pub fn new(
        family: PriorFamily,
        ds: &AnalysisDataset,
        hierarchy: Option<&CodeHierarchy>,
    ) -> Result<Model> {
        ds.validate()?;
        let n = ds.n();
        let n_treated: usize = ds.treatment.iter().map(|&t| t as usize).sum();
        if n_treated == 0 || n_treated == n {
            return Err(Error::Validation(format!(
                "propensity model needs both arms represented, got {n_treated}/{n} treated"
            )));
        }

        // Family / claims-block compatibility.
        match family {
            PriorFamily::ComorbidityIndicator => {
                if ds.claims_kind != ClaimsKind::ComorbidityIndicator {
                    return Err(Error::Validation(
                        "elix-ind expects a dataset reduced with the indicator comorbidity map"
                            .into(),
                    ));
                }
            }
            PriorFamily::ComorbidityContinuous => {
                if ds.claims_kind != ClaimsKind::ComorbidityScore {
                    return Err(Error::Validation(
                        "elix-cont expects a dataset reduced with the weighted comorbidity map"
                            .into(),
                    ));
                }
            }
            PriorFamily::T5ThreeDigit | PriorFamily::Hierarchical => {
                if ds.claims_kind != ClaimsKind::Codes {
                    return Err(Error::Validation(format!(
                        "{family} operates on raw code columns"
                    )));
                }
                if hierarchy.is_none() {
                    return Err(Error::Validation(format!(
                        "{family} requires a code hierarchy"
                    )));
                }
            }
            PriorFamily::T5FourDigit | PriorFamily::Horseshoe => {
                if ds.claims_kind != ClaimsKind::Codes {
                    return Err(Error::Validation(format!(
                        "{family} operates on raw code columns"
                    )));
                }
            }
            PriorFamily::Unadjusted => {}
        }

        let q = if family == PriorFamily::Unadjusted { 0 } else { ds.q() };

        // Standardize baselines; a constant column cannot be standardized
        // and is collinear with the intercept anyway.
        let mut b_mean = vec![0.0; q];
        let mut b_sd = vec![1.0; q];
        for j in 0..q {
            let col = ds.baseline.column(j);
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0);
            if var <= 0.0 {
                return Err(Error::Validation(format!(
                    "baseline covariate {:?} is constant; drop it before fitting",
                    ds.baseline_names[j]
                )));
            }
            b_mean[j] = m;
            b_sd[j] = var.sqrt();
        }

        // Claims block of the design and its column names.
        let (claims_design, claims_labels): (Array2<f64>, Vec<String>) = match family {
            PriorFamily::Unadjusted => (Array2::zeros((n, 0)), Vec::new()),
            PriorFamily::T5ThreeDigit => {
                let h = hierarchy.expect("checked above");
                // One OR-column per distinct 3-digit parent, parent order
                // lexicographic (groups and singletons interleaved).
                let mut parents: Vec<(String, Vec<usize>)> = h
                    .groups
                    .iter()
                    .map(|g| (g.prefix.clone(), g.member_cols.clone()))
                    .collect();
                for &j in &h.singleton_cols {
                    parents.push((ds.claims_names[j][..3].to_string(), vec![j]));
                }
                parents.sort_by(|a, b| a.0.cmp(&b.0));
                let mut m = Array2::<f64>::zeros((n, parents.len()));
                for (k, (_, cols)) in parents.iter().enumerate() {
                    for &j in cols {
                        for i in 0..n {
                            if ds.claims[[i, j]] == 1.0 {
                                m[[i, k]] = 1.0;
                            }
                        }
                    }
                }
                (m, parents.into_iter().map(|(prefix, _)| prefix).collect())
            }
            _ => (ds.claims.clone(), ds.claims_names.clone()),
        };
        let p = claims_design.ncols();

        // Assemble [1 | standardized B | claims block].
        let d = 1 + q + p;
        let mut design = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            design[[i, 0]] = 1.0;
            for j in 0..q {
                design[[i, 1 + j]] = (ds.baseline[[i, j]] - b_mean[j]) / b_sd[j];
            }
            for j in 0..p {
                design[[i, 1 + q + j]] = claims_design[[i, j]];
            }
        }

        // Parameter names and family bookkeeping.
        let mut names = vec!["b0".to_string()];
        for j in 0..q {
            names.push(format!("b_{}", ds.baseline_names[j]));
        }
        let kind = match family {
            PriorFamily::Horseshoe => LayoutKind::Horseshoe,
            PriorFamily::Hierarchical => LayoutKind::Hierarchical,
            _ => LayoutKind::Plain,
        };
        match kind {
            LayoutKind::Horseshoe => {
                for l in &claims_labels {
                    names.push(format!("z_{l}"));
                }
                for l in &claims_labels {
                    names.push(format!("log_lambda_{l}"));
                }
                names.push("log_tau".to_string());
            }
            _ => {
                for l in &claims_labels {
                    names.push(format!("c_{l}"));
                }
            }
        }

        let mut groups: Vec<(Vec<usize>, usize)> = Vec::new();
        let mut singleton_slots: Vec<usize> = Vec::new();
        let mut n_groups = 0usize;
        if family == PriorFamily::Hierarchical {
            let h = hierarchy.expect("checked above");
            n_groups = h.groups.len();
            let base = 1 + q;
            let mu_base = base + p;
            for (l, g) in h.groups.iter().enumerate() {
                // Dataset claims columns are design claims columns here
                // (hierarchical keeps the 4-digit block as-is).
                let slots: Vec<usize> = g.member_cols.iter().map(|&j| base + j).collect();
                groups.push((slots, mu_base + l));
                names.push(format!("mu_{}", g.prefix));
            }
            singleton_slots = h.singleton_cols.iter().map(|&j| base + j).collect();
        }

        let layout = ParameterLayout { names, q, p, n_groups, kind };
        Ok(Model {
            family,
            layout,
            x: ds.treatment.iter().map(|&t| t as f64).collect(),
            design,
            b_mean,
            b_sd,
            groups,
            singleton_slots,
            intercept_prior: PriorSpec::intercept_default(),
            coef_prior: PriorSpec::weakly_informative(),
            laplace_scale: 0.5,
            horseshoe_local_df: 3.0,
            n_claims_vars: p,
        })
    }

    /// Replace the intercept and coefficient priors (sensitivity analyses;
    /// inflating the scales toward +∞ recovers maximum likelihood).
    pub fn with_priors(mut self, intercept: PriorSpec, coef: PriorSpec) -> Result<Model> {
        match (&intercept, &coef) {
            (PriorSpec::Normal { .. } | PriorSpec::StudentT { .. },
             PriorSpec::Normal { .. } | PriorSpec::StudentT { .. }) => {
                self.intercept_prior = intercept;
                self.coef_prior = coef;
                Ok(self)
            }
            _ => Err(Error::Validation(
                "prior overrides must be unconditional families (normal or student-t)".into(),
            )),
        }
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Claims-derived variable count in the design (what fit reports show).
    pub fn n_claims_vars(&self) -> usize {
        self.n_claims_vars
    }

    fn coef_logp_grad_1d(&self, v: f64) -> (f64, f64) {
        match self.coef_prior {
            PriorSpec::Normal { mean, sd } => {
                (priors::normal_logpdf(v, mean, sd), -(v - mean) / (sd * sd))
            }
            PriorSpec::StudentT { df, loc, scale } => (
                priors::student_t_logpdf(v, df, loc, scale),
                priors::student_t_grad(v, df, loc, scale),
            ),
            _ => unreachable!("validated in with_priors"),
        }
    }

    /// Map sampled parameters to the effective coefficient vector that
    /// multiplies the design matrix.
    pub fn effective_coefficients(&self, params: &[f64]) -> Vec<f64> {
        let d = self.layout.coef_dim();
        let mut w = params[..d.min(params.len())].to_vec();
        w.resize(d, 0.0);
        if self.layout.kind == LayoutKind::Horseshoe {
            let zr = self.layout.claims_slots();
            let lr = self.layout.log_local_slots().expect("horseshoe");
            let tau = params[self.layout.log_global_slot().expect("horseshoe")].exp();
            for (k, (zs, ls)) in zr.zip(lr).enumerate() {
                w[1 + self.layout.q + k] = params[zs] * params[ls].exp() * tau;
            }
        }
        w
    }

    /// Joint log posterior and gradient; the fast path used by the sampler.
    /// Returns `-inf` (with an unspecified gradient) off the support or on
    /// numeric failure instead of erroring.
    pub fn logp_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(params.len(), self.dim());
        debug_assert_eq!(grad.len(), self.dim());
        grad.fill(0.0);

        let w = self.effective_coefficients(params);
        let n = self.n();
        let d = self.layout.coef_dim();

        // Likelihood: Σ xη - softplus(η); gradient designᵀ(x - π).
        let mut lp = 0.0;
        let mut g_w = vec![0.0; d];
        let design = self.design.as_slice().expect("design is standard layout");
        for i in 0..n {
            let row = &design[i * d..(i + 1) * d];
            let mut eta = 0.0;
            for k in 0..d {
                eta += row[k] * w[k];
            }
            lp += self.x[i] * eta - softplus(eta);
            let r = self.x[i] - sigmoid(eta);
            for k in 0..d {
                g_w[k] += r * row[k];
            }
        }

        // Scatter coefficient gradients into parameter slots and add priors.
        let q = self.layout.q;
        let p = self.layout.p;

        // Intercept.
        let b0 = params[0];
        match self.intercept_prior {
            PriorSpec::Normal { mean, sd } => {
                lp += priors::normal_logpdf(b0, mean, sd);
                grad[0] = g_w[0] - (b0 - mean) / (sd * sd);
            }
            PriorSpec::StudentT { df, loc, scale } => {
                lp += priors::student_t_logpdf(b0, df, loc, scale);
                grad[0] = g_w[0] + priors::student_t_grad(b0, df, loc, scale);
            }
            _ => unreachable!(),
        }

        // Baselines.
        for j in 0..q {
            let v = params[1 + j];
            let (plp, pg) = self.coef_logp_grad_1d(v);
            lp += plp;
            grad[1 + j] = g_w[1 + j] + pg;
        }

        match self.layout.kind {
            LayoutKind::Plain => {
                for k in 0..p {
                    let slot = 1 + q + k;
                    let v = params[slot];
                    let (plp, pg) = self.coef_logp_grad_1d(v);
                    lp += plp;
                    grad[slot] = g_w[slot] + pg;
                }
            }
            LayoutKind::Horseshoe => {
                let tau_slot = self.layout.log_global_slot().expect("horseshoe");
                let log_tau = params[tau_slot];
                let tau = log_tau.exp();
                let nu = self.horseshoe_local_df;
                let mut g_log_tau = 0.0;
                for k in 0..p {
                    let z_slot = 1 + q + k;
                    let l_slot = 1 + q + p + k;
                    let z = params[z_slot];
                    let log_lambda = params[l_slot];
                    let lambda = log_lambda.exp();
                    let beta = z * lambda * tau;

                    // z ~ N(0,1).
                    lp += priors::normal_logpdf(z, 0.0, 1.0);
                    grad[z_slot] = g_w[z_slot] * lambda * tau - z;

                    // λ ~ half-t_ν(0,1), sampled as log λ: add log-Jacobian.
                    lp += priors::student_t_logpdf(lambda, nu, 0.0, 1.0)
                        + std::f64::consts::LN_2
                        + log_lambda;
                    grad[l_slot] = g_w[z_slot] * beta
                        + lambda * priors::student_t_grad(lambda, nu, 0.0, 1.0)
                        + 1.0;

                    g_log_tau += g_w[z_slot] * beta;
                }
                // τ ~ half-Cauchy(0,1) on the log scale.
                lp += -(std::f64::consts::PI).ln() - (tau * tau).ln_1p()
                    + std::f64::consts::LN_2
                    + log_tau;
                grad[tau_slot] = g_log_tau - 2.0 * tau * tau / (1.0 + tau * tau) + 1.0;
            }
            LayoutKind::Hierarchical => {
                // Likelihood part for all claims coefficients.
                for k in 0..p {
                    let slot = 1 + q + k;
                    grad[slot] = g_w[slot];
                }
                // Singletons: direct t₅.
                for &slot in &self.singleton_slots {
                    let v = params[slot];
                    let (plp, pg) = self.coef_logp_grad_1d(v);
                    lp += plp;
                    grad[slot] += pg;
                }
                // Group members shrink to their mean; means get the t₅.
                let b = self.laplace_scale;
                for (member_slots, mu_slot) in &self.groups {
                    let mu = params[*mu_slot];
                    let mut g_mu = 0.0;
                    for &slot in member_slots {
                        let v = params[slot];
                        lp += priors::laplace_logpdf(v, mu, b);
                        let s = if v > mu {
                            1.0
                        } else if v < mu {
                            -1.0
                        } else {
                            0.0
                        };
                        grad[slot] += -s / b;
                        g_mu += s / b;
                    }
                    let (plp, pg) = self.coef_logp_grad_1d(mu);
                    lp += plp;
                    grad[*mu_slot] = g_mu + pg;
                }
            }
        }

        lp
    }

    /// Joint log posterior with validation: non-finite inputs or a
    /// non-finite result produce a slot-named error.
    pub fn log_posterior(&self, params: &[f64]) -> Result<f64> {
        self.check_params(params)?;
        let mut grad = vec![0.0; self.dim()];
        let lp = self.logp_grad(params, &mut grad);
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                slot: "log_posterior".into(),
                detail: format!("value {lp} at a finite parameter vector"),
            });
        }
        Ok(lp)
    }

    /// Gradient of the log posterior with validation mirroring
    /// [`Model::log_posterior`].
    pub fn grad_log_posterior(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut grad = vec![0.0; self.dim()];
        let lp = self.logp_grad(params, &mut grad);
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                slot: "log_posterior".into(),
                detail: format!("value {lp}"),
            });
        }
        for (slot, g) in grad.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    slot: self.layout.names[slot].clone(),
                    detail: format!("gradient component {g}"),
                });
            }
        }
        Ok(grad)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::Validation(format!(
                "parameter vector has length {}, model expects {}",
                params.len(),
                self.dim()
            )));
        }
        for (slot, v) in params.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    slot: self.layout.names[slot].clone(),
                    detail: format!("parameter value {v}"),
                });
            }
        }
        Ok(())
    }

    /// Per-subject propensity π_i = logit⁻¹(η_i), clamped away from {0, 1}.
    pub fn predict_propensity(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let w = Array1::from_vec(self.effective_coefficients(params));
        let eta = self.design.dot(&w);
        Ok(eta
            .iter()
            .map(|&e| sigmoid(e).clamp(PROPENSITY_EPS, 1.0 - PROPENSITY_EPS))
            .collect())
    }

    /// Pointwise Bernoulli log likelihood of the observed treatment.
    pub fn pointwise_log_lik(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let w = Array1::from_vec(self.effective_coefficients(params));
        let eta = self.design.dot(&w);
        Ok(eta
            .iter()
            .zip(&self.x)
            .map(|(&e, &x)| x * e - softplus(e))
            .collect())
    }

    /// S × n propensity matrix for a flat stack of posterior draws
    /// (one row per draw, columns in layout order).
    pub fn propensity_matrix(&self, draws: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut eta = self.eta_matrix(draws)?;
        eta.mapv_inplace(|e| sigmoid(e).clamp(PROPENSITY_EPS, 1.0 - PROPENSITY_EPS));
        Ok(eta)
    }

    /// S × n pointwise log-likelihood matrix for a flat stack of draws —
    /// the input PSIS-LOO wants.
    pub fn log_lik_matrix(&self, draws: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut m = self.eta_matrix(draws)?;
        for mut row in m.rows_mut() {
            for (i, e) in row.iter_mut().enumerate() {
                *e = self.x[i] * *e - softplus(*e);
            }
        }
        Ok(m)
    }

    /// S × n linear predictors: effective coefficients per draw times the
    /// design, computed as one matrix product.
    fn eta_matrix(&self, draws: ArrayView2<f64>) -> Result<Array2<f64>> {
        if draws.ncols() != self.dim() {
            return Err(Error::LayoutMismatch(format!(
                "draws have {} columns, model expects {} parameters",
                draws.ncols(),
                self.dim()
            )));
        }
        let s = draws.nrows();
        let d = self.layout.coef_dim();
        let mut coefs = Array2::<f64>::zeros((s, d));
        for (si, row) in draws.rows().into_iter().enumerate() {
            let w = self.effective_coefficients(row.as_slice().expect("row contiguous"));
            for k in 0..d {
                coefs[[si, k]] = w[k];
            }
        }
        Ok(coefs.dot(&self.design.t()))
    }

    /// Coefficients on the original covariate scale (undoing baseline
    /// standardization), named for reports: intercept, baselines, then the
    /// claims block.
    pub fn original_scale_coefficients(&self, params: &[f64]) -> Result<Vec<(String, f64)>> {
        self.check_params(params)?;
        let w = self.effective_coefficients(params);
        let q = self.layout.q;
        let mut out = Vec::with_capacity(self.layout.coef_dim());
        let mut intercept = w[0];
        for j in 0..q {
            intercept -= w[1 + j] * self.b_mean[j] / self.b_sd[j];
        }
        out.push(("intercept".to_string(), intercept));
        for j in 0..q {
            // Baseline name without the sampling-scale "b_" prefix.
            let name = self.layout.names[1 + j].trim_start_matches("b_").to_string();
            out.push((name, w[1 + j] / self.b_sd[j]));
        }
        for k in 0..self.layout.p {
            let name = match self.layout.kind {
                LayoutKind::Horseshoe => self.layout.names[1 + q + k]
                    .trim_start_matches("z_")
                    .to_string(),
                _ => self.layout.names[1 + q + k].trim_start_matches("c_").to_string(),
            };
            out.push((name, w[1 + q + k]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_hierarchy, ClaimsKind};
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Synthetic in-memory cohort: 2 baselines, 6 codes in prefix groups
    /// 414 (3 codes), 250 (2 codes), V45 (1 code).
    fn fixture(n: usize, seed: u64) -> AnalysisDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = ["2500", "2501", "4140", "4141", "4142", "V450"];
        let mut claims = Array2::<f64>::zeros((n, codes.len()));
        let mut baseline = Array2::<f64>::zeros((n, 2));
        let mut treatment = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            baseline[[i, 0]] = rng.random_range(40.0..90.0);
            baseline[[i, 1]] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let mut eta = -0.3 + 0.02 * (baseline[[i, 0]] - 65.0);
            for j in 0..codes.len() {
                if rng.random_bool(0.25) {
                    claims[[i, j]] = 1.0;
                    eta += 0.4 * (j as f64 - 2.5) / 2.5;
                }
            }
            let t = u8::from(rng.random_bool(crate::util::sigmoid(eta)));
            treatment.push(t);
            y.push(u8::from(rng.random_bool(0.2)));
        }
        // Guarantee both arms.
        treatment[0] = 1;
        treatment[n - 1] = 0;
        let ds = AnalysisDataset {
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            treatment,
            outcomes: vec![("y_event".to_string(), y)],
            baseline_names: vec!["age".to_string(), "male".to_string()],
            baseline,
            claims_names: codes.iter().map(|c| c.to_string()).collect(),
            claims,
            claims_kind: ClaimsKind::Codes,
        };
        ds.validate().unwrap();
        ds
    }

    fn random_params(model: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..model.dim()).map(|_| rng.random_range(-1.2..1.2)).collect()
    }

    #[test]
    fn layout_dimensions_follow_the_family_structure() {
        let ds = fixture(50, 3);
        let h = build_hierarchy(&ds).unwrap();
        let q = 2;
        let p = 6;

        let m = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
        assert_eq!(m.dim(), 1 + q + p);
        assert_eq!(m.layout().names[0], "b0");
        assert_eq!(m.layout().names[1], "b_age");
        assert_eq!(m.layout().names[3], "c_2500");

        // Parents: 250, 414, V45 -> 3 collapsed columns.
        let m = Model::new(PriorFamily::T5ThreeDigit, &ds, Some(&h)).unwrap();
        assert_eq!(m.dim(), 1 + q + 3);
        assert_eq!(m.layout().names[3..], ["c_250", "c_414", "c_V45"]);

        let m = Model::new(PriorFamily::Horseshoe, &ds, None).unwrap();
        assert_eq!(m.dim(), 1 + q + 2 * p + 1);
        assert_eq!(*m.layout().names.last().unwrap(), "log_tau");

        // Two multi-code groups -> two group means.
        let m = Model::new(PriorFamily::Hierarchical, &ds, Some(&h)).unwrap();
        assert_eq!(m.dim(), 1 + q + p + 2);
        assert_eq!(m.layout().names[m.dim() - 2..], ["mu_250", "mu_414"]);

        let m = Model::new(PriorFamily::Unadjusted, &ds, None).unwrap();
        assert_eq!(m.dim(), 1);
    }

    #[test]
    fn gradients_match_central_differences_for_every_family() {
        let ds = fixture(60, 11);
        let h = build_hierarchy(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rel_tol = 1e-6;

        for family in [
            PriorFamily::T5FourDigit,
            PriorFamily::T5ThreeDigit,
            PriorFamily::Horseshoe,
            PriorFamily::Hierarchical,
            PriorFamily::Unadjusted,
        ] {
            let model = Model::new(family, &ds, Some(&h)).unwrap();
            for _ in 0..8 {
                let mut params = random_params(&model, &mut rng);
                // Keep clear of the Laplace kink |β_j - μ_l|=0 where the
                // two-sided difference quotient is not the subgradient.
                if family == PriorFamily::Hierarchical {
                    for (slots, mu_slot) in &model.groups {
                        for &s in slots {
                            if (params[s] - params[*mu_slot]).abs() < 1e-3 {
                                params[s] += 0.01;
                            }
                        }
                    }
                }
                let grad = model.grad_log_posterior(&params).unwrap();
                let h_step = 1e-5;
                for slot in 0..model.dim() {
                    let mut plus = params.clone();
                    plus[slot] += h_step;
                    let mut minus = params.clone();
                    minus[slot] -= h_step;
                    let fd = (model.log_posterior(&plus).unwrap()
                        - model.log_posterior(&minus).unwrap())
                        / (2.0 * h_step);
                    let denom = fd.abs().max(1e-2);
                    assert!(
                        ((grad[slot] - fd) / denom).abs() < rel_tol * 100.0,
                        "{family} slot {} ({}): analytic {} vs fd {}",
                        slot,
                        model.layout().names[slot],
                        grad[slot],
                        fd
                    );
                }
            }
        }
    }

    /// Iteratively reweighted least squares on the plain logistic
    /// likelihood — an independent route to the MLE.
    fn irls_mle(x: &[f64], design: &Array2<f64>) -> Vec<f64> {
        let n = design.nrows();
        let d = design.ncols();
        let mut beta = vec![0.0; d];
        for _ in 0..60 {
            // Gradient and Fisher information.
            let mut g = vec![0.0; d];
            let mut info = vec![vec![0.0; d]; d];
            for i in 0..n {
                let mut eta = 0.0;
                for k in 0..d {
                    eta += design[[i, k]] * beta[k];
                }
                let pi = crate::util::sigmoid(eta);
                let w = pi * (1.0 - pi);
                for k in 0..d {
                    g[k] += (x[i] - pi) * design[[i, k]];
                    for l in 0..d {
                        info[k][l] += w * design[[i, k]] * design[[i, l]];
                    }
                }
            }
            // Solve info * step = g by Gaussian elimination.
            let mut a = info.clone();
            let mut b = g.clone();
            for col in 0..d {
                let piv = (col..d)
                    .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
                    .unwrap();
                a.swap(col, piv);
                b.swap(col, piv);
                let diag = a[col][col];
                for r in (col + 1)..d {
                    let f = a[r][col] / diag;
                    for c in col..d {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
            let mut step = vec![0.0; d];
            for r in (0..d).rev() {
                let mut acc = b[r];
                for c in (r + 1)..d {
                    acc -= a[r][c] * step[c];
                }
                step[r] = acc / a[r][r];
            }
            let delta: f64 = step.iter().map(|s| s.abs()).sum();
            for k in 0..d {
                beta[k] += step[k];
            }
            if delta < 1e-12 {
                break;
            }
        }
        beta
    }

    #[test]
    fn flat_prior_posterior_mode_approaches_the_mle() {
        // Small, dense dataset so the MLE is well inside the parameter
        // space; priors inflated until they are effectively flat.
        let ds = fixture(250, 23);
        let model = Model::new(PriorFamily::T5FourDigit, &ds, None)
            .unwrap()
            .with_priors(
                PriorSpec::Normal { mean: 0.0, sd: 1e7 },
                PriorSpec::Normal { mean: 0.0, sd: 1e7 },
            )
            .unwrap();

        let mle = irls_mle(&model.x, &model.design);
        assert!(
            mle.iter().all(|b| b.abs() < 8.0),
            "fixture produced a near-separable design; MLE {mle:?}"
        );

        // Gradient ascent with backtracking from zero.
        let mut beta = vec![0.0; model.dim()];
        let mut grad = vec![0.0; model.dim()];
        let mut step = 0.1;
        let mut lp = model.logp_grad(&beta, &mut grad);
        for _ in 0..8000 {
            let cand: Vec<f64> = beta.iter().zip(&grad).map(|(b, g)| b + step * g).collect();
            let mut cand_grad = vec![0.0; model.dim()];
            let cand_lp = model.logp_grad(&cand, &mut cand_grad);
            if cand_lp > lp {
                beta = cand;
                grad = cand_grad;
                lp = cand_lp;
                step *= 1.1;
            } else {
                step *= 0.5;
            }
            if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-10 {
                break;
            }
        }
        for k in 0..model.dim() {
            assert!(
                (beta[k] - mle[k]).abs() < 1e-4,
                "slot {k}: mode {} vs MLE {}",
                beta[k],
                mle[k]
            );
        }
    }

    #[test]
    fn intercept_only_mode_found_by_golden_section_annihilates_the_gradient() {
        // One treated subject, intercept-only model:
        // lp(b0) = b0 - softplus(b0) + log N(b0; 0, 10).
        let ds = AnalysisDataset {
            subject_ids: vec!["a".into(), "b".into()],
            treatment: vec![1, 0],
            outcomes: vec![],
            baseline_names: vec![],
            baseline: Array2::zeros((2, 0)),
            claims_names: vec![],
            claims: Array2::zeros((2, 0)),
            claims_kind: ClaimsKind::Codes,
        };
        let model = Model::new(PriorFamily::Unadjusted, &ds, None).unwrap();

        // Golden-section search uses only log-posterior evaluations.
        let lp = |b: f64| model.log_posterior(&[b]).unwrap();
        let (mut lo, mut hi) = (-5.0, 5.0);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut c, mut d) = (hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo));
        for _ in 0..200 {
            if lp(c) > lp(d) {
                hi = d;
                d = c;
                c = hi - inv_phi * (hi - lo);
            } else {
                lo = c;
                c = d;
                d = lo + inv_phi * (hi - lo);
            }
        }
        let mode = 0.5 * (lo + hi);

        let grad = model.grad_log_posterior(&[mode]).unwrap()[0];
        assert!(grad.abs() < 1e-6, "gradient at golden-section mode: {grad}");

        // Independent root of lp'(b) = 1 - 2σ(b) - b/100 by bisection.
        let f = |b: f64| 1.0 - 2.0 * crate::util::sigmoid(b) - b / 100.0;
        let (mut a, mut z) = (-5.0, 5.0);
        for _ in 0..200 {
            let m = 0.5 * (a + z);
            if f(a) * f(m) <= 0.0 {
                z = m;
            } else {
                a = m;
            }
        }
        assert!(
            (mode - 0.5 * (a + z)).abs() < 1e-6,
            "golden-section mode {mode} vs bisection root {}",
            0.5 * (a + z)
        );
    }

    #[test]
    fn subject_order_does_not_change_the_posterior() {
        let ds = fixture(40, 5);
        let h = build_hierarchy(&ds).unwrap();
        // Reverse all subject-indexed blocks.
        let n = ds.n();
        let rev = |v: &Vec<u8>| v.iter().rev().copied().collect::<Vec<u8>>();
        let mut claims = Array2::<f64>::zeros((n, ds.p()));
        let mut baseline = Array2::<f64>::zeros((n, ds.q()));
        for i in 0..n {
            for j in 0..ds.p() {
                claims[[i, j]] = ds.claims[[n - 1 - i, j]];
            }
            for j in 0..ds.q() {
                baseline[[i, j]] = ds.baseline[[n - 1 - i, j]];
            }
        }
        let permuted = AnalysisDataset {
            subject_ids: ds.subject_ids.iter().rev().cloned().collect(),
            treatment: rev(&ds.treatment),
            outcomes: ds.outcomes.iter().map(|(k, v)| (k.clone(), rev(v))).collect(),
            baseline,
            claims,
            ..ds.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for family in [PriorFamily::T5FourDigit, PriorFamily::Hierarchical] {
            let m1 = Model::new(family, &ds, Some(&h)).unwrap();
            let m2 = Model::new(family, &permuted, Some(&build_hierarchy(&permuted).unwrap()))
                .unwrap();
            let params = random_params(&m1, &mut rng);
            let lp1 = m1.log_posterior(&params).unwrap();
            let lp2 = m2.log_posterior(&params).unwrap();
            assert!(
                (lp1 - lp2).abs() < 1e-9,
                "{family}: lp changed under subject permutation: {lp1} vs {lp2}"
            );
        }
    }

    #[test]
    fn three_digit_collapse_is_identity_when_all_prefixes_are_singletons() {
        let mut ds = fixture(40, 7);
        // Rename codes so every prefix occurs once.
        ds.claims_names = vec![
            "1230".into(),
            "2340".into(),
            "3450".into(),
            "4560".into(),
            "5670".into(),
            "6780".into(),
        ];
        let h = build_hierarchy(&ds).unwrap();
        assert!(h.groups.is_empty());

        let m3 = Model::new(PriorFamily::T5ThreeDigit, &ds, Some(&h)).unwrap();
        let m4 = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
        assert_eq!(m3.dim(), m4.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(&m4, &mut rng);
        let d3 = m3.log_posterior(&params).unwrap();
        let d4 = m4.log_posterior(&params).unwrap();
        assert!((d3 - d4).abs() < 1e-12, "collapse must be a no-op: {d3} vs {d4}");
    }

    #[test]
    fn unadjusted_is_blind_to_covariates() {
        let a = fixture(40, 13);
        let mut b = a.clone();
        b.baseline.mapv_inplace(|v| v * 3.0 + 1.0);
        b.claims.mapv_inplace(|v| 1.0 - v);
        let ma = Model::new(PriorFamily::Unadjusted, &a, None).unwrap();
        let mb = Model::new(PriorFamily::Unadjusted, &b, None).unwrap();
        assert_eq!(
            ma.log_posterior(&[0.37]).unwrap(),
            mb.log_posterior(&[0.37]).unwrap()
        );
    }

    #[test]
    fn propensity_and_log_lik_matrices_agree_with_pointwise_paths() {
        let ds = fixture(30, 19);
        let model = Model::new(PriorFamily::Horseshoe, &ds, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<Vec<f64>> = (0..5).map(|_| random_params(&model, &mut rng)).collect();
        let flat = Array2::from_shape_vec(
            (5, model.dim()),
            draws.iter().flatten().copied().collect(),
        )
        .unwrap();

        let pi_m = model.propensity_matrix(flat.view()).unwrap();
        let ll_m = model.log_lik_matrix(flat.view()).unwrap();
        for (s, params) in draws.iter().enumerate() {
            let pi = model.predict_propensity(params).unwrap();
            let ll = model.pointwise_log_lik(params).unwrap();
            for i in 0..ds.n() {
                assert!((pi_m[[s, i]] - pi[i]).abs() < 1e-12);
                assert!((ll_m[[s, i]] - ll[i]).abs() < 1e-12);
                assert!(pi[i] > 0.0 && pi[i] < 1.0);
            }
        }
    }

    #[test]
    fn horseshoe_likelihood_ignores_scales_when_z_is_zero() {
        // Non-centered parameterization: with z = 0 the effective claims
        // coefficients vanish, so λ moves only the prior terms.
        let ds = fixture(30, 21);
        let model = Model::new(PriorFamily::Horseshoe, &ds, None).unwrap();
        let mut params = vec![0.0; model.dim()];
        params[0] = 0.4;
        let ll0: f64 = model.pointwise_log_lik(&params).unwrap().iter().sum();
        let lr = model.layout().log_local_slots().unwrap();
        for (k, slot) in lr.enumerate() {
            params[slot] = (k as f64 - 2.0) * 0.8;
        }
        let ll1: f64 = model.pointwise_log_lik(&params).unwrap().iter().sum();
        assert_eq!(ll0, ll1);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let ds = fixture(30, 29);
        assert!(Model::new(PriorFamily::T5ThreeDigit, &ds, None).is_err(), "needs hierarchy");
        assert!(Model::new(PriorFamily::Hierarchical, &ds, None).is_err(), "needs hierarchy");
        assert!(
            Model::new(PriorFamily::ComorbidityIndicator, &ds, None).is_err(),
            "needs a reduced dataset"
        );

        let mut one_arm = ds.clone();
        one_arm.treatment = vec![1; one_arm.n()];
        assert!(Model::new(PriorFamily::T5FourDigit, &one_arm, None).is_err());

        let mut const_col = ds.clone();
        const_col.baseline.column_mut(1).fill(1.0);
        let err = Model::new(PriorFamily::T5FourDigit, &const_col, None).unwrap_err();
        assert!(err.to_string().contains("male"), "got: {err}");

        let model = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
        let mut params = vec![0.0; model.dim()];
        params[3] = f64::NAN;
        let err = model.log_posterior(&params).unwrap_err();
        assert!(err.to_string().contains("c_2500"), "got: {err}");
    }

    #[test]
    fn original_scale_coefficients_undo_standardization() {
        let ds = fixture(80, 31);
        let model = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_params(&model, &mut rng);
        let coefs = model.original_scale_coefficients(&params).unwrap();
        assert_eq!(coefs[0].0, "intercept");
        assert_eq!(coefs[1].0, "age");

        // η computed from original-scale coefficients must match the
        // model's standardized path.
        let pi_model = model.predict_propensity(&params).unwrap();
        for i in [0usize, 7, 23] {
            let mut eta = coefs[0].1;
            eta += coefs[1].1 * ds.baseline[[i, 0]];
            eta += coefs[2].1 * ds.baseline[[i, 1]];
            for (k, name) in ds.claims_names.iter().enumerate() {
                let c = coefs.iter().find(|(n, _)| n == name).unwrap().1;
                eta += c * ds.claims[[i, k]];
            }
            assert!(
                (crate::util::sigmoid(eta) - pi_model[i]).abs() < 1e-10,
                "subject {i}: {} vs {}",
                crate::util::sigmoid(eta),
                pi_model[i]
            );
        }
    }
}
