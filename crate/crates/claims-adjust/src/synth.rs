//! Synthetic-cohort generator with known treatment and outcome mechanisms —
//! the verification oracle for the whole pipeline.
//!
//! Cohorts mimic the claims-study design: a code hierarchy (multi-code
//! groups sharing a 3-digit prefix plus singleton codes), sparse marginal
//! prevalences, group-correlated co-occurrence through a latent per-subject
//! severity factor, a logistic treatment model over baselines and codes, and
//! a suite of logistic endpoints that reuse the treatment model's covariate
//! channel so confounding strength is controlled. Endpoints with
//! `treatment_coef = 0` are falsifiability endpoints: their true risk
//! difference is exactly zero, so any nonzero estimate is residual
//! confounding.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnalysisDataset, ClaimsKind};
use crate::util::{mean, sigmoid};

/// One endpoint's true outcome model:
/// logit P(Y=1) = intercept + treatment_coef·X + confounder_coef·z, where z
/// is the covariate contribution to the treatment logit (baselines + codes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    /// Registry column name; must start with `y_`.
    pub name: String,
    /// Baseline logit of the event rate.
    pub intercept: f64,
    /// True treatment effect on the logit scale; 0 for falsifiability
    /// endpoints.
    pub treatment_coef: f64,
    /// How strongly the treatment model's covariate channel leaks into the
    /// outcome — the planted confounding strength.
    pub confounder_coef: f64,
}

/// Full description of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Cohort size.
    pub n: usize,
    /// Baseline covariates (alternating continuous and binary).
    pub n_baseline: usize,
    /// Multi-code groups, `group_size` codes each, sharing a 3-digit prefix.
    pub n_groups: usize,
    pub group_size: usize,
    /// Codes with a unique 3-digit prefix (no siblings).
    pub n_singletons: usize,
    /// Marginal code prevalences are drawn log-uniformly from this range.
    pub prevalence_range: (f64, f64),
    /// Loading of the per-(subject, group) latent severity factor; 0 makes
    /// codes independent.
    pub group_factor_sd: f64,
    /// Fraction of groups / singletons with nonzero treatment coefficients.
    pub active_group_fraction: f64,
    pub active_singleton_fraction: f64,
    /// Active group means μ_l ~ N(0, group_coef_sd); members get
    /// μ_l + N(0, member_offset_sd). Active singletons draw from the group
    /// mean distribution directly.
    pub group_coef_sd: f64,
    pub member_offset_sd: f64,
    /// Baseline covariate coefficients ~ N(0, baseline_coef_sd).
    pub baseline_coef_sd: f64,
    /// Intercept of the treatment logit.
    pub treatment_intercept: f64,
    pub endpoints: Vec<EndpointSpec>,
    pub seed: u64,
}

/// Ground truth emitted beside a generated cohort, never inside its files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTruth {
    pub scenario: String,
    pub seed: u64,
    /// True propensity per subject.
    pub true_propensity: Vec<f64>,
    pub endpoints: Vec<EndpointTruth>,
}

/// Per-endpoint potential-outcome truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointTruth {
    pub name: String,
    /// P(Y=1 | do(X=1)) and P(Y=1 | do(X=0)) per subject.
    pub p1: Vec<f64>,
    pub p0: Vec<f64>,
    /// Average risk difference mean(p1) − mean(p0) over the cohort.
    pub true_delta: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Validation("cohort needs at least 2 subjects".into()));
        }
        if self.n_groups > 0 && self.group_size < 2 {
            return Err(Error::Validation(
                "groups need at least 2 member codes (use singletons otherwise)".into(),
            ));
        }
        if self.n_groups > 400 || self.n_singletons > 399 {
            return Err(Error::Validation(
                "at most 400 groups and 399 singletons (3-digit prefix space)".into(),
            ));
        }
        if self.group_size > 100 {
            return Err(Error::Validation("at most 100 codes per group".into()));
        }
        let (lo, hi) = self.prevalence_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Validation(format!(
                "prevalence range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        for f in [self.active_group_fraction, self.active_singleton_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Validation(format!(
                    "active fraction {f} outside [0, 1]"
                )));
            }
        }
        if self.group_factor_sd < 0.0 {
            return Err(Error::Validation("group_factor_sd must be >= 0".into()));
        }
        for ep in &self.endpoints {
            if !ep.name.starts_with("y_") {
                return Err(Error::Validation(format!(
                    "endpoint '{}' must be named y_* to round-trip the registry",
                    ep.name
                )));
            }
        }
        let mut names: Vec<&str> = self.endpoints.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.endpoints.len() {
            return Err(Error::Validation("duplicate endpoint names".into()));
        }
        Ok(())
    }

    /// Full-scale scenario: n=8000, 300 codes in 60 four-code groups plus
    /// 60 singletons. Sized for generator statistics checks, not for fitting.
    pub fn full_scale(seed: u64) -> Self {
        ScenarioSpec {
            name: "full-scale".into(),
            n: 8000,
            n_baseline: 4,
            n_groups: 60,
            group_size: 4,
            n_singletons: 60,
            prevalence_range: (0.006, 0.20),
            group_factor_sd: 0.8,
            active_group_fraction: 0.5,
            active_singleton_fraction: 0.5,
            group_coef_sd: 0.5,
            member_offset_sd: 0.2,
            baseline_coef_sd: 0.3,
            treatment_intercept: -0.8,
            endpoints: vec![
                EndpointSpec {
                    name: "y_early".into(),
                    intercept: -2.2,
                    treatment_coef: 0.0,
                    confounder_coef: 0.8,
                },
                EndpointSpec {
                    name: "y_late".into(),
                    intercept: -1.4,
                    treatment_coef: -0.2,
                    confounder_coef: 0.8,
                },
            ],
            seed,
        }
    }

    /// Small, strongly confounded cohort for falsifiability-endpoint and
    /// balance studies: n=2000, 60 codes (12 groups of 3 plus 24 singletons),
    /// one zero-effect endpoint.
    pub fn confounded_small(seed: u64) -> Self {
        ScenarioSpec {
            name: "confounded-small".into(),
            n: 2000,
            n_baseline: 2,
            n_groups: 12,
            group_size: 3,
            n_singletons: 24,
            prevalence_range: (0.05, 0.25),
            group_factor_sd: 0.4,
            active_group_fraction: 0.75,
            active_singleton_fraction: 0.5,
            group_coef_sd: 0.35,
            member_offset_sd: 0.1,
            baseline_coef_sd: 0.3,
            treatment_intercept: -0.3,
            endpoints: vec![EndpointSpec {
                name: "y_falsify".into(),
                intercept: -1.3,
                treatment_coef: 0.0,
                confounder_coef: 1.0,
            }],
            seed,
        }
    }

    /// Sparse-truth scenario: many null codes, a few strong group-aligned
    /// signals — the regime where shrinkage priors should show their value.
    pub fn sparse_truth(seed: u64) -> Self {
        ScenarioSpec {
            name: "sparse-truth".into(),
            n: 1500,
            n_baseline: 2,
            n_groups: 13,
            group_size: 5,
            n_singletons: 15,
            prevalence_range: (0.015, 0.08),
            group_factor_sd: 0.5,
            active_group_fraction: 0.2,
            active_singleton_fraction: 0.07,
            group_coef_sd: 1.5,
            member_offset_sd: 0.05,
            baseline_coef_sd: 0.4,
            treatment_intercept: -0.5,
            endpoints: vec![EndpointSpec {
                name: "y_falsify".into(),
                intercept: -1.2,
                treatment_coef: 0.0,
                confounder_coef: 0.9,
            }],
            seed,
        }
    }

    /// Desk-scale reference scenario for the end-to-end convergence gate:
    /// n=3000, 120 codes (24 groups of 4 plus 24 singletons).
    pub fn reference(seed: u64) -> Self {
        ScenarioSpec {
            name: "reference".into(),
            n: 3000,
            n_baseline: 3,
            n_groups: 24,
            group_size: 4,
            n_singletons: 24,
            prevalence_range: (0.02, 0.25),
            group_factor_sd: 0.7,
            active_group_fraction: 0.5,
            active_singleton_fraction: 0.4,
            group_coef_sd: 0.6,
            member_offset_sd: 0.2,
            baseline_coef_sd: 0.4,
            treatment_intercept: -0.6,
            endpoints: vec![
                EndpointSpec {
                    name: "y_falsify".into(),
                    intercept: -1.6,
                    treatment_coef: 0.0,
                    confounder_coef: 0.9,
                },
                EndpointSpec {
                    name: "y_outcome".into(),
                    intercept: -1.2,
                    treatment_coef: -0.3,
                    confounder_coef: 0.9,
                },
            ],
            seed,
        }
    }

    /// Look up a built-in scenario by its CLI name.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "full-scale" => Ok(Self::full_scale(seed)),
            "confounded-small" => Ok(Self::confounded_small(seed)),
            "sparse-truth" => Ok(Self::sparse_truth(seed)),
            "reference" => Ok(Self::reference(seed)),
            other => Err(Error::Validation(format!(
                "unknown scenario '{other}' (have: full-scale, confounded-small, \
                 sparse-truth, reference)"
            ))),
        }
    }
}

/// One code's generation parameters.
struct CodePlan {
    name: String,
    /// Index into the per-subject latent factor vector, if grouped.
    group: Option<usize>,
    /// Logit offset calibrated so the marginal prevalence hits its target
    /// despite the latent factor.
    logit_offset: f64,
    coef: f64,
}

/// Logit offset that keeps the marginal prevalence of
/// Bernoulli(σ(a + γ·U)), U ~ N(0,1), at `prev`: the classic logistic-normal
/// attenuation a = logit(prev)·√(1 + c²γ²) with c = 16√3/(15π).
fn marginal_logit(prev: f64, gamma: f64) -> f64 {
    let logit = (prev / (1.0 - prev)).ln();
    let c = 16.0 * 3.0f64.sqrt() / (15.0 * std::f64::consts::PI);
    logit * (1.0 + c * c * gamma * gamma).sqrt()
}

/// Generate a cohort and its ground truth. Deterministic in `spec.seed`.
pub fn generate_cohort(spec: &ScenarioSpec) -> Result<(AnalysisDataset, CohortTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let (prev_lo, prev_hi) = spec.prevalence_range;
    let draw_prev = |rng: &mut ChaCha8Rng| -> f64 {
        if prev_lo == prev_hi {
            prev_lo
        } else {
            (rng.random_range(prev_lo.ln()..prev_hi.ln())).exp()
        }
    };

    // --- True coefficients over the code hierarchy ---------------------
    let n_active_groups =
        (spec.active_group_fraction * spec.n_groups as f64).round() as usize;
    let mut group_order: Vec<usize> = (0..spec.n_groups).collect();
    group_order.shuffle(&mut rng);
    let mut group_active = vec![false; spec.n_groups];
    for &g in group_order.iter().take(n_active_groups) {
        group_active[g] = true;
    }
    let mut codes: Vec<CodePlan> = Vec::new();
    for g in 0..spec.n_groups {
        let mu: f64 = if group_active[g] {
            let z: f64 = rng.sample(StandardNormal);
            z * spec.group_coef_sd
        } else {
            0.0
        };
        for m in 0..spec.group_size {
            let prev = draw_prev(&mut rng);
            let coef = if group_active[g] {
                let z: f64 = rng.sample(StandardNormal);
                mu + z * spec.member_offset_sd
            } else {
                0.0
            };
            codes.push(CodePlan {
                name: format!("{}{m:02}", 100 + g),
                group: Some(g),
                logit_offset: marginal_logit(prev, spec.group_factor_sd),
                coef,
            });
        }
    }
    let n_active_singles =
        (spec.active_singleton_fraction * spec.n_singletons as f64).round() as usize;
    let mut single_order: Vec<usize> = (0..spec.n_singletons).collect();
    single_order.shuffle(&mut rng);
    let mut single_active = vec![false; spec.n_singletons];
    for &j in single_order.iter().take(n_active_singles) {
        single_active[j] = true;
    }
    for j in 0..spec.n_singletons {
        let prev = draw_prev(&mut rng);
        let coef = if single_active[j] {
            let z: f64 = rng.sample(StandardNormal);
            z * spec.group_coef_sd
        } else {
            0.0
        };
        codes.push(CodePlan {
            name: format!("{}0", 600 + j),
            group: None,
            // No latent factor for singletons: plain Bernoulli(prev).
            logit_offset: marginal_logit(prev, 0.0),
            coef,
        });
    }
    // Claims columns are stored sorted by code.
    codes.sort_by(|a, b| a.name.cmp(&b.name));

    let baseline_coefs: Vec<f64> = (0..spec.n_baseline)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * spec.baseline_coef_sd
        })
        .collect();

    // --- Covariates and the treatment channel --------------------------
    let p = codes.len();
    let q = spec.n_baseline;
    let mut baseline = Array2::zeros((n, q));
    let mut claims = Array2::zeros((n, p));
    // z_i: covariate contribution to the treatment logit.
    let mut z = vec![0.0f64; n];
    let mut factors = vec![0.0f64; spec.n_groups];
    for i in 0..n {
        for k in 0..q {
            // Alternate continuous and binary baseline covariates.
            let v = if k % 2 == 0 {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                let rate = 0.2 + 0.5 * (k as f64 / q.max(1) as f64);
                f64::from(rng.random_range(0.0..1.0) < rate)
            };
            baseline[[i, k]] = v;
            z[i] += baseline_coefs[k] * v;
        }
        for f in factors.iter_mut() {
            *f = rng.sample(StandardNormal);
        }
        for (j, code) in codes.iter().enumerate() {
            let eta = code.logit_offset
                + code.group.map_or(0.0, |g| spec.group_factor_sd * factors[g]);
            if rng.random_range(0.0..1.0) < sigmoid(eta) {
                claims[[i, j]] = 1.0;
                z[i] += code.coef;
            }
        }
    }

    let true_propensity: Vec<f64> =
        z.iter().map(|zi| sigmoid(spec.treatment_intercept + zi)).collect();

    // --- Treatment assignment, regenerated if an arm comes out empty ----
    let mut treatment = vec![0u8; n];
    let mut ok = false;
    for _attempt in 0..10 {
        for i in 0..n {
            treatment[i] = u8::from(rng.random_range(0.0..1.0) < true_propensity[i]);
        }
        let treated: usize = treatment.iter().map(|t| usize::from(*t)).sum();
        if treated > 0 && treated < n {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Validation(format!(
            "treatment arm empty after 10 attempts (intercept {}, n {}): \
             scenario is infeasible",
            spec.treatment_intercept, n
        )));
    }

    // --- Endpoints -------------------------------------------------------
    let mut outcomes = Vec::with_capacity(spec.endpoints.len());
    let mut endpoint_truths = Vec::with_capacity(spec.endpoints.len());
    for ep in &spec.endpoints {
        let mut p1 = Vec::with_capacity(n);
        let mut p0 = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let base = ep.intercept + ep.confounder_coef * z[i];
            let pr1 = sigmoid(base + ep.treatment_coef);
            let pr0 = sigmoid(base);
            let pr = if treatment[i] == 1 { pr1 } else { pr0 };
            y.push(u8::from(rng.random_range(0.0..1.0) < pr));
            p1.push(pr1);
            p0.push(pr0);
        }
        let true_delta = mean(&p1) - mean(&p0);
        outcomes.push((ep.name.clone(), y));
        endpoint_truths.push(EndpointTruth { name: ep.name.clone(), p1, p0, true_delta });
    }

    let ds = AnalysisDataset {
        subject_ids: (0..n).map(|i| format!("p{i:06}")).collect(),
        treatment,
        outcomes,
        baseline_names: (0..q)
            .map(|k| {
                if k % 2 == 0 {
                    format!("bl_cont{k}")
                } else {
                    format!("bl_bin{k}")
                }
            })
            .collect(),
        baseline,
        claims_names: codes.iter().map(|c| c.name.clone()).collect(),
        claims,
        claims_kind: ClaimsKind::Codes,
    };
    ds.validate()?;
    let truth = CohortTruth {
        scenario: spec.name.clone(),
        seed: spec.seed,
        true_propensity,
        endpoints: endpoint_truths,
    };
    Ok((ds, truth))
}

/// Average treatment effect by standardization over the generated cohort:
/// mean(p1) − mean(p0) for the named endpoint.
pub fn true_effect_oracle(truth: &CohortTruth, endpoint: &str) -> Result<f64> {
    let ep = truth
        .endpoints
        .iter()
        .find(|e| e.name == endpoint)
        .ok_or_else(|| {
            Error::Validation(format!(
                "endpoint '{endpoint}' not in truth (have: {})",
                truth
                    .endpoints
                    .iter()
                    .map(|e| e.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
    Ok(mean(&ep.p1) - mean(&ep.p0))
}

/// Write `claims.csv`, `registry.csv`, and `truth.json` into `dir`
/// (creating it). Byte-identical for identical (spec, seed).
pub fn write_cohort(ds: &AnalysisDataset, truth: &CohortTruth, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ds.write_claims_csv(&dir.join("claims.csv"))?;
    ds.write_registry_csv(&dir.join("registry.csv"))?;
    let json = serde_json::to_string_pretty(truth)?;
    std::fs::write(dir.join("truth.json"), json)?;
    Ok(())
}
