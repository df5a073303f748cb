//! Pipeline commands behind the `claims-adjust` binary.
//!
//! Each command is an ordinary function over a [`RunConfig`] so the whole
//! pipeline is testable without spawning processes: `simulate` writes a
//! synthetic cohort, `fit` samples a propensity model and writes draws plus a
//! fit report, `estimate`/`balance`/`loo` consume a draws file, and `report`
//! renders everything found under an output directory as one markdown page.
//!
//! All commands are deterministic given their config and seed. Artifacts are
//! machine-readable (CSV/JSON) plus a human markdown rendering for `report`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causal::{
    draw_causal, standardized_differences, unadjusted_standardized_differences, BalanceOptions,
    CausalSummary,
};
use crate::diagnostics::loo_ic;
use crate::error::{Error, Result};
use crate::ingest::{
    apply_comorbidity_index, build_hierarchy, filter_by_prevalence, parse_claims, AnalysisDataset,
    CodeHierarchy, ComorbidityMap, ComorbidityMode,
};
use crate::model::{Model, PriorFamily};
use crate::sampler::{convergence_report, run_chains, PosteriorDraws, SamplerConfig};
use crate::synth::{generate_cohort, write_cohort, ScenarioSpec};
use crate::util::{mean, quantile, sample_variance};

/// Everything a pipeline command needs to locate data and configure a fit.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub claims: PathBuf,
    pub registry: PathBuf,
    /// Comorbidity map CSV; required by the elix-ind / elix-cont families.
    pub map: Option<PathBuf>,
    /// Output directory; artifacts land directly inside it.
    pub out: PathBuf,
    pub prior: PriorFamily,
    /// Minimum carrier count for a code column to survive filtering.
    pub threshold: usize,
    pub sampler: SamplerConfig,
    /// Endpoint columns to estimate; empty means every `y_*` registry column.
    pub endpoints: Vec<String>,
    /// Master seed for estimation draws (the sampler has its own in
    /// `sampler.seed`).
    pub seed: u64,
}

impl RunConfig {
    pub fn new<P: Into<PathBuf>>(claims: P, registry: P, out: P, prior: PriorFamily) -> Self {
        RunConfig {
            claims: claims.into(),
            registry: registry.into(),
            map: None,
            out: out.into(),
            prior,
            threshold: 10,
            sampler: SamplerConfig::default(),
            endpoints: Vec::new(),
            seed: 0,
        }
    }
}

/// A loaded, filtered dataset ready for model construction.
pub struct PreparedData {
    pub dataset: AnalysisDataset,
    pub hierarchy: Option<CodeHierarchy>,
    /// Code columns removed by the prevalence filter.
    pub dropped: Vec<String>,
}

/// Parse and prepare the cohort exactly as the chosen prior family needs:
/// comorbidity families consume the raw codes through the map, code-level
/// families get prevalence filtering, and the hierarchical family also gets
/// the 3-digit grouping.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let ds = parse_claims(&cfg.claims, &cfg.registry)?;
    match cfg.prior {
        PriorFamily::ComorbidityIndicator | PriorFamily::ComorbidityContinuous => {
            let map_path = cfg.map.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "prior {} needs --map pointing at a prefix,category[,weight] CSV",
                    cfg.prior.cli_name()
                ))
            })?;
            let map = ComorbidityMap::from_csv(map_path)?;
            let mode = if cfg.prior == PriorFamily::ComorbidityIndicator {
                ComorbidityMode::Indicator
            } else {
                ComorbidityMode::Continuous
            };
            let (ds, report) = apply_comorbidity_index(&ds, &map, mode, cfg.threshold)?;
            let dropped = report.unmapped_codes;
            Ok(PreparedData { dataset: ds, hierarchy: None, dropped })
        }
        PriorFamily::Unadjusted => {
            Ok(PreparedData { dataset: ds, hierarchy: None, dropped: Vec::new() })
        }
        _ => {
            let (ds, dropped) = filter_by_prevalence(&ds, cfg.threshold)?;
            let hierarchy = if cfg.prior == PriorFamily::Hierarchical {
                Some(build_hierarchy(&ds)?)
            } else {
                None
            };
            Ok(PreparedData { dataset: ds, hierarchy, dropped })
        }
    }
}

fn build_model(cfg: &RunConfig, prep: &PreparedData) -> Result<Model> {
    Model::new(cfg.prior, &prep.dataset, prep.hierarchy.as_ref())
}

/// Draws whose columns don't match the model layout are refused up front —
/// a wrong (draws, config) pairing must fail loudly, not produce nonsense.
fn check_layout(model: &Model, draws: &PosteriorDraws) -> Result<()> {
    let expect = &model.layout().names;
    if draws.names.len() != expect.len() {
        return Err(Error::LayoutMismatch(format!(
            "draws file has {} parameter columns, model expects {}",
            draws.names.len(),
            expect.len()
        )));
    }
    for (i, (got, want)) in draws.names.iter().zip(expect).enumerate() {
        if got != want {
            return Err(Error::LayoutMismatch(format!(
                "draws column {i} is `{got}`, model expects `{want}`"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Artifacts written by [`cmd_simulate`].
#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub scenario: String,
    pub n: usize,
    pub n_codes: usize,
    pub claims_path: PathBuf,
    pub registry_path: PathBuf,
    pub truth_path: PathBuf,
}

/// Generate a synthetic cohort into `out`. `scenario` is either a preset
/// name (`full-scale`, `confounded-small`, `sparse-truth`, `reference`) or
/// a path to a ScenarioSpec JSON file (its embedded seed is used).
pub fn cmd_simulate(scenario: &str, seed: u64, out: &Path) -> Result<SimulateOutput> {
    let spec = match ScenarioSpec::preset(scenario, seed) {
        Ok(spec) => spec,
        Err(_) if Path::new(scenario).is_file() => {
            let text = fs::read_to_string(scenario)?;
            serde_json::from_str::<ScenarioSpec>(&text)?
        }
        Err(e) => return Err(e),
    };
    spec.validate()?;
    let (ds, truth) = generate_cohort(&spec)?;
    fs::create_dir_all(out)?;
    write_cohort(&ds, &truth, out)?;
    Ok(SimulateOutput {
        scenario: spec.name.clone(),
        n: ds.n(),
        n_codes: ds.p(),
        claims_path: out.join("claims.csv"),
        registry_path: out.join("registry.csv"),
        truth_path: out.join("truth.json"),
    })
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

/// Summary written to `fit_report.json` by [`cmd_fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub prior: String,
    pub n: usize,
    /// Claims-design width after filtering/mapping (0 for unadjusted).
    pub n_claims_vars: usize,
    pub n_dropped_codes: usize,
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub divergences: usize,
    pub elpd_loo: f64,
    pub loo_ic: f64,
    pub loo_se: f64,
    /// Pointwise Pareto-k diagnostics above 0.7.
    pub n_bad_k: usize,
    pub runtime_s: f64,
}

/// Artifacts produced by [`cmd_fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub report: FitReport,
    pub draws_path: PathBuf,
    pub coeffs_path: PathBuf,
    pub report_path: PathBuf,
}

/// Fit the configured propensity model and write `draws.csv`, `coeffs.csv`
/// and `fit_report.json` into the output directory.
///
/// A fit whose worst split-R-hat reaches 1.1 still writes artifacts (they
/// are needed to diagnose the failure) but returns a convergence error, so
/// the process exit status distinguishes "fit but unconverged".
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutput> {
    let started = std::time::Instant::now();
    let prep = prepare_data(cfg)?;
    let model = build_model(cfg, &prep)?;
    let draws = run_chains(&model, &cfg.sampler)?;
    let conv = convergence_report(&draws);
    let loo = loo_ic(model.log_lik_matrix(draws.flat().view())?.view())?;
    let divergences: usize = draws.stats.iter().map(|s| s.divergences).sum();

    let report = FitReport {
        prior: cfg.prior.cli_name().to_string(),
        n: prep.dataset.n(),
        n_claims_vars: model.n_claims_vars(),
        n_dropped_codes: prep.dropped.len(),
        chains: cfg.sampler.chains,
        warmup: cfg.sampler.warmup,
        samples: cfg.sampler.samples,
        seed: cfg.sampler.seed,
        max_rhat: conv.max_rhat,
        min_ess: conv.min_ess,
        divergences,
        elpd_loo: loo.elpd_loo,
        loo_ic: loo.loo_ic,
        loo_se: loo.se,
        n_bad_k: loo.n_bad_k,
        runtime_s: started.elapsed().as_secs_f64(),
    };

    fs::create_dir_all(&cfg.out)?;
    let draws_path = cfg.out.join("draws.csv");
    draws.write_csv(&draws_path)?;
    let coeffs_path = cfg.out.join("coeffs.csv");
    write_coefficient_summary(&model, &draws, &coeffs_path)?;
    let report_path = cfg.out.join("fit_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    let out = FitOutput { report, draws_path, coeffs_path, report_path };
    if conv.max_rhat >= 1.1 {
        let worst = conv
            .rhat
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| draws.names[i].as_str())
            .unwrap_or("?");
        return Err(Error::Convergence(format!(
            "max split-R-hat {:.3} >= 1.1 (worst: {worst}); artifacts written to {}",
            conv.max_rhat,
            cfg.out.display()
        )));
    }
    Ok(out)
}

/// Posterior mean/sd/95% interval per original-scale coefficient.
fn write_coefficient_summary(model: &Model, draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let flat = draws.flat();
    let s = flat.nrows();
    let mut names: Vec<String> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for r in 0..s {
        let row: Vec<f64> = flat.row(r).to_vec();
        let coefs = model.original_scale_coefficients(&row)?;
        if names.is_empty() {
            names = coefs.iter().map(|(n, _)| n.clone()).collect();
            cols = vec![Vec::with_capacity(s); names.len()];
        }
        for (j, (_, v)) in coefs.into_iter().enumerate() {
            cols[j].push(v);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["coefficient", "mean", "sd", "q025", "q975"])?;
    for (name, col) in names.iter().zip(cols.iter_mut()) {
        let m = mean(col);
        let sd = sample_variance(col).sqrt();
        let lo = quantile(col, 0.025);
        let hi = quantile(col, 0.975);
        w.write_record([
            name.as_str(),
            &format!("{m}"),
            &format!("{sd}"),
            &format!("{lo}"),
            &format!("{hi}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

/// One endpoint's effect estimate as written to `effects.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectRow {
    pub outcome: String,
    pub mean_delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_width: f64,
    pub p0_mean: f64,
    pub p1_mean: f64,
    /// Subjects whose posterior-mean propensity is outside (0.01, 0.99).
    pub n_extreme_pi: usize,
    /// Percent-scale rendering in the house style: `-3.4 (-4.1, -2.7)`.
    pub formatted: String,
}

/// Risk differences ×100 with one decimal: `-3.4 (-4.1, -2.7)`.
pub fn format_effect_cell(mean_delta: f64, ci_low: f64, ci_high: f64) -> String {
    format!(
        "{:.1} ({:.1}, {:.1})",
        100.0 * mean_delta,
        100.0 * ci_low,
        100.0 * ci_high
    )
}

fn effect_row(summary: &CausalSummary) -> EffectRow {
    EffectRow {
        outcome: summary.outcome.clone(),
        mean_delta: summary.mean_delta,
        ci_low: summary.ci_low,
        ci_high: summary.ci_high,
        ci_width: summary.ci_width,
        p0_mean: summary.p0_mean,
        p1_mean: summary.p1_mean,
        n_extreme_pi: summary.n_extreme_pi,
        formatted: format_effect_cell(summary.mean_delta, summary.ci_low, summary.ci_high),
    }
}

fn resolve_endpoints(cfg: &RunConfig, ds: &AnalysisDataset) -> Result<Vec<String>> {
    let endpoints = if cfg.endpoints.is_empty() {
        ds.outcome_names()
    } else {
        cfg.endpoints.clone()
    };
    if endpoints.is_empty() {
        return Err(Error::Validation(
            "registry has no y_* outcome columns and no endpoints were requested".into(),
        ));
    }
    for e in &endpoints {
        if ds.outcome(e).is_none() {
            return Err(Error::Validation(format!(
                "endpoint `{e}` not found in registry (available: {})",
                ds.outcome_names().join(", ")
            )));
        }
    }
    Ok(endpoints)
}

/// Estimate risk differences for each endpoint from a draws file; writes
/// `effects.json`.
pub fn cmd_estimate(cfg: &RunConfig, draws_path: &Path) -> Result<Vec<EffectRow>> {
    let prep = prepare_data(cfg)?;
    let model = build_model(cfg, &prep)?;
    let draws = PosteriorDraws::read_csv(draws_path)?;
    check_layout(&model, &draws)?;
    let endpoints = resolve_endpoints(cfg, &prep.dataset)?;

    let mut rows = Vec::with_capacity(endpoints.len());
    for (k, endpoint) in endpoints.iter().enumerate() {
        let summary = draw_causal(
            &model,
            &prep.dataset,
            &draws,
            endpoint,
            cfg.seed.wrapping_add(k as u64),
        )?;
        rows.push(effect_row(&summary));
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(
        cfg.out.join("effects.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// balance
// ---------------------------------------------------------------------------

/// Summary written to `balance_summary.json` by [`cmd_balance`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub n_covariates: usize,
    /// Weighted: covariates with |mean standardized difference| > 10.
    pub n_mean_outside: usize,
    /// Weighted: covariates whose 95% interval is not inside (−10, 10).
    pub n_interval_outside: usize,
    /// Unweighted covariates with |standardized difference| > 10.
    pub n_raw_outside: usize,
}

/// Posterior covariate balance under fitted-propensity weighting; writes
/// `balance.csv` (one row per covariate) and `balance_summary.json`.
pub fn cmd_balance(cfg: &RunConfig, draws_path: &Path) -> Result<BalanceSummary> {
    let prep = prepare_data(cfg)?;
    let model = build_model(cfg, &prep)?;
    let draws = PosteriorDraws::read_csv(draws_path)?;
    check_layout(&model, &draws)?;

    let weighted = standardized_differences(&model, &prep.dataset, &draws, &BalanceOptions::default())?;
    let raw = unadjusted_standardized_differences(&prep.dataset)?;
    debug_assert_eq!(weighted.rows.len(), raw.len());

    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join("balance.csv"))?;
    w.write_record([
        "covariate",
        "raw_sd",
        "mean_sd",
        "q025",
        "q975",
        "flag_mean",
        "flag_interval",
    ])?;
    let (lo, hi) = weighted.window;
    let mut n_raw_outside = 0usize;
    for (row, (raw_name, raw_sd)) in weighted.rows.iter().zip(&raw) {
        debug_assert_eq!(&row.name, raw_name);
        if raw_sd.abs() > hi {
            n_raw_outside += 1;
        }
        let flag_mean = row.mean_sd <= lo || row.mean_sd >= hi;
        let flag_interval = row.q025 <= lo || row.q975 >= hi;
        w.write_record([
            row.name.as_str(),
            &format!("{raw_sd}"),
            &format!("{}", row.mean_sd),
            &format!("{}", row.q025),
            &format!("{}", row.q975),
            &format!("{flag_mean}"),
            &format!("{flag_interval}"),
        ])?;
    }
    w.flush()?;

    let summary = BalanceSummary {
        n_covariates: weighted.rows.len(),
        n_mean_outside: weighted.n_mean_outside,
        n_interval_outside: weighted.n_interval_outside,
        n_raw_outside,
    };
    fs::write(
        cfg.out.join("balance_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// loo
// ---------------------------------------------------------------------------

/// The `loo.json` record: exactly {elpd_loo, loo_ic, se, n_bad_k}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooRecord {
    pub elpd_loo: f64,
    pub loo_ic: f64,
    pub se: f64,
    pub n_bad_k: usize,
}

/// PSIS-LOO of the propensity likelihood from a draws file; writes `loo.json`.
pub fn cmd_loo(cfg: &RunConfig, draws_path: &Path) -> Result<LooRecord> {
    let prep = prepare_data(cfg)?;
    let model = build_model(cfg, &prep)?;
    let draws = PosteriorDraws::read_csv(draws_path)?;
    check_layout(&model, &draws)?;
    let loo = loo_ic(model.log_lik_matrix(draws.flat().view())?.view())?;
    let record = LooRecord {
        elpd_loo: loo.elpd_loo,
        loo_ic: loo.loo_ic,
        se: loo.se,
        n_bad_k: loo.n_bad_k,
    };
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("loo.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ModelArtifacts {
    name: String,
    fit: FitReport,
    balance: Option<BalanceSummary>,
    effects: Option<Vec<EffectRow>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Render every fitted model found under `dir` (one subdirectory per model,
/// each holding `fit_report.json` and optionally `balance_summary.json` /
/// `effects.json`) into a combined markdown report, written to `report.md`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut models: Vec<ModelArtifacts> = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for sub in entries {
        let fit_path = sub.join("fit_report.json");
        if !fit_path.is_file() {
            continue;
        }
        let fit: FitReport = read_json(&fit_path)?;
        let balance = sub
            .join("balance_summary.json")
            .is_file()
            .then(|| read_json(&sub.join("balance_summary.json")))
            .transpose()?;
        let effects = sub
            .join("effects.json")
            .is_file()
            .then(|| read_json(&sub.join("effects.json")))
            .transpose()?;
        let name = sub
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| fit.prior.clone());
        models.push(ModelArtifacts { name, fit, balance, effects });
    }
    if models.is_empty() {
        return Err(Error::Validation(format!(
            "no fitted models under {} (expected subdirectories with fit_report.json)",
            dir.display()
        )));
    }

    let mut md = String::new();
    md.push_str("# Propensity model comparison\n\n");
    md.push_str(
        "| Model | Claims vars | LOO-IC (SE) | Means outside (-10, 10) | CIs outside (-10, 10) |\n",
    );
    md.push_str("|---|---:|---:|---:|---:|\n");
    for m in &models {
        let (means_out, cis_out) = m
            .balance
            .as_ref()
            .map(|b| (b.n_mean_outside.to_string(), b.n_interval_outside.to_string()))
            .unwrap_or_else(|| ("-".into(), "-".into()));
        md.push_str(&format!(
            "| {} | {} | {:.1} ({:.1}) | {} | {} |\n",
            m.name, m.fit.n_claims_vars, m.fit.loo_ic, m.fit.loo_se, means_out, cis_out,
        ));
    }

    let endpoints: Vec<String> = models
        .iter()
        .filter_map(|m| m.effects.as_ref())
        .flat_map(|rows| rows.iter().map(|r| r.outcome.clone()))
        .fold(Vec::new(), |mut acc, e| {
            if !acc.contains(&e) {
                acc.push(e);
            }
            acc
        });
    if !endpoints.is_empty() {
        md.push_str("\n# Risk differences ×100 (95% credible intervals)\n\n");
        md.push_str("| Model |");
        for e in &endpoints {
            md.push_str(&format!(" {e} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(endpoints.len()));
        md.push('\n');
        for m in &models {
            md.push_str(&format!("| {} |", m.name));
            for e in &endpoints {
                let cell = m
                    .effects
                    .as_ref()
                    .and_then(|rows| rows.iter().find(|r| &r.outcome == e))
                    .map(|r| r.formatted.clone())
                    .unwrap_or_else(|| "-".into());
                md.push_str(&format!(" {cell} |"));
            }
            md.push('\n');
        }
    }

    md.push_str("\n# Fit diagnostics\n\n");
    md.push_str("| Model | n | Chains | Max R-hat | Min ESS | Divergences | Runtime (s) |\n");
    md.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for m in &models {
        md.push_str(&format!(
            "| {} | {} | {}x{} | {:.3} | {:.0} | {} | {:.1} |\n",
            m.name,
            m.fit.n,
            m.fit.chains,
            m.fit.samples,
            m.fit.max_rhat,
            m.fit.min_ess,
            m.fit.divergences,
            m.fit.runtime_s,
        ));
    }

    fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}
