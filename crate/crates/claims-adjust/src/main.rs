//! `claims-adjust` — propensity-weighted risk differences from claims files.
//!
//! Thin argument-parsing shell over [`claims_adjust::cli`]; every subcommand
//! body lives in the library so the pipeline is testable in-process.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use claims_adjust::cli::{
    cmd_balance, cmd_estimate, cmd_fit, cmd_loo, cmd_report, cmd_simulate, RunConfig,
};
use claims_adjust::error::exit_code;
use claims_adjust::model::PriorFamily;
use claims_adjust::sampler::SamplerConfig;
use claims_adjust::Result;

#[derive(Parser)]
#[command(
    name = "claims-adjust",
    about = "Bayesian propensity-score weighting for sparse claims covariates",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort with known ground truth.
    Simulate {
        /// Preset name (full-scale, confounded-small, sparse-truth,
        /// reference) or path to a ScenarioSpec JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for claims.csv, registry.csv, truth.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a propensity model; writes draws.csv, coeffs.csv, fit_report.json.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 1000)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Worker threads for chain-level parallelism (0 = one per chain).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Estimate risk differences per endpoint from a draws file.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// Draws CSV produced by `fit` with the same data options.
        #[arg(long)]
        draws: PathBuf,
        /// Endpoint column (repeatable); defaults to every y_* column.
        #[arg(long = "endpoint")]
        endpoints: Vec<String>,
    },
    /// Covariate balance under fitted-propensity weighting.
    Balance {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        draws: PathBuf,
    },
    /// PSIS-LOO of the propensity likelihood.
    Loo {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        draws: PathBuf,
    },
    /// Combine fitted-model artifacts under a directory into report.md.
    Report {
        /// Directory holding one subdirectory per fitted model.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Claims CSV: subject_id,code rows.
    #[arg(long)]
    claims: PathBuf,
    /// Registry CSV: subject_id,treatment,baseline…,y_… columns.
    #[arg(long)]
    registry: PathBuf,
    /// Comorbidity map CSV (prefix,category[,weight]); needed by elix-*.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, value_parser = PriorFamily::from_cli_name)]
    prior: PriorFamily,
    /// Keep code columns carried by at least this many subjects.
    #[arg(long, default_value_t = 10)]
    threshold: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for this command's artifacts.
    #[arg(long)]
    out: PathBuf,
}

impl DataArgs {
    fn into_config(self, sampler: SamplerConfig) -> RunConfig {
        RunConfig {
            claims: self.claims,
            registry: self.registry,
            map: self.map,
            out: self.out,
            prior: self.prior,
            threshold: self.threshold,
            sampler,
            endpoints: Vec::new(),
            seed: self.seed,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { scenario, seed, out } => {
            let sim = cmd_simulate(&scenario, seed, &out)?;
            println!(
                "wrote {} cohort: n={} codes={} -> {}",
                sim.scenario,
                sim.n,
                sim.n_codes,
                out.display()
            );
        }
        Cmd::Fit { data, chains, warmup, samples, threads } => {
            if threads > 0 {
                // Ignore failure: the global pool can only be set once.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
            let sampler = SamplerConfig {
                chains,
                warmup,
                samples,
                seed: data.seed,
                ..Default::default()
            };
            let cfg = data.into_config(sampler);
            let fit = cmd_fit(&cfg)?;
            let r = &fit.report;
            println!(
                "fit {}: n={} claims_vars={} max_rhat={:.3} min_ess={:.0} divergences={} \
                 loo_ic={:.1} ({:.1}) [{:.1}s]",
                r.prior,
                r.n,
                r.n_claims_vars,
                r.max_rhat,
                r.min_ess,
                r.divergences,
                r.loo_ic,
                r.loo_se,
                r.runtime_s
            );
            println!("artifacts: {}", cfg.out.display());
        }
        Cmd::Estimate { data, draws, endpoints } => {
            let mut cfg = data.into_config(SamplerConfig::default());
            cfg.endpoints = endpoints;
            let rows = cmd_estimate(&cfg, &draws)?;
            for row in &rows {
                println!("{}: {}", row.outcome, row.formatted);
            }
            println!("wrote {}", cfg.out.join("effects.json").display());
        }
        Cmd::Balance { data, draws } => {
            let cfg = data.into_config(SamplerConfig::default());
            let summary = cmd_balance(&cfg, &draws)?;
            println!(
                "balance: {} covariates, {} means outside (-10,10), {} intervals outside, \
                 {} unweighted outside",
                summary.n_covariates,
                summary.n_mean_outside,
                summary.n_interval_outside,
                summary.n_raw_outside
            );
            println!("wrote {}", cfg.out.join("balance.csv").display());
        }
        Cmd::Loo { data, draws } => {
            let cfg = data.into_config(SamplerConfig::default());
            let loo = cmd_loo(&cfg, &draws)?;
            println!(
                "elpd_loo={:.2} loo_ic={:.2} se={:.2} n_bad_k={}",
                loo.elpd_loo, loo.loo_ic, loo.se, loo.n_bad_k
            );
            println!("wrote {}", cfg.out.join("loo.json").display());
        }
        Cmd::Report { out } => {
            let md = cmd_report(&out)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
