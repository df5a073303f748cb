//! The whole pipeline through the command layer: simulate a cohort, fit two
//! propensity models, estimate effects, check balance, and render the
//! combined report — exactly what the CLI binary does, in-process.
//!
//! Run with: cargo run --example full_pipeline

use claims_adjust::cli::{
    cmd_balance, cmd_estimate, cmd_fit, cmd_loo, cmd_report, cmd_simulate, RunConfig,
};
use claims_adjust::model::PriorFamily;
use claims_adjust::sampler::SamplerConfig;

fn main() {
    let root = std::env::temp_dir().join("claims-adjust-example-pipeline");
    let _ = std::fs::remove_dir_all(&root);

    let cohort = root.join("cohort");
    let sim = cmd_simulate("confounded-small", 3, &cohort).unwrap();
    println!("simulated {}: n={} codes={}", sim.scenario, sim.n, sim.n_codes);

    for prior in [PriorFamily::T5FourDigit, PriorFamily::Unadjusted] {
        let mut cfg = RunConfig::new(
            cohort.join("claims.csv"),
            cohort.join("registry.csv"),
            root.join(prior.cli_name()),
            prior,
        );
        cfg.sampler = SamplerConfig { chains: 4, warmup: 800, samples: 500, seed: 11, ..Default::default() };
        cfg.seed = 11;

        let fit = cmd_fit(&cfg).unwrap();
        println!(
            "fit {}: max rhat {:.3}, loo-ic {:.1}, {:.1}s",
            prior.cli_name(),
            fit.report.max_rhat,
            fit.report.loo_ic,
            fit.report.runtime_s
        );
        let effects = cmd_estimate(&cfg, &fit.draws_path).unwrap();
        for row in &effects {
            println!("  {}: {}", row.outcome, row.formatted);
        }
        let balance = cmd_balance(&cfg, &fit.draws_path).unwrap();
        println!(
            "  balance: {} -> {} covariates outside the window",
            balance.n_raw_outside, balance.n_mean_outside
        );
        cmd_loo(&cfg, &fit.draws_path).unwrap();
    }

    let md = cmd_report(&root).unwrap();
    println!("\n--- report.md -------------------------------------------\n");
    println!("{md}");
    println!("artifacts under {}", root.display());
}
