//! Covariate balance before and after propensity weighting.
//!
//! Run with: cargo run --example balance_table

use claims_adjust::causal::{
    standardized_differences, unadjusted_standardized_differences, BalanceOptions,
};
use claims_adjust::ingest::filter_by_prevalence;
use claims_adjust::model::{Model, PriorFamily};
use claims_adjust::sampler::{run_chains, SamplerConfig};
use claims_adjust::synth::{generate_cohort, ScenarioSpec};

fn main() {
    let (ds, _truth) = generate_cohort(&ScenarioSpec::confounded_small(19)).unwrap();
    let (ds, _) = filter_by_prevalence(&ds, 10).unwrap();

    let model = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
    let cfg = SamplerConfig { chains: 4, warmup: 800, samples: 500, seed: 2, ..Default::default() };
    let draws = run_chains(&model, &cfg).unwrap();

    let raw = unadjusted_standardized_differences(&ds).unwrap();
    let weighted = standardized_differences(&model, &ds, &draws, &BalanceOptions::default()).unwrap();

    // |standardized difference| < 10 is the conventional "balanced" window.
    let raw_outside = raw.iter().filter(|(_, sd)| sd.abs() > 10.0).count();
    println!("covariates with |standardized difference| > 10:");
    println!("  unweighted: {raw_outside}");
    println!("  weighted:   {} (posterior mean)", weighted.n_mean_outside);
    println!("  weighted:   {} (95% interval not inside the window)\n", weighted.n_interval_outside);

    // The worst offenders before weighting, with their weighted counterparts.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].1.abs().total_cmp(&raw[a].1.abs()));
    println!(
        "{:<12} {:>10} {:>10} {:>18}",
        "covariate", "raw", "weighted", "weighted 95% int"
    );
    for &j in order.iter().take(10) {
        let row = &weighted.rows[j];
        println!(
            "{:<12} {:>10.1} {:>10.1}   ({:>6.1}, {:>6.1})",
            row.name, raw[j].1, row.mean_sd, row.q025, row.q975
        );
    }
}
