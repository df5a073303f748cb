//! Fit a propensity model with HMC and inspect convergence diagnostics.
//!
//! Run with: cargo run --example fit_propensity

use claims_adjust::ingest::filter_by_prevalence;
use claims_adjust::model::{Model, PriorFamily};
use claims_adjust::sampler::{convergence_report, run_chains, SamplerConfig};
use claims_adjust::synth::{generate_cohort, ScenarioSpec};
use claims_adjust::util::mean;

fn main() {
    let (ds, _truth) = generate_cohort(&ScenarioSpec::confounded_small(11)).unwrap();
    let (ds, dropped) = filter_by_prevalence(&ds, 10).unwrap();
    println!(
        "cohort: n={} baselines={} codes={} ({} dropped by prevalence filter)",
        ds.n(),
        ds.q(),
        ds.p(),
        dropped.len()
    );

    let model = Model::new(PriorFamily::T5FourDigit, &ds, None).unwrap();
    let cfg = SamplerConfig { chains: 4, warmup: 800, samples: 500, seed: 3, ..Default::default() };
    println!(
        "sampling {} chains x ({} warmup + {} draws) over {} parameters...",
        cfg.chains,
        cfg.warmup,
        cfg.samples,
        model.layout().dim()
    );
    let t0 = std::time::Instant::now();
    let draws = run_chains(&model, &cfg).unwrap();
    println!("done in {:.1}s", t0.elapsed().as_secs_f64());

    let conv = convergence_report(&draws);
    println!("max split-R-hat = {:.3}  min ESS = {:.0}", conv.max_rhat, conv.min_ess);
    for stat in &draws.stats {
        println!(
            "  chain: step size {:.4}, accept rate {:.2}, divergences {}",
            stat.step_size, stat.accept_rate, stat.divergences
        );
    }

    // Original-scale coefficient summaries for the strongest effects.
    let flat = draws.flat();
    let names = model
        .original_scale_coefficients(&flat.row(0).to_vec())
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect::<Vec<_>>();
    let mut means = vec![0.0; names.len()];
    let mut cols = vec![Vec::with_capacity(flat.nrows()); names.len()];
    for r in 0..flat.nrows() {
        let coefs = model.original_scale_coefficients(&flat.row(r).to_vec()).unwrap();
        for (j, (_, v)) in coefs.into_iter().enumerate() {
            cols[j].push(v);
        }
    }
    for (j, col) in cols.iter().enumerate() {
        means[j] = mean(col);
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| means[b].abs().total_cmp(&means[a].abs()));
    println!("\nlargest posterior-mean coefficients:");
    for &j in order.iter().take(8) {
        println!("  {:<12} {:+.3}", names[j], means[j]);
    }
}
