//! Generate a synthetic claims cohort with known ground truth.
//!
//! Run with: cargo run --example simulate_cohort

use claims_adjust::synth::{generate_cohort, true_effect_oracle, write_cohort, ScenarioSpec};
use claims_adjust::util::mean;

fn main() {
    let spec = ScenarioSpec::confounded_small(7);
    let (ds, truth) = generate_cohort(&spec).unwrap();

    let treated = ds.treatment.iter().filter(|&&x| x == 1).count();
    println!("scenario `{}`: n={} codes={}", spec.name, ds.n(), ds.p());
    println!("treated fraction: {:.3}", treated as f64 / ds.n() as f64);

    // Code prevalence spread — sparse indicator columns by construction.
    let mut prevs: Vec<f64> = (0..ds.p())
        .map(|j| ds.claims.column(j).sum() / ds.n() as f64)
        .collect();
    prevs.sort_by(f64::total_cmp);
    println!(
        "code prevalence: min {:.3}, median {:.3}, max {:.3}",
        prevs[0],
        prevs[ds.p() / 2],
        prevs[ds.p() - 1]
    );

    // The generator emits the truth alongside the cohort: per-subject true
    // propensities and potential outcomes per endpoint.
    println!(
        "true propensity: mean {:.3}, range ({:.3}, {:.3})",
        mean(&truth.true_propensity),
        truth.true_propensity.iter().cloned().fold(f64::INFINITY, f64::min),
        truth.true_propensity.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    for ep in &truth.endpoints {
        let delta = true_effect_oracle(&truth, &ep.name).unwrap();
        println!("endpoint {}: true risk difference = {:.4}", ep.name, delta);
    }

    let dir = std::env::temp_dir().join("claims-adjust-example-cohort");
    write_cohort(&ds, &truth, &dir).unwrap();
    println!("\nwrote claims.csv / registry.csv / truth.json under {}", dir.display());
}
