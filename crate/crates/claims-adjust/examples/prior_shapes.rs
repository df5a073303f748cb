//! Shape facts for the prior families: where each one puts its mass.
//!
//! Run with: cargo run --example prior_shapes

use claims_adjust::priors::{interval_mass, sample_prior, Aux, PriorSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // The horseshoe concentrates half its mass in a narrow slab around zero
    // yet keeps tails heavy enough to leave real signals alone.
    let hs = PriorSpec::horseshoe_default();
    for (lo, hi) in [(-0.4, 0.4), (-11.0, 11.0)] {
        let m = interval_mass(&hs, &Aux::None, lo, hi).unwrap();
        println!(
            "horseshoe mass in ({lo:>5.1}, {hi:>4.1}) = {:.3} (mc se {:.4})",
            m.mass,
            m.mc_se.unwrap_or(0.0)
        );
    }

    // Laplace(0, 0.5): member codes sit within ±1 of their group mean with
    // probability 1 − e⁻² ≈ 0.86 — tight coupling to the group.
    let lap = PriorSpec::HierarchicalLaplace { scale: 0.5 };
    let m = interval_mass(&lap, &Aux::GroupMean(0.0), -1.0, 1.0).unwrap();
    println!("laplace(0, 0.5) mass within ±1 of location = {:.4}", m.mass);

    // Weakly informative t₅(0, 2.5) for coefficients, N(0, 10) intercept.
    let t5 = PriorSpec::weakly_informative();
    let m = interval_mass(&t5, &Aux::None, -2.5, 2.5).unwrap();
    println!("t5(0, 2.5) mass in ±2.5 (one scale)        = {:.4}", m.mass);

    let intercept = PriorSpec::intercept_default();
    let m = interval_mass(&intercept, &Aux::None, -19.6, 19.6).unwrap();
    println!("N(0, 10) mass in ±19.6 (central 95%)       = {:.4}", m.mass);

    // Sampled tail comparison: fraction of |draw| > 5 under each family.
    println!("\ntail mass beyond |5| from 200k draws:");
    for (name, spec) in [
        ("normal(0,10)", PriorSpec::intercept_default()),
        ("t5(0,2.5)", PriorSpec::weakly_informative()),
        ("horseshoe", PriorSpec::horseshoe_default()),
    ] {
        let draws = sample_prior(&spec, &Aux::None, 200_000, &mut rng).unwrap();
        let tail = draws.iter().filter(|v| v.abs() > 5.0).count() as f64 / draws.len() as f64;
        println!("  {name:<13} {tail:.4}");
    }
}
