//! Compare prior families on a sparse-truth cohort: predictive fit (LOO-IC)
//! and the width of the causal interval they buy.
//!
//! Run with: cargo run --example compare_priors

use claims_adjust::causal::draw_causal;
use claims_adjust::diagnostics::loo_ic;
use claims_adjust::ingest::{build_hierarchy, filter_by_prevalence};
use claims_adjust::model::{Model, PriorFamily};
use claims_adjust::sampler::{convergence_report, run_chains, SamplerConfig};
use claims_adjust::synth::{generate_cohort, ScenarioSpec};

fn main() {
    // Sparse truth: a couple of strong code groups matter, everything else
    // is noise. This is where shrinkage priors earn their keep.
    let (ds, _truth) = generate_cohort(&ScenarioSpec::sparse_truth(60003)).unwrap();
    let (ds, _) = filter_by_prevalence(&ds, 10).unwrap();
    let hierarchy = build_hierarchy(&ds).unwrap();
    println!(
        "cohort: n={} codes={} ({} groups, {} singletons)\n",
        ds.n(),
        ds.p(),
        hierarchy.stats().n_groups,
        hierarchy.stats().n_singletons
    );

    println!(
        "{:<14} {:>10} {:>8} {:>10} {:>9}",
        "prior", "loo-ic", "(se)", "ci width", "max-rhat"
    );
    for family in [
        PriorFamily::T5FourDigit,
        PriorFamily::Horseshoe,
        PriorFamily::Hierarchical,
        PriorFamily::Unadjusted,
    ] {
        let hier =
            (family == PriorFamily::Hierarchical).then_some(&hierarchy);
        let model = Model::new(family, &ds, hier).unwrap();
        let cfg = SamplerConfig { chains: 4, warmup: 1000, samples: 1000, seed: 17, ..Default::default() };
        let draws = run_chains(&model, &cfg).unwrap();
        let conv = convergence_report(&draws);
        let loo = loo_ic(model.log_lik_matrix(draws.flat().view()).unwrap().view()).unwrap();
        let effect = draw_causal(&model, &ds, &draws, "y_falsify", 23).unwrap();
        println!(
            "{:<14} {:>10.1} {:>8.1} {:>10.4} {:>9.3}",
            family.cli_name(),
            loo.loo_ic,
            loo.se,
            effect.ci_width,
            conv.max_rhat
        );
    }
    println!(
        "\ntypical ordering on sparse truth: horseshoe wins LOO-IC by \
         shrinking the noise\ncodes; the hierarchical prior narrows the \
         causal interval by pooling member codes.\n(the unadjusted interval \
         is narrowest of all — and wrong: it ignores confounding.)"
    );
}
