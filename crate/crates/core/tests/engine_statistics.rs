use std::sync::Arc;

use fedstats::engine::synthetic::{default_plan, trust_for_plan, SyntheticFleet};
use fedstats::engine::{first_recipe, Engine};
use fedstats::ldp::OheMode;

#[test]
fn estimates_track_truth_within_five_stderr() {
    let plan = default_plan();
    let trust = Arc::new(trust_for_plan(&plan, OheMode::Symmetric));
    let recipe = first_recipe(&plan).unwrap();
    let (mut inside, mut cells) = (0u64, 0u64);
    for seed in 0..200 {
        let (mut fleet, truth) = SyntheticFleet::new(10_000, seed).build(trust.clone());
        let outcome = Engine::new(trust.clone()).run_round(&recipe, &mut fleet).unwrap();
        let r = outcome.published().unwrap();
        for (bin, label) in r.labels.iter().enumerate() {
            let f = truth.count(label) as f64;
            cells += 1;
            if (r.estimates()[bin] - f).abs() <= 5.0 * r.stderr[bin] {
                inside += 1;
            }
        }
    }
    let frac = inside as f64 / cells as f64;
    assert!(frac >= 0.99, "{inside}/{cells}");
}
