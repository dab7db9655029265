//! Check and charge queries against the keyboard budget tables.
//!
//! `cargo run --example budget_accountant`

use fedstats::accountant::{local_loss_bound, Accountant, BudgetConfig, QueryCost};
use fedstats::ldp::{LocalEpsilon, OheMode};

fn main() {
    let config = BudgetConfig::keyboard_example();
    let bound = local_loss_bound(&config);
    println!("local loss bound: {bound:?}");

    let mut acc = Accountant::new(config).unwrap();
    let eps = |v: f64| LocalEpsilon::new(v).unwrap();
    let delta = 1e-7;
    let m = QueryCost::closed_form_cohort(eps(5.0), 0.3, delta).unwrap();
    let query = |field: &str, e0: f64, e: f64| QueryCost {
        local_epsilon: eps(e0),
        aggregate_epsilon: e,
        aggregate_delta: delta,
        fields_accessed: [field.to_string()].into(),
        min_cohort: m,
        mode: OheMode::Asymmetric,
    };
    for (label, q) in [
        ("bucketed age, eps 0.4", query("age", 2.0, 0.4)),
        ("n-gram, eps 0.3", query("ngram", 5.0, 0.3)),
        ("n-gram again, eps 0.1", query("ngram", 5.0, 0.1)),
    ] {
        let d = acc.check_and_charge(&q).unwrap();
        println!("{label:<24} -> {}", serde_json::to_string(&d).unwrap());
    }
    let s = acc.snapshot();
    println!(
        "analysis used: eps {} over {} report(s); delta {}",
        s.analysis.used_epsilon, s.analysis.used_reports, s.used_delta
    );
}
