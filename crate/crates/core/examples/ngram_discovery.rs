//! Adaptive n-gram discovery over a synthetic keyboard fleet.
//!
//! `cargo run --release --example ngram_discovery [devices] [seed]`

use fedstats::engine::synthetic::SimulationConfig;
use fedstats::engine::{phrases_csv, run_discovery};

fn main() {
    let mut args = std::env::args().skip(1);
    let devices: usize = args.next().map_or(100_000, |s| s.parse().expect("device count"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));

    let mut cfg = SimulationConfig::reference(seed);
    cfg.fleet.devices = devices;
    let (mut engine, mut fleet, truth) = cfg.build().unwrap();
    let state = run_discovery(&cfg.plan, &mut engine, &mut fleet).unwrap();

    println!("status {:?} after {} round(s); ledger {:?}", state.status, state.round, state.ledger.basic());
    for (i, outcome) in state.history.iter().enumerate() {
        if let Some(r) = outcome.published() {
            println!(
                "round {}: {} reports, certified eps {:.3}",
                i + 1,
                r.cohort_size,
                r.aggregate_bound.epsilon
            );
        }
    }
    for len in 1..=cfg.plan.max_length {
        let top: Vec<String> = truth.ranked(len).into_iter().take(5).map(|(p, c)| format!("{p} ({c})")).collect();
        println!("true top {len}-grams: {}", top.join(", "));
        println!("found {len}-grams:    {}", state.frequent(len).join(", "));
    }
    print!("{}", phrases_csv(&state));
}
