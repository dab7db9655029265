//! Certified aggregate epsilon as the cohort grows.
//!
//! `cargo run --release --example amplification_curve`

use fedstats::amplification::{amplification_curve, certify, curve_to_csv, min_cohort_size};
use fedstats::ldp::{LocalEpsilon, NeighborModel, OheMode};

fn main() {
    let delta = 1e-6;
    let rows = amplification_curve(&[1.0, 3.0, 5.0], &[1000, 5000, 10_000, 100_000, 1_000_000], delta, false).unwrap();
    print!("{}", curve_to_csv(&rows));

    for (eps0, target) in [(3.0, 0.5), (5.0, 0.3)] {
        let le = LocalEpsilon::new(eps0).unwrap();
        let m = min_cohort_size(le, target, delta, NeighborModel::Replacement).unwrap();
        println!("eps0 = {eps0}: smallest cohort certifying {target} is {m}");
    }

    let le = LocalEpsilon::new(5.0).unwrap();
    for mode in [OheMode::Asymmetric, OheMode::Symmetric] {
        match certify(mode, le, 10_000, delta).unwrap() {
            Some(b) => println!("{} at n = 10000, eps0 = 5: ({:.4}, {delta})", mode.as_str(), b.epsilon),
            None => println!("{} at n = 10000, eps0 = 5: nothing certifiable", mode.as_str()),
        }
    }
}
