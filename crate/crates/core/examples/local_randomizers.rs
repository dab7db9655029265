//! Privatize one-hot reports with both randomizers and debias the sum.
//!
//! `cargo run --example local_randomizers`

use fedstats::ldp::{
    debias, encode_one_hot, exact_privacy_ratio, randomize_with, sum_reports, LocalEpsilon, NeighborModel, OheMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let eps0 = LocalEpsilon::new(3f64.ln()).unwrap();
    let n = 2000u64;
    let domain = 8;
    // 200 clients hold item 0, the rest spread over items 1..8
    let items: Vec<usize> = (0..n as usize).map(|i| if i < 200 { 0 } else { 1 + i % (domain - 1) }).collect();

    for mode in [OheMode::Asymmetric, OheMode::Symmetric] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let reports: Vec<_> = items
            .iter()
            .map(|&i| randomize_with(mode, &encode_one_hot(i, domain).unwrap(), eps0, &mut rng).unwrap())
            .collect();
        let sums = sum_reports(&reports, domain);
        let hist = debias(mode, &sums, n, eps0).unwrap();
        let ratio = exact_privacy_ratio(mode, mode.native_model(), eps0).unwrap();
        println!("{} (worst-case privacy loss {ratio:.3} under its native neighbour model)", mode.as_str());
        for cell in 0..domain {
            let truth = items.iter().filter(|&&i| i == cell).count();
            println!(
                "  item {cell}: true {truth:>4}  estimate {:>8.1} ± {:.1}",
                hist.estimates[cell],
                hist.stderr(cell)
            );
        }
    }
    let cross = exact_privacy_ratio(OheMode::Symmetric, NeighborModel::Replacement, eps0).unwrap();
    println!("symmetric under replacement: privacy loss {cross:.3} (= 2 eps0)");
}
