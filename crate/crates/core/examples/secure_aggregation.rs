//! Two-server additive sharing with a cohort gate.
//!
//! `cargo run --example secure_aggregation`

use fedstats::aggregation::{decode_share, encode_share, split_values, Aggregator, Modulus, Publication};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(clients: usize, min_cohort: u64) -> Publication {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bins = 4;
    let mut agg = Aggregator::new(Modulus::STANDARD);
    agg.open("demo", min_cohort, bins).unwrap();
    let mut truth = vec![0u64; bins];
    for _ in 0..clients {
        let bits: Vec<u32> = (0..bins).map(|_| rng.random_range(0..2)).collect();
        for (t, b) in truth.iter_mut().zip(&bits) {
            *t += *b as u64;
        }
        let (a, b) = split_values(&bits, "demo", Modulus::STANDARD, &mut rng).unwrap();
        // shares travel as bytes; each server alone sees uniform noise
        let a = decode_share(&encode_share(&a)).unwrap();
        agg.submit((a, b)).unwrap();
    }
    let p = agg.close_and_publish("demo").unwrap();
    println!("true sums {truth:?}");
    p
}

fn main() {
    let p = run(500, 100);
    println!("500 clients, threshold 100: {}", serde_json::to_string(&p).unwrap());
    let p = run(50, 100);
    println!("50 clients, threshold 100:  {} (payload {} values)", serde_json::to_string(&p).unwrap(), p.payload_len());
}
