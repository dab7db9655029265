use fedstats::aggregation::{decode_share, encode_share, split_values, Aggregator, Modulus, Publication};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn publish_batch(reports: &[Vec<u32>], d: usize, m: u64, q: Modulus, rng: &mut ChaCha8Rng) -> Publication {
    let mut agg = Aggregator::new(q);
    agg.open("r", m, d).unwrap();
    for r in reports {
        let (a, b) = split_values(r, "r", q, rng).unwrap();
        // shares travel over the wire
        let a = decode_share(&encode_share(&a)).unwrap();
        let b = decode_share(&encode_share(&b)).unwrap();
        agg.submit((a, b)).unwrap();
    }
    agg.close_and_publish("r").unwrap()
}

fn plain_sum(reports: &[Vec<u32>], d: usize) -> Vec<u64> {
    (0..d).map(|j| reports.iter().map(|r| u64::from(r[j])).sum()).collect()
}

fn bits_of(code: u64, d: usize) -> Vec<u32> {
    (0..d).map(|j| ((code >> j) & 1) as u32).collect()
}

fn expect_sum(p: Publication, want: Vec<u64>) {
    match p {
        Publication::Published { counts, .. } => assert_eq!(counts, want),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_ordered_combination_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=8usize {
        for d in 1..=4usize {
            if n * d > 12 {
                continue;
            }
            for code in 0u64..(1 << (n * d)) {
                let reports: Vec<Vec<u32>> = (0..n).map(|i| bits_of(code >> (i * d), d)).collect();
                let p = publish_batch(&reports, d, n as u64, Modulus::STANDARD, &mut rng);
                expect_sum(p, plain_sum(&reports, d));
            }
        }
    }
}

#[test]
fn small_modulus_still_reconstructs() {
    let q = Modulus::new(11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for code in 0u64..(1 << 12) {
        let reports: Vec<Vec<u32>> = (0..4).map(|i| bits_of(code >> (i * 3), 3)).collect();
        expect_sum(publish_batch(&reports, 3, 4, q, &mut rng), plain_sum(&reports, 3));
    }
}

#[test]
fn order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let d = rng.random_range(1..=4);
        let mut reports: Vec<Vec<u32>> = (0..8).map(|_| bits_of(rng.random(), d)).collect();
        let first = publish_batch(&reports, d, 8, Modulus::STANDARD, &mut rng);
        reports.shuffle(&mut rng);
        assert_eq!(publish_batch(&reports, d, 8, Modulus::STANDARD, &mut rng), first);
    }
}

#[test]
fn random_large_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(100..1500);
        let d = rng.random_range(1..64);
        let reports: Vec<Vec<u32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0..2)).collect()).collect();
        expect_sum(
            publish_batch(&reports, d, n as u64, Modulus::STANDARD, &mut rng),
            plain_sum(&reports, d),
        );
    }
}

#[test]
fn gate_hides_everything_below_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 0..10u64 {
        let reports: Vec<Vec<u32>> = (0..n).map(|_| vec![1, 0, 1]).collect();
        let p = publish_batch(&reports, 3, 10, Modulus::STANDARD, &mut rng);
        assert_eq!(p.payload_len(), 0);
        assert!(!serde_json::to_string(&p).unwrap().contains("counts"));
    }
}

proptest! {
    #[test]
    fn wire_round_trip(id in "[a-z.]{0,20}", coords in proptest::collection::vec(any::<u32>(), 0..50), b in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sa, sb) = split_values(&coords, &id, Modulus::STANDARD, &mut rng).unwrap();
        let s = if b { sa } else { sb };
        prop_assert_eq!(decode_share(&encode_share(&s)).unwrap(), s);
    }

    #[test]
    fn shares_reconstruct(coords in proptest::collection::vec(any::<u32>(), 1..50), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = split_values(&coords, "r", Modulus::STANDARD, &mut rng).unwrap();
        for ((x, y), c) in a.coords.iter().zip(&b.coords).zip(&coords) {
            prop_assert_eq!(x.wrapping_add(*y), *c);
        }
    }
}
