//! Two-server additive secret sharing with batch windows and a minimum
//! cohort gate.
//!
//! Each device splits its report into two shares that are individually
//! uniform. Each server only ever holds a running sum per window; the
//! published aggregate is the coordinatewise sum of both servers' totals,
//! and nothing is released below the cohort threshold.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ldp::PrivatizedReport;

/// Share arithmetic modulus. Production uses `2^32`; tests may shrink it to
/// exercise wraparound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modulus(u64);

impl Modulus {
    pub const STANDARD: Modulus = Modulus(1 << 32);

    pub fn new(q: u64) -> Result<Self, AggregationError> {
        if (2..=1 << 32).contains(&q) {
            Ok(Self(q))
        } else {
            Err(AggregationError::BadModulus(q))
        }
    }

    pub fn value(self) -> u64 {
        self.0
    }

    fn add(self, a: u32, b: u32) -> u32 {
        if self == Self::STANDARD {
            return a.wrapping_add(b);
        }
        ((u64::from(a) + u64::from(b)) % self.0) as u32
    }

    fn sub(self, a: u32, b: u32) -> u32 {
        if self == Self::STANDARD {
            return a.wrapping_sub(b);
        }
        ((u64::from(a) + self.0 - u64::from(b)) % self.0) as u32
    }
}

impl Default for Modulus {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ServerSlot {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareVector {
    pub recipe_id: String,
    pub slot: ServerSlot,
    pub coords: Vec<u32>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("modulus {0} outside [2, 2^32]")]
    BadModulus(u64),
    #[error("report coordinate {0} does not fit the modulus")]
    CoordinateTooLarge(u64),
    #[error("share for {got} sent to window {expected}")]
    RecipeMismatch { expected: String, got: String },
    #[error("share for slot {got:?} sent to server {expected:?}")]
    SlotMismatch { expected: ServerSlot, got: ServerSlot },
    #[error("share has {got} coordinates, window expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no open window for recipe {0}")]
    NoWindow(String),
    #[error("window for recipe {0} already open")]
    WindowExists(String),
    #[error("servers disagree on received count: {a} vs {b}")]
    ReceivedMismatch { a: u64, b: u64 },
    #[error("aggregate coordinate {index} = {value} exceeds received {received}")]
    Corrupt { index: usize, value: u64, received: u64 },
    #[error("wire format: {0}")]
    Wire(String),
}

/// Splits a 0/1 report into `(A, B)` with `A` uniform and `A + B ≡ report`.
pub fn split<R: Rng + ?Sized>(
    report: &PrivatizedReport,
    recipe_id: &str,
    modulus: Modulus,
    rng: &mut R,
) -> (ShareVector, ShareVector) {
    let bits: Vec<u32> = report.bits().iter().map(|&b| u32::from(b)).collect();
    split_values(&bits, recipe_id, modulus, rng).expect("bits fit any modulus >= 2")
}

/// Splits arbitrary residues; used for reports and in tests.
pub fn split_values<R: Rng + ?Sized>(
    values: &[u32],
    recipe_id: &str,
    modulus: Modulus,
    rng: &mut R,
) -> Result<(ShareVector, ShareVector), AggregationError> {
    let mut a = Vec::with_capacity(values.len());
    let mut b = Vec::with_capacity(values.len());
    for &v in values {
        if u64::from(v) >= modulus.0 {
            return Err(AggregationError::CoordinateTooLarge(u64::from(v)));
        }
        let r = if modulus == Modulus::STANDARD {
            rng.random::<u32>()
        } else {
            rng.random_range(0..modulus.0) as u32
        };
        a.push(r);
        b.push(modulus.sub(v, r));
    }
    let mk = |slot, coords| ShareVector {
        recipe_id: recipe_id.to_string(),
        slot,
        coords,
    };
    Ok((mk(ServerSlot::A, a), mk(ServerSlot::B, b)))
}

/// One server's running state for one recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchWindow {
    pub recipe_id: String,
    pub slot: ServerSlot,
    pub min_cohort: u64,
    pub received: u64,
    pub partial_sum: Vec<u32>,
    pub modulus: Modulus,
}

impl BatchWindow {
    pub fn new(recipe_id: &str, slot: ServerSlot, min_cohort: u64, bins: usize, modulus: Modulus) -> Self {
        Self {
            recipe_id: recipe_id.to_string(),
            slot,
            min_cohort,
            received: 0,
            partial_sum: vec![0; bins],
            modulus,
        }
    }

    /// Adds a share into the running sum. The share itself is dropped.
    pub fn accumulate(&mut self, share: ShareVector) -> Result<(), AggregationError> {
        if share.recipe_id != self.recipe_id {
            return Err(AggregationError::RecipeMismatch {
                expected: self.recipe_id.clone(),
                got: share.recipe_id,
            });
        }
        if share.slot != self.slot {
            return Err(AggregationError::SlotMismatch {
                expected: self.slot,
                got: share.slot,
            });
        }
        if share.coords.len() != self.partial_sum.len() {
            return Err(AggregationError::LengthMismatch {
                expected: self.partial_sum.len(),
                got: share.coords.len(),
            });
        }
        if let Some(&c) = share.coords.iter().find(|&&c| u64::from(c) >= self.modulus.0) {
            return Err(AggregationError::CoordinateTooLarge(u64::from(c)));
        }
        for (acc, c) in self.partial_sum.iter_mut().zip(share.coords) {
            *acc = self.modulus.add(*acc, c);
        }
        self.received += 1;
        Ok(())
    }
}

/// Result of combining both servers' windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Publication {
    /// Below threshold: only the recipe and threshold are known.
    Gated { recipe_id: String, min_cohort: u64 },
    Published {
        recipe_id: String,
        received: u64,
        counts: Vec<u64>,
    },
}

impl Publication {
    /// Size of the released aggregate, in coordinates.
    pub fn payload_len(&self) -> usize {
        match self {
            Publication::Gated { .. } => 0,
            Publication::Published { counts, .. } => counts.len(),
        }
    }
}

/// Combines the two closed windows of one recipe.
pub fn publish(a: BatchWindow, b: BatchWindow) -> Result<Publication, AggregationError> {
    if a.recipe_id != b.recipe_id {
        return Err(AggregationError::RecipeMismatch {
            expected: a.recipe_id,
            got: b.recipe_id,
        });
    }
    if a.slot == b.slot {
        return Err(AggregationError::SlotMismatch {
            expected: ServerSlot::B,
            got: b.slot,
        });
    }
    if a.received != b.received {
        return Err(AggregationError::ReceivedMismatch {
            a: a.received,
            b: b.received,
        });
    }
    if a.partial_sum.len() != b.partial_sum.len() || a.modulus != b.modulus {
        return Err(AggregationError::LengthMismatch {
            expected: a.partial_sum.len(),
            got: b.partial_sum.len(),
        });
    }
    let m = a.min_cohort.max(b.min_cohort);
    if a.received < m {
        return Ok(Publication::Gated {
            recipe_id: a.recipe_id,
            min_cohort: m,
        });
    }
    let received = a.received;
    let counts = a
        .partial_sum
        .iter()
        .zip(&b.partial_sum)
        .enumerate()
        .map(|(index, (&x, &y))| {
            let value = u64::from(a.modulus.add(x, y));
            if value > received {
                Err(AggregationError::Corrupt { index, value, received })
            } else {
                Ok(value)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Publication::Published {
        recipe_id: a.recipe_id,
        received,
        counts,
    })
}

/// One non-colluding server: a set of open windows keyed by recipe.
#[derive(Debug, Clone)]
pub struct AggregationServer {
    slot: ServerSlot,
    modulus: Modulus,
    windows: BTreeMap<String, BatchWindow>,
}

impl AggregationServer {
    pub fn new(slot: ServerSlot, modulus: Modulus) -> Self {
        Self {
            slot,
            modulus,
            windows: BTreeMap::new(),
        }
    }

    pub fn slot(&self) -> ServerSlot {
        self.slot
    }

    pub fn open_window(&mut self, recipe_id: &str, min_cohort: u64, bins: usize) -> Result<(), AggregationError> {
        if self.windows.contains_key(recipe_id) {
            return Err(AggregationError::WindowExists(recipe_id.to_string()));
        }
        self.windows.insert(
            recipe_id.to_string(),
            BatchWindow::new(recipe_id, self.slot, min_cohort, bins, self.modulus),
        );
        Ok(())
    }

    pub fn submit(&mut self, share: ShareVector) -> Result<(), AggregationError> {
        self.windows
            .get_mut(&share.recipe_id)
            .ok_or_else(|| AggregationError::NoWindow(share.recipe_id.clone()))?
            .accumulate(share)
    }

    pub fn close_window(&mut self, recipe_id: &str) -> Result<BatchWindow, AggregationError> {
        self.windows
            .remove(recipe_id)
            .ok_or_else(|| AggregationError::NoWindow(recipe_id.to_string()))
    }
}

/// The pair of servers plus the publishing step.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub a: AggregationServer,
    pub b: AggregationServer,
}

impl Aggregator {
    pub fn new(modulus: Modulus) -> Self {
        Self {
            a: AggregationServer::new(ServerSlot::A, modulus),
            b: AggregationServer::new(ServerSlot::B, modulus),
        }
    }

    pub fn open(&mut self, recipe_id: &str, min_cohort: u64, bins: usize) -> Result<(), AggregationError> {
        self.a.open_window(recipe_id, min_cohort, bins)?;
        self.b.open_window(recipe_id, min_cohort, bins)
    }

    pub fn submit(&mut self, pair: (ShareVector, ShareVector)) -> Result<(), AggregationError> {
        self.a.submit(pair.0)?;
        self.b.submit(pair.1)
    }

    pub fn close_and_publish(&mut self, recipe_id: &str) -> Result<Publication, AggregationError> {
        let wa = self.a.close_window(recipe_id)?;
        let wb = self.b.close_window(recipe_id)?;
        publish(wa, wb)
    }
}

impl Default for Aggregator {
    fn default() -> Self {
        Self::new(Modulus::STANDARD)
    }
}

/// Wire form: u32 LE length + UTF-8 recipe id, slot byte (0 = A, 1 = B),
/// u32 LE coordinate count, then u32 LE coordinates.
pub fn encode_share(share: &ShareVector) -> Vec<u8> {
    let id = share.recipe_id.as_bytes();
    let mut out = Vec::with_capacity(9 + id.len() + 4 * share.coords.len());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(match share.slot {
        ServerSlot::A => 0,
        ServerSlot::B => 1,
    });
    out.extend_from_slice(&(share.coords.len() as u32).to_le_bytes());
    for c in &share.coords {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn decode_share(bytes: &[u8]) -> Result<ShareVector, AggregationError> {
    let wire = |m: &str| AggregationError::Wire(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], AggregationError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| wire("truncated"))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let id_len = u32_at(take(4)?) as usize;
    let recipe_id = std::str::from_utf8(take(id_len)?)
        .map_err(|_| wire("recipe id is not UTF-8"))?
        .to_string();
    let slot = match take(1)?[0] {
        0 => ServerSlot::A,
        1 => ServerSlot::B,
        other => return Err(AggregationError::Wire(format!("bad slot byte {other}"))),
    };
    let count = u32_at(take(4)?) as usize;
    let body = take(count.checked_mul(4).ok_or_else(|| wire("count overflow"))?)?;
    let coords = body.chunks_exact(4).map(u32_at).collect();
    if pos != bytes.len() {
        return Err(wire("trailing bytes"));
    }
    Ok(ShareVector { recipe_id, slot, coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldp::{LocalEpsilon, OheMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report(bits: &[u8]) -> PrivatizedReport {
        PrivatizedReport::from_bits(bits.to_vec(), OheMode::Asymmetric, LocalEpsilon::new(1.0).unwrap()).unwrap()
    }

    #[test]
    fn split_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = split(&report(&[1, 0, 1]), "r", Modulus::STANDARD, &mut rng);
        for (i, bit) in [1u32, 0, 1].into_iter().enumerate() {
            assert_eq!(b.coords[i], bit.wrapping_sub(a.coords[i]));
            assert_eq!(a.coords[i].wrapping_add(b.coords[i]), bit);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(split(&report(&[1, 0, 1]), "r", Modulus::STANDARD, &mut rng2), (a, b));
    }

    #[test]
    fn small_modulus_wraps() {
        let q = Modulus::new(7).unwrap();
        let mut w = BatchWindow::new("r", ServerSlot::A, 1, 1, q);
        for c in [5, 4, 6] {
            w.accumulate(ShareVector {
                recipe_id: "r".into(),
                slot: ServerSlot::A,
                coords: vec![c],
            })
            .unwrap();
        }
        assert_eq!(w.partial_sum, vec![(5 + 4 + 6) % 7]);
        assert_eq!(w.received, 3);
        assert!(Modulus::new(1).is_err());
        assert!(Modulus::new((1 << 32) + 1).is_err());
    }

    #[test]
    fn gate_releases_nothing_below_threshold() {
        let mut agg = Aggregator::default();
        agg.open("r", 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2 {
            agg.submit(split(&report(&[1, 0, 0, 0]), "r", Modulus::STANDARD, &mut rng))
                .unwrap();
        }
        let p = agg.close_and_publish("r").unwrap();
        assert_eq!(
            p,
            Publication::Gated {
                recipe_id: "r".into(),
                min_cohort: 3
            }
        );
        assert_eq!(p.payload_len(), 0);
    }

    #[test]
    fn publishes_unit_vector_sum() {
        let mut agg = Aggregator::default();
        agg.open("r", 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [[1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 1, 0]] {
            agg.submit(split(&report(&bits), "r", Modulus::STANDARD, &mut rng)).unwrap();
        }
        match agg.close_and_publish("r").unwrap() {
            Publication::Published { counts, received, .. } => {
                assert_eq!(received, 3);
                assert_eq!(counts, vec![2, 0, 1, 0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn faults() {
        let a = BatchWindow::new("r", ServerSlot::A, 1, 2, Modulus::STANDARD);
        let mut b = BatchWindow::new("r", ServerSlot::B, 1, 2, Modulus::STANDARD);
        b.received = 1;
        assert!(matches!(publish(a.clone(), b), Err(AggregationError::ReceivedMismatch { .. })));
        let mut a2 = a.clone();
        let mut b2 = BatchWindow::new("r", ServerSlot::B, 1, 2, Modulus::STANDARD);
        a2.received = 1;
        b2.received = 1;
        a2.partial_sum = vec![5, 0];
        assert!(matches!(publish(a2, b2), Err(AggregationError::Corrupt { index: 0, .. })));
        let mut w = a;
        let wrong = ShareVector {
            recipe_id: "x".into(),
            slot: ServerSlot::A,
            coords: vec![0, 0],
        };
        assert!(w.accumulate(wrong).is_err());
        let mut agg = Aggregator::default();
        assert!(agg.close_and_publish("nope").is_err());
        agg.open("r", 1, 1).unwrap();
        assert!(agg.open("r", 1, 1).is_err());
    }

    #[test]
    fn wire_round_trip_is_bit_exact() {
        let s = ShareVector {
            recipe_id: "ab".into(),
            slot: ServerSlot::B,
            coords: vec![1, 0xdead_beef],
        };
        let bytes = encode_share(&s);
        assert_eq!(
            bytes,
            vec![2, 0, 0, 0, b'a', b'b', 1, 2, 0, 0, 0, 1, 0, 0, 0, 0xef, 0xbe, 0xad, 0xde]
        );
        assert_eq!(decode_share(&bytes).unwrap(), s);
        assert!(decode_share(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_share(&extra).is_err());
        let mut bad_slot = bytes;
        bad_slot[6] = 9;
        assert!(decode_share(&bad_slot).is_err());
    }

    #[test]
    fn single_server_view_is_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // 16 cells over the top 4 bits of share A for a fixed report
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut cells = [0u64; 16];
        let n = 10_000;
        for _ in 0..n {
            let (a, _) = split(&report(&[1]), "r", Modulus::STANDARD, &mut rng);
            cells[(a.coords[0] >> 28) as usize] += 1;
        }
        let expected = n as f64 / 16.0;
        let stat: f64 = cells.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 {stat}, p {p}");
    }
}
