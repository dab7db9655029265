//! Local randomizers for private one-hot encoding and their server-side
//! debiasing estimators.
//!
//! Two client randomizers are provided:
//!
//! * **Asymmetric** OHE: the hot coordinate is reported as a fair coin and
//!   every cold coordinate is set with probability `1 / (e^ε + 1)`. This is an
//!   ε-DP local randomizer in the replacement model.
//! * **Symmetric** OHE: every coordinate goes through binary randomized
//!   response, kept with probability `e^ε / (1 + e^ε)`. This is ε-DP in the
//!   deletion model (and 2ε-DP under replacement).
//!
//! All sampling takes an explicit generator so that reports can be replayed
//! from a seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest one-hot domain accepted by the dense encoders.
pub const MAX_DOMAIN_SIZE: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdpError {
    #[error("local epsilon must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("randomizer requires a strictly positive local epsilon")]
    ZeroEpsilon,
    #[error("hot index {index} out of range for domain of size {domain_size}")]
    IndexOutOfRange { index: usize, domain_size: usize },
    #[error("domain size {0} is outside 1..={MAX_DOMAIN_SIZE}")]
    DomainSize(usize),
    #[error("cell {cell} has count {count} larger than the cohort size {n}")]
    CountExceedsCohort { cell: usize, count: u64, n: u64 },
    #[error("report bits must be 0 or 1 (found {0} at a coordinate)")]
    NonBinary(u8),
}

/// Local privacy parameter ε0, in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LocalEpsilon(f64);

impl LocalEpsilon {
    pub fn new(value: f64) -> Result<Self, LdpError> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(LdpError::InvalidEpsilon(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    fn positive(self) -> Result<f64, LdpError> {
        if self.0 > 0.0 {
            Ok(self.0)
        } else {
            Err(LdpError::ZeroEpsilon)
        }
    }
}

impl TryFrom<f64> for LocalEpsilon {
    type Error = LdpError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LocalEpsilon> for f64 {
    fn from(eps: LocalEpsilon) -> f64 {
        eps.0
    }
}

/// Which private one-hot encoding a report was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OheMode {
    Asymmetric,
    Symmetric,
}

impl OheMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OheMode::Asymmetric => "asymmetric",
            OheMode::Symmetric => "symmetric",
        }
    }
}

/// Neighbouring relation used when stating a local guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborModel {
    /// Any two inputs must be indistinguishable.
    Replacement,
    /// Every input must be indistinguishable from a fixed reference distribution.
    Deletion,
}

impl OheMode {
    /// The neighbouring model under which this randomizer is ε0-DP.
    pub fn native_model(self) -> NeighborModel {
        match self {
            OheMode::Asymmetric => NeighborModel::Replacement,
            OheMode::Symmetric => NeighborModel::Deletion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotVector {
    domain_size: usize,
    hot_index: usize,
}

impl OneHotVector {
    pub fn domain_size(&self) -> usize {
        self.domain_size
    }

    pub fn hot_index(&self) -> usize {
        self.hot_index
    }

    pub fn to_bits(&self) -> Vec<u8> {
        let mut bits = vec![0u8; self.domain_size];
        bits[self.hot_index] = 1;
        bits
    }
}

pub fn encode_one_hot(hot_index: usize, domain_size: usize) -> Result<OneHotVector, LdpError> {
    if domain_size == 0 || domain_size > MAX_DOMAIN_SIZE {
        return Err(LdpError::DomainSize(domain_size));
    }
    if hot_index >= domain_size {
        return Err(LdpError::IndexOutOfRange {
            index: hot_index,
            domain_size,
        });
    }
    Ok(OneHotVector {
        domain_size,
        hot_index,
    })
}

/// A randomized one-hot report, one byte per coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivatizedReport {
    bits: Vec<u8>,
    mode: OheMode,
    epsilon0: u64,
}

impl PrivatizedReport {
    pub fn from_bits(bits: Vec<u8>, mode: OheMode, epsilon0: LocalEpsilon) -> Result<Self, LdpError> {
        if bits.is_empty() || bits.len() > MAX_DOMAIN_SIZE {
            return Err(LdpError::DomainSize(bits.len()));
        }
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(LdpError::NonBinary(b));
        }
        Ok(Self {
            bits,
            mode,
            epsilon0: epsilon0.value().to_bits(),
        })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn mode(&self) -> OheMode {
        self.mode
    }

    pub fn epsilon0(&self) -> LocalEpsilon {
        LocalEpsilon(f64::from_bits(self.epsilon0))
    }
}

/// Probability that a coordinate of the randomized report is 1.
pub fn coordinate_one_probability(mode: OheMode, eps0: LocalEpsilon, hot: bool) -> f64 {
    let e = eps0.value().exp();
    match (mode, hot) {
        (OheMode::Asymmetric, true) => 0.5,
        (OheMode::Asymmetric, false) => 1.0 / (e + 1.0),
        (OheMode::Symmetric, true) => keep_probability(eps0.value()),
        (OheMode::Symmetric, false) => 1.0 - keep_probability(eps0.value()),
    }
}

/// `e^ε / (1 + e^ε)`, computed without overflow for large ε.
fn keep_probability(eps: f64) -> f64 {
    1.0 / (1.0 + (-eps).exp())
}

/// Calls `on_one` for each index in `0..len` independently selected with
/// probability `p`, skipping over runs of zeros with geometric gaps.
fn sample_bernoulli_ones<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R, mut on_one: impl FnMut(usize)) {
    if p <= 0.0 {
        return;
    }
    if p >= 0.25 {
        for i in 0..len {
            if rng.random::<f64>() < p {
                on_one(i);
            }
        }
        return;
    }
    let log_q = (-p).ln_1p();
    let mut next = 0usize;
    loop {
        // u in (0, 1]
        let u = 1.0 - rng.random::<f64>();
        let gap = (u.ln() / log_q).floor();
        if !gap.is_finite() || gap >= (len - next) as f64 {
            return;
        }
        next += gap as usize;
        on_one(next);
        next += 1;
        if next >= len {
            return;
        }
    }
}

fn randomize<R: Rng + ?Sized>(
    v: &OneHotVector,
    eps0: LocalEpsilon,
    mode: OheMode,
    rng: &mut R,
) -> Result<PrivatizedReport, LdpError> {
    eps0.positive()?;
    let mut bits = vec![0u8; v.domain_size];
    let cold = coordinate_one_probability(mode, eps0, false);
    sample_bernoulli_ones(v.domain_size, cold, rng, |i| bits[i] = 1);
    let hot = coordinate_one_probability(mode, eps0, true);
    bits[v.hot_index] = u8::from(rng.random::<f64>() < hot);
    Ok(PrivatizedReport {
        bits,
        mode,
        epsilon0: eps0.value().to_bits(),
    })
}

/// Asymmetric private one-hot encoding (replacement-model ε0-DP).
pub fn randomize_asymmetric<R: Rng + ?Sized>(
    v: &OneHotVector,
    eps0: LocalEpsilon,
    rng: &mut R,
) -> Result<PrivatizedReport, LdpError> {
    randomize(v, eps0, OheMode::Asymmetric, rng)
}

/// Symmetric private one-hot encoding (deletion-model ε0-DP).
pub fn randomize_symmetric<R: Rng + ?Sized>(
    v: &OneHotVector,
    eps0: LocalEpsilon,
    rng: &mut R,
) -> Result<PrivatizedReport, LdpError> {
    randomize(v, eps0, OheMode::Symmetric, rng)
}

pub fn randomize_with<R: Rng + ?Sized>(
    mode: OheMode,
    v: &OneHotVector,
    eps0: LocalEpsilon,
    rng: &mut R,
) -> Result<PrivatizedReport, LdpError> {
    randomize(v, eps0, mode, rng)
}

/// Binary randomized response: keeps `bit` with probability `e^ε0 / (e^ε0 + 1)`.
pub fn two_rr<R: Rng + ?Sized>(bit: bool, eps0: LocalEpsilon, rng: &mut R) -> bool {
    let keep = rng.random::<f64>() < keep_probability(eps0.value());
    if keep {
        bit
    } else {
        !bit
    }
}

/// Per-cell sum of a batch of reports.
pub fn sum_reports<'a>(reports: impl IntoIterator<Item = &'a PrivatizedReport>, domain_size: usize) -> Vec<u64> {
    let mut sums = vec![0u64; domain_size];
    for report in reports {
        for (s, &b) in sums.iter_mut().zip(report.bits()) {
            *s += u64::from(b);
        }
    }
    sums
}

/// Unbiased frequency estimates recovered from a summed batch of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedHistogram {
    pub estimates: Vec<f64>,
    pub n: u64,
    pub epsilon0: LocalEpsilon,
    pub mode: OheMode,
}

impl DebiasedHistogram {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    /// Variance of a cell's estimate when its true count is `true_count`.
    pub fn variance_given(&self, true_count: f64) -> f64 {
        estimator_variance(self.mode, self.n, self.epsilon0, true_count)
    }

    /// Plug-in variance: the cell's own estimate (floored at zero) stands in
    /// for the true count.
    pub fn variance(&self, cell: usize) -> f64 {
        self.variance_given(self.estimates[cell].max(0.0))
    }

    pub fn stderr(&self, cell: usize) -> f64 {
        self.variance(cell).max(0.0).sqrt()
    }

    pub fn stderrs(&self) -> Vec<f64> {
        (0..self.len()).map(|c| self.stderr(c)).collect()
    }
}

/// Closed-form variance of one debiased cell.
///
/// Asymmetric: `n·4e^ε/(e^ε−1)² + f`. Symmetric: `n·e^ε/(e^ε−1)²`.
pub fn estimator_variance(mode: OheMode, n: u64, eps0: LocalEpsilon, true_count: f64) -> f64 {
    let e = eps0.value().exp();
    let base = n as f64 * e / ((e - 1.0) * (e - 1.0));
    match mode {
        OheMode::Asymmetric => 4.0 * base + true_count,
        OheMode::Symmetric => base,
    }
}

pub fn debias(
    mode: OheMode,
    sum_bits: &[u64],
    n: u64,
    eps0: LocalEpsilon,
) -> Result<DebiasedHistogram, LdpError> {
    let eps = eps0.positive()?;
    if let Some((cell, &count)) = sum_bits.iter().enumerate().find(|(_, &c)| c > n) {
        return Err(LdpError::CountExceedsCohort { cell, count, n });
    }
    let e = eps.exp();
    // E[sum] = f/2 + (n - f)/(e + 1) for the asymmetric randomizer, so the
    // unbiased offset there is 2n/(e - 1)
    let (scale, offset) = match mode {
        OheMode::Asymmetric => (2.0 * (1.0 + e) / (e - 1.0), 2.0 * n as f64 / (e - 1.0)),
        OheMode::Symmetric => ((1.0 + e) / (e - 1.0), n as f64 / (e - 1.0)),
    };
    let estimates = sum_bits.iter().map(|&s| scale * s as f64 - offset).collect();
    Ok(DebiasedHistogram {
        estimates,
        n,
        epsilon0: eps0,
        mode,
    })
}

pub fn debias_asymmetric(sum_bits: &[u64], n: u64, eps0: LocalEpsilon) -> Result<DebiasedHistogram, LdpError> {
    debias(OheMode::Asymmetric, sum_bits, n, eps0)
}

pub fn debias_symmetric(sum_bits: &[u64], n: u64, eps0: LocalEpsilon) -> Result<DebiasedHistogram, LdpError> {
    debias(OheMode::Symmetric, sum_bits, n, eps0)
}

/// Worst-case absolute log-likelihood ratio of the randomizer under `model`,
/// computed analytically from the per-coordinate Bernoulli laws.
///
/// Coordinates are independent, so the supremum over whole output vectors is
/// the sum over the differing coordinates of each coordinate's worst ratio.
/// The deletion reference distribution is the all-cold law.
pub fn exact_privacy_ratio(mode: OheMode, model: NeighborModel, eps0: LocalEpsilon) -> Result<f64, LdpError> {
    eps0.positive()?;
    let hot = coordinate_one_probability(mode, eps0, true);
    let cold = coordinate_one_probability(mode, eps0, false);
    let coord = |a: f64, b: f64| -> (f64, f64) {
        // (max, min) of ln(P_a(bit)/P_b(bit)) over bit in {0, 1}
        let one = (a / b).ln();
        let zero = ((1.0 - a) / (1.0 - b)).ln();
        (one.max(zero), one.min(zero))
    };
    let (hi, lo) = match model {
        // inputs d != d': coordinate d is hot-vs-cold, coordinate d' is cold-vs-hot
        NeighborModel::Replacement => {
            let (h1, l1) = coord(hot, cold);
            let (h2, l2) = coord(cold, hot);
            (h1 + h2, l1 + l2)
        }
        NeighborModel::Deletion => coord(hot, cold),
    };
    Ok(hi.abs().max(lo.abs()))
}
