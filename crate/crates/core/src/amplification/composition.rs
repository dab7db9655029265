use serde::{Deserialize, Serialize};

use super::{AmplificationError, RenyiPoint};

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

fn check_entry(epsilon: f64, delta: f64) -> Result<(), AmplificationError> {
    if epsilon.is_finite() && epsilon >= 0.0 && (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(AmplificationError::InvalidEntry { epsilon, delta })
    }
}

/// Basic composition: sums of ε and of δ.
pub fn compose_basic(entries: &[(f64, f64)]) -> Result<(f64, f64), AmplificationError> {
    let mut eps = NeumaierSum::new();
    let mut delta = NeumaierSum::new();
    for &(e, d) in entries {
        check_entry(e, d)?;
        eps.add(e);
        delta.add(d);
    }
    Ok((eps.value(), delta.value()))
}

/// Advanced composition of `k` (ε, δ) mechanisms with slack `δ'`:
///
/// ```text
/// ε_tot = √(2k ln(1/δ'))·ε + k·ε·(e^ε − 1),   δ_tot = k·δ + δ'
/// ```
pub fn compose_advanced(epsilon: f64, delta: f64, k: u64, slack: f64) -> Result<(f64, f64), AmplificationError> {
    check_entry(epsilon, delta)?;
    if !(slack > 0.0 && slack < 1.0) {
        return Err(AmplificationError::InvalidSlack(slack));
    }
    let kf = k as f64;
    let eps = (2.0 * kf * (1.0 / slack).ln()).sqrt() * epsilon + kf * epsilon * epsilon.exp_m1();
    Ok((eps, kf * delta + slack))
}

/// Rényi curves compose additively at each order.
pub fn compose_rdp(curves: &[Vec<RenyiPoint>]) -> Result<Vec<RenyiPoint>, AmplificationError> {
    let Some(first) = curves.first() else {
        return Err(AmplificationError::EmptyCurve);
    };
    let mut out = first.clone();
    for curve in &curves[1..] {
        if curve.len() != out.len() || curve.iter().zip(&out).any(|(a, b)| a.alpha != b.alpha) {
            return Err(AmplificationError::AlphaMismatch);
        }
        for (acc, p) in out.iter_mut().zip(curve) {
            acc.rho += p.rho;
        }
    }
    Ok(out)
}

/// Running record of released (ε, δ) pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CompositionLedger {
    entries: Vec<(f64, f64)>,
    epsilon: NeumaierSum,
    delta: NeumaierSum,
}

impl CompositionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, epsilon: f64, delta: f64) -> Result<(), AmplificationError> {
        check_entry(epsilon, delta)?;
        self.entries.push((epsilon, delta));
        self.epsilon.add(epsilon);
        self.delta.add(delta);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn basic(&self) -> (f64, f64) {
        (self.epsilon.value(), self.delta.value())
    }

    /// Advanced composition using the largest recorded ε and δ.
    pub fn advanced(&self, slack: f64) -> Result<(f64, f64), AmplificationError> {
        let (e, d) = self
            .entries
            .iter()
            .fold((0.0f64, 0.0f64), |(e, d), &(x, y)| (e.max(x), d.max(y)));
        compose_advanced(e, d, self.entries.len() as u64, slack)
    }
}
