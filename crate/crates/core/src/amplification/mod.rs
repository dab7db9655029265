//! Privacy calculator: what an aggregate of `n` locally randomized reports
//! certifies in the aggregate model, the minimum cohort for a target, the
//! Rényi route for symmetric OHE, and composition of per-round guarantees.

mod composition;
mod curve;
mod renyi;

pub use composition::{compose_advanced, compose_basic, compose_rdp, CompositionLedger, NeumaierSum};
pub use curve::{amplification_curve, curve_to_csv, CurveRow};
pub use renyi::{
    alpha_grid, rdp_to_dp, rho_2rr, rho_2rr_curve, symohe_epsilon, symohe_renyi_bound, symohe_renyi_curve,
    RenyiPoint, MAX_EXACT_COHORT,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ldp::{LocalEpsilon, NeighborModel};

/// Cohorts are bounded by the share modulus (2^32) with headroom.
pub const MAX_COHORT: u64 = 1 << 31;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmplificationError {
    #[error("delta must lie in (0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("cohort size must be at least 1")]
    EmptyCohort,
    #[error("amplification bound not applicable at n = {n}, eps0 = {epsilon0} (max admissible eps0: {max_epsilon0:?})")]
    NotApplicable {
        n: u64,
        epsilon0: f64,
        /// Largest local epsilon for which the bound applies at this `n`, or
        /// `None` when no non-negative value does.
        max_epsilon0: Option<f64>,
    },
    #[error("target epsilon must be positive and finite, got {0}")]
    InvalidTarget(f64),
    #[error("target epsilon {target} unreachable for any cohort up to {MAX_COHORT}")]
    TargetUnreachable { target: f64 },
    #[error("Renyi order must exceed 1, got {0}")]
    InvalidAlpha(f64),
    #[error("Renyi divergence must be non-negative, got {0}")]
    InvalidRho(f64),
    #[error("cannot convert an empty Renyi curve")]
    EmptyCurve,
    #[error("cohort of {0} exceeds the exact convolution limit of {MAX_EXACT_COHORT}")]
    CohortTooLarge(u64),
    #[error("invalid composition entry ({epsilon}, {delta})")]
    InvalidEntry { epsilon: f64, delta: f64 },
    #[error("slack delta must lie in (0, 1), got {0}")]
    InvalidSlack(f64),
    #[error("Renyi curves disagree on their alpha grids")]
    AlphaMismatch,
}

/// The (ε, δ) certified for the output of the aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateBound {
    pub epsilon: f64,
    pub delta: f64,
    pub n: u64,
    pub epsilon0: LocalEpsilon,
    pub model: NeighborModel,
}

fn check_delta(delta: f64) -> Result<(), AmplificationError> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(AmplificationError::InvalidDelta(delta))
    }
}

/// Largest replacement-model ε0 for which the closed form applies at `n`.
fn replacement_limit(n: u64, delta: f64) -> Option<f64> {
    let x = n as f64 / (8.0 * (2.0 / delta).ln()) - 1.0;
    if x > 0.0 {
        Some(x.ln())
    } else {
        None
    }
}

/// Closed-form amplification by aggregation.
///
/// For replacement-model ε0-DP reports and `ε0 ≤ ln(n / (8 ln(2/δ)) − 1)`:
///
/// ```text
/// ε = ln(1 + (e^ε0 − 1) · (4·√(2 ln(4/δ)) / √((e^ε0 + 1)·n) + 4/n))
/// ```
///
/// Deletion-model randomizers are handled by substituting `2·ε0`.
pub fn closed_form_epsilon(
    eps0: LocalEpsilon,
    n: u64,
    delta: f64,
    model: NeighborModel,
) -> Result<AggregateBound, AmplificationError> {
    check_delta(delta)?;
    if n == 0 {
        return Err(AmplificationError::EmptyCohort);
    }
    let factor = match model {
        NeighborModel::Replacement => 1.0,
        NeighborModel::Deletion => 2.0,
    };
    let effective = factor * eps0.value();
    let limit = replacement_limit(n, delta);
    match limit {
        Some(limit) if effective <= limit => {}
        _ => {
            return Err(AmplificationError::NotApplicable {
                n,
                epsilon0: eps0.value(),
                max_epsilon0: limit.filter(|l| *l >= 0.0).map(|l| l / factor),
            })
        }
    }
    let nf = n as f64;
    let spread = 4.0 * (2.0 * (4.0 / delta).ln()).sqrt() / ((effective.exp() + 1.0) * nf).sqrt() + 4.0 / nf;
    let epsilon = (effective.exp_m1() * spread).ln_1p();
    Ok(AggregateBound {
        epsilon,
        delta,
        n,
        epsilon0: eps0,
        model,
    })
}

/// Smallest cohort `m` at which the closed form applies and certifies
/// `ε ≤ target`.
///
/// The certified ε is strictly decreasing in `n` and applicability is
/// monotone, so the predicate is monotone and a binary search is exact.
pub fn min_cohort_size(
    eps0: LocalEpsilon,
    target_epsilon: f64,
    delta: f64,
    model: NeighborModel,
) -> Result<u64, AmplificationError> {
    if !(target_epsilon.is_finite() && target_epsilon > 0.0) {
        return Err(AmplificationError::InvalidTarget(target_epsilon));
    }
    check_delta(delta)?;
    let ok = |n: u64| matches!(closed_form_epsilon(eps0, n, delta, model), Ok(b) if b.epsilon <= target_epsilon);
    if !ok(MAX_COHORT) {
        return Err(AmplificationError::TargetUnreachable { target: target_epsilon });
    }
    let (mut lo, mut hi) = (0u64, MAX_COHORT);
    // invariant: !ok(lo) (or lo == 0), ok(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Best (ε, δ) certified for `n` reports of a randomizer in `mode`.
///
/// Asymmetric reports use the replacement closed form. Symmetric reports take
/// the smaller of the deletion closed form and the Rényi route, when either
/// applies. `None` means nothing could be certified.
pub fn certify(
    mode: crate::ldp::OheMode,
    eps0: LocalEpsilon,
    n: u64,
    delta: f64,
) -> Result<Option<AggregateBound>, AmplificationError> {
    check_delta(delta)?;
    if n == 0 {
        return Err(AmplificationError::EmptyCohort);
    }
    let model = mode.native_model();
    let closed = match closed_form_epsilon(eps0, n, delta, model) {
        Ok(b) => Some(b),
        Err(AmplificationError::NotApplicable { .. }) => None,
        Err(e) => return Err(e),
    };
    if mode == crate::ldp::OheMode::Asymmetric || delta >= 1.0 || n > MAX_EXACT_COHORT {
        return Ok(closed);
    }
    let renyi = symohe_epsilon(eps0, n, delta)?;
    let renyi_bound = AggregateBound {
        epsilon: renyi,
        delta,
        n,
        epsilon0: eps0,
        model,
    };
    Ok(Some(match closed {
        Some(c) if c.epsilon <= renyi => c,
        _ => renyi_bound,
    }))
}
