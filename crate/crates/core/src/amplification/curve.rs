use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{closed_form_epsilon, symohe_epsilon, AmplificationError, MAX_EXACT_COHORT};
use crate::ldp::{LocalEpsilon, NeighborModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub eps0: f64,
    pub n: u64,
    pub delta: f64,
    /// Replacement closed form; `None` where it does not apply.
    pub epsilon: Option<f64>,
    /// Symmetric OHE via the Rényi route, when requested.
    pub renyi_epsilon: Option<f64>,
}

/// Evaluates the certified ε over a grid of local epsilons and cohort sizes.
pub fn amplification_curve(
    eps0s: &[f64],
    ns: &[u64],
    delta: f64,
    with_renyi: bool,
) -> Result<Vec<CurveRow>, AmplificationError> {
    let mut rows = Vec::with_capacity(eps0s.len() * ns.len());
    for &e in eps0s {
        let le = LocalEpsilon::new(e).map_err(|_| AmplificationError::InvalidTarget(e))?;
        for &n in ns {
            let epsilon = match closed_form_epsilon(le, n, delta, NeighborModel::Replacement) {
                Ok(b) => Some(b.epsilon),
                Err(AmplificationError::NotApplicable { .. }) => None,
                Err(err) => return Err(err),
            };
            let renyi_epsilon = if with_renyi && n <= MAX_EXACT_COHORT && delta < 1.0 {
                Some(symohe_epsilon(le, n, delta)?)
            } else {
                None
            };
            rows.push(CurveRow {
                eps0: e,
                n,
                delta,
                epsilon,
                renyi_epsilon,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `eps0,n,delta,epsilon[,renyi_epsilon]`; missing values
/// are written as `n/a`.
pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let renyi = rows.iter().any(|r| r.renyi_epsilon.is_some());
    let mut out = String::from("eps0,n,delta,epsilon");
    if renyi {
        out.push_str(",renyi_epsilon");
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x}"));
    for r in rows {
        let _ = write!(out, "{},{},{:e},{}", r.eps0, r.n, r.delta, fmt(r.epsilon));
        if renyi {
            let _ = write!(out, ",{}", fmt(r.renyi_epsilon));
        }
        out.push('\n');
    }
    out
}
