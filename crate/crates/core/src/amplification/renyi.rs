//! Rényi-divergence route for sums of binary randomized response, and its
//! conversion to (ε, δ).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::AmplificationError;
use crate::ldp::LocalEpsilon;

/// Largest cohort for which the exact worst-case divergence is computed.
pub const MAX_EXACT_COHORT: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiPoint {
    pub alpha: f64,
    pub rho: f64,
}

impl RenyiPoint {
    pub fn new(alpha: f64, rho: f64) -> Result<Self, AmplificationError> {
        if !(alpha > 1.0) || alpha.is_nan() {
            return Err(AmplificationError::InvalidAlpha(alpha));
        }
        if !(rho >= 0.0) {
            return Err(AmplificationError::InvalidRho(rho));
        }
        Ok(Self { alpha, rho })
    }
}

/// Orders used for RDP → DP conversion: `1 + 2^j/16` for `j = 0..=12`, plus
/// 16, 32 and 64, ascending.
pub fn alpha_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=12).map(|j| 1.0 + f64::from(1u32 << j) / 16.0).collect();
    grid.extend([16.0, 32.0, 64.0]);
    grid.sort_by(f64::total_cmp);
    grid
}

/// Log-PMF on the integer window `offset..offset + vals.len()`.
#[derive(Debug, Clone)]
struct LogPmf {
    offset: usize,
    vals: Vec<f64>,
}

impl LogPmf {
    fn point() -> Self {
        Self { offset: 0, vals: vec![0.0] }
    }

    fn get(&self, x: usize) -> f64 {
        x.checked_sub(self.offset)
            .and_then(|i| self.vals.get(i).copied())
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Drops leading and trailing entries below `floor`.
    fn trim(mut self, floor: f64) -> Self {
        let Some(last) = self.vals.iter().rposition(|&v| v >= floor) else {
            return Self::point();
        };
        self.vals.truncate(last + 1);
        let first = self.vals.iter().position(|&v| v >= floor).unwrap_or(0);
        self.vals.drain(..first);
        self.offset += first;
        self
    }
}

fn binomial_log_pmf(h: usize, ln_c: f64, ln_1mc: f64, floor: f64) -> LogPmf {
    let mut vals = Vec::with_capacity(h + 1);
    let mut ln_choose = 0.0f64;
    for x in 0..=h {
        if x > 0 {
            ln_choose += ((h - x + 1) as f64).ln() - (x as f64).ln();
        }
        vals.push(ln_choose + x as f64 * ln_c + (h - x) as f64 * ln_1mc);
    }
    LogPmf { offset: 0, vals }.trim(floor)
}

fn log_convolve(a: &LogPmf, b: &LogPmf, floor: f64) -> LogPmf {
    let len = a.vals.len() + b.vals.len() - 1;
    let mut vals = Vec::with_capacity(len);
    for z in 0..len {
        let lo = z.saturating_sub(b.vals.len() - 1);
        let hi = z.min(a.vals.len() - 1);
        let terms = (lo..=hi).map(|i| a.vals[i] + b.vals[z - i]);
        let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            vals.push(max);
            continue;
        }
        let sum: f64 = terms.map(|t| (t - max).exp()).sum();
        vals.push(max + sum.ln());
    }
    LogPmf {
        offset: a.offset + b.offset,
        vals,
    }
    .trim(floor)
}

/// Per-cohort constants of the scan.
struct Scan {
    n: usize,
    ln_p: f64,
    ln_q: f64,
    /// Entries below this log-mass are dropped while building the PMFs.
    build_floor: f64,
}

impl Scan {
    /// Visits `U_k = Bin(k, p) * Bin(n − k, q)` for `k = lo..=hi` in
    /// increasing order, given `base = Bin(lo, p) * Bin(n − hi, q)`.
    ///
    /// Each level of the recursion only convolves, so no cancellation occurs.
    fn visit(&self, lo: usize, hi: usize, base: LogPmf, emit: &mut dyn FnMut(&LogPmf)) {
        if lo == hi {
            emit(&base);
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let more_q = binomial_log_pmf(hi - mid, self.ln_q, self.ln_p, self.build_floor);
        self.visit(lo, mid, log_convolve(&base, &more_q, self.build_floor), emit);
        let more_p = binomial_log_pmf(mid + 1 - lo, self.ln_p, self.ln_q, self.build_floor);
        self.visit(mid + 1, hi, log_convolve(&base, &more_p, self.build_floor), emit);
    }
}

/// `max(0, D^α(P ‖ Q))` for every order, skipping points where either mass
/// is below `floor`.
fn divergences(p: &LogPmf, q: &LogPmf, alphas: &[f64], floor: f64, out: &mut [f64]) {
    let lo = p.offset.max(q.offset);
    let hi = (p.offset + p.vals.len()).min(q.offset + q.vals.len());
    let pts: Vec<(f64, f64)> = (lo..hi)
        .map(|x| (q.get(x), p.get(x) - q.get(x)))
        .filter(|&(lq, _)| lq >= floor)
        .filter(|&(lq, r)| lq + r >= floor)
        .collect();
    for (slot, &alpha) in out.iter_mut().zip(alphas) {
        let max = pts.iter().map(|&(lq, r)| lq + alpha * r).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = pts
            .iter()
            .map(|&(lq, r)| lq + alpha * r - max)
            .filter(|&v| v > -60.0)
            .map(f64::exp)
            .sum();
        *slot = ((max + sum.ln()) / (alpha - 1.0)).max(0.0);
    }
}

/// Exact worst-case Rényi divergence between sums of binary randomized
/// response on neighbouring bit datasets, for every order in `alphas`.
///
/// With `U_k` the law of the sum when `k` of the `n` users hold a 1, the
/// neighbouring pairs are `(U_{k+1}, U_k)` for `k = 0..n`, in either order;
/// all `2n` divergences are evaluated. Masses too small to move any term by
/// more than `e^-60` are pruned: a single coin changes the PMF by at most
/// `e^ε0` pointwise, so a point with mass below `e^-L` contributes at most
/// `e^((α+1)ε0 − L)`.
pub fn rho_2rr_curve(n: u64, alphas: &[f64], eps0: LocalEpsilon) -> Result<Vec<RenyiPoint>, AmplificationError> {
    if n == 0 {
        return Err(AmplificationError::EmptyCohort);
    }
    if n > MAX_EXACT_COHORT {
        return Err(AmplificationError::CohortTooLarge(n));
    }
    if let Some(&a) = alphas.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
        return Err(AmplificationError::InvalidAlpha(a));
    }
    let e = eps0.value();
    if e == 0.0 || alphas.is_empty() {
        return Ok(alphas.iter().map(|&alpha| RenyiPoint { alpha, rho: 0.0 }).collect());
    }
    let alpha_max = alphas.iter().copied().fold(1.0, f64::max);
    let log_n = ((n + 2) as f64).ln();
    let eval_floor = -(60.0 + (alpha_max + 1.0) * e + 2.0 * log_n);
    let scan = Scan {
        n: n as usize,
        // ln p = −ln(1 + e^−ε), ln q = −ln(1 + e^ε)
        ln_p: -(-e).exp().ln_1p(),
        ln_q: -(e + (-e).exp().ln_1p()),
        build_floor: eval_floor - 50.0 - 2.0 * log_n,
    };

    let mut worst = vec![0.0f64; alphas.len()];
    let mut fwd = vec![0.0f64; alphas.len()];
    let mut rev = vec![0.0f64; alphas.len()];
    let mut prev: Option<LogPmf> = None;
    let mut emit = |u: &LogPmf| {
        if let Some(q) = prev.as_ref() {
            divergences(u, q, alphas, eval_floor, &mut fwd);
            divergences(q, u, alphas, eval_floor, &mut rev);
            for ((w, f), r) in worst.iter_mut().zip(&fwd).zip(&rev) {
                *w = w.max(*f).max(*r);
            }
        }
        prev = Some(u.clone());
    };
    scan.visit(0, scan.n, LogPmf::point(), &mut emit);
    Ok(alphas
        .iter()
        .zip(worst)
        .map(|(&alpha, rho)| RenyiPoint { alpha, rho })
        .collect())
}

/// `ρ_2RR(n, α, ε0)` at a single order.
pub fn rho_2rr(n: u64, alpha: f64, eps0: LocalEpsilon) -> Result<RenyiPoint, AmplificationError> {
    Ok(rho_2rr_curve(n, &[alpha], eps0)?[0])
}

/// Rényi bound for the sum of symmetric OHE reports: `2·ρ_2RR(n, α, ε0)`.
pub fn symohe_renyi_bound(n: u64, alpha: f64, eps0: LocalEpsilon) -> Result<RenyiPoint, AmplificationError> {
    let p = rho_2rr(n, alpha, eps0)?;
    Ok(RenyiPoint {
        alpha,
        rho: 2.0 * p.rho,
    })
}

pub fn symohe_renyi_curve(n: u64, alphas: &[f64], eps0: LocalEpsilon) -> Result<Vec<RenyiPoint>, AmplificationError> {
    Ok(rho_2rr_curve(n, alphas, eps0)?
        .into_iter()
        .map(|p| RenyiPoint {
            alpha: p.alpha,
            rho: 2.0 * p.rho,
        })
        .collect())
}

/// Converts an RDP curve to ε at the given δ:
/// `ε = min over points of ρ + ln(1/δ)/(α − 1)`.
pub fn rdp_to_dp(curve: &[RenyiPoint], delta: f64) -> Result<f64, AmplificationError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AmplificationError::InvalidDelta(delta));
    }
    if curve.is_empty() {
        return Err(AmplificationError::EmptyCurve);
    }
    let log_inv = (1.0 / delta).ln();
    curve.iter().try_fold(f64::INFINITY, |best, p| {
        let p = RenyiPoint::new(p.alpha, p.rho)?;
        Ok(best.min(p.rho + log_inv / (p.alpha - 1.0)))
    })
}

type CurveCache = Mutex<HashMap<(u64, u64), Arc<Vec<RenyiPoint>>>>;

fn cache() -> &'static CurveCache {
    static CACHE: OnceLock<CurveCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// ε certified for `n` symmetric OHE reports via the Rényi route on the
/// default α grid. Curves are memoised per `(n, ε0)`.
pub fn symohe_epsilon(eps0: LocalEpsilon, n: u64, delta: f64) -> Result<f64, AmplificationError> {
    let key = (n, eps0.value().to_bits());
    let cached = cache().lock().expect("renyi cache poisoned").get(&key).cloned();
    let curve = match cached {
        Some(c) => c,
        None => {
            let c = Arc::new(symohe_renyi_curve(n, &alpha_grid(), eps0)?);
            cache().lock().expect("renyi cache poisoned").insert(key, c.clone());
            c
        }
    };
    rdp_to_dp(&curve, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eps(v: f64) -> LocalEpsilon {
        LocalEpsilon::new(v).unwrap()
    }

    /// Brute-force oracle: linear-space PMFs by direct convolution and both
    /// divergence directions at every split.
    fn oracle(n: usize, alpha: f64, e0: f64) -> f64 {
        let p = e0.exp() / (1.0 + e0.exp());
        let q = 1.0 - p;
        let conv = |a: &[f64], b: &[f64]| {
            let mut out = vec![0.0; a.len() + b.len() - 1];
            for (i, x) in a.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    out[i + j] += x * y;
                }
            }
            out
        };
        let sum_law = |ones: usize| {
            let mut law = vec![1.0];
            for u in 0..n {
                let coin = if u < ones { [q, p] } else { [p, q] };
                law = conv(&law, &coin);
            }
            law
        };
        let div = |pp: &[f64], qq: &[f64]| {
            let s: f64 = pp.iter().zip(qq).map(|(a, b)| b * (a / b).powf(alpha)).sum();
            s.ln() / (alpha - 1.0)
        };
        (0..n)
            .map(|k| {
                let (a, b) = (sum_law(k + 1), sum_law(k));
                div(&a, &b).max(div(&b, &a))
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_user_order_two_closed_form() {
        let e = 1f64.exp();
        let expected = ((e * e + 1.0 / e) / (1.0 + e)).ln();
        let got = rho_2rr(1, 2.0, eps(1.0)).unwrap().rho;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.7353).abs() < 1e-3);
        assert!((symohe_renyi_bound(1, 2.0, eps(1.0)).unwrap().rho - 1.4706).abs() < 1e-3);
    }

    #[test]
    fn agrees_with_brute_force() {
        for n in [1usize, 2, 3, 5, 8, 12] {
            for alpha in [1.5, 2.0, 4.0, 8.0, 33.0] {
                for e0 in [0.5, 1.0, 3.0] {
                    let got = rho_2rr(n as u64, alpha, eps(e0)).unwrap().rho;
                    let want = oracle(n, alpha, e0);
                    assert!((got - want).abs() <= 1e-9 * want.max(1.0), "n={n} a={alpha} e={e0}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn frozen_reference_values() {
        // computed with numpy convolution, both directions
        for (n, alpha, want) in [(5u64, 4.0, 0.53604), (10, 2.0, 0.12743), (50, 1.5, 0.01672), (100, 8.0, 0.04626)] {
            let got = rho_2rr(n, alpha, eps(1.0)).unwrap().rho;
            assert!((got - want).abs() < 1e-5, "n={n} a={alpha}: {got}");
        }
    }

    #[test]
    fn zero_epsilon_is_zero() {
        for p in rho_2rr_curve(20, &alpha_grid(), eps(0.0)).unwrap() {
            assert_eq!(p.rho, 0.0);
        }
        assert_eq!(symohe_renyi_bound(7, 3.0, eps(0.0)).unwrap().rho, 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(rho_2rr(0, 2.0, eps(1.0)), Err(AmplificationError::EmptyCohort));
        assert_eq!(rho_2rr(3, 1.0, eps(1.0)), Err(AmplificationError::InvalidAlpha(1.0)));
        assert_eq!(
            rho_2rr(MAX_EXACT_COHORT + 1, 2.0, eps(1.0)),
            Err(AmplificationError::CohortTooLarge(MAX_EXACT_COHORT + 1))
        );
        assert_eq!(rdp_to_dp(&[], 1e-6), Err(AmplificationError::EmptyCurve));
        assert!(rdp_to_dp(&[RenyiPoint { alpha: 2.0, rho: 0.0 }], 1.0).is_err());
    }

    #[test]
    fn rdp_conversion_examples() {
        let e = rdp_to_dp(&[RenyiPoint::new(2.0, 0.0).unwrap()], 1e-6).unwrap();
        assert!((e - 13.815_510_557_964_274).abs() < 1e-9);
        let e = rdp_to_dp(&[RenyiPoint::new(1e6, 0.5).unwrap()], 0.5).unwrap();
        assert!(e > 0.5 && e < 0.5 + 1e-6);
        let curve = [RenyiPoint::new(2.0, 0.1).unwrap(), RenyiPoint::new(10.0, 0.3).unwrap()];
        let e = rdp_to_dp(&curve, 1e-3).unwrap();
        assert!((e - (0.3 + (1e3f64).ln() / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn alpha_grid_shape() {
        let g = alpha_grid();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], 1.0625);
        assert_eq!(*g.last().unwrap(), 257.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn large_cohort_stays_finite() {
        let curve = symohe_renyi_curve(2000, &alpha_grid(), eps(5.0)).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].rho <= w[1].rho + 1e-12, "{w:?}");
        }
        assert!(curve.iter().all(|p| p.rho.is_finite() && p.rho <= 10.0 + 1e-9));
    }
}
