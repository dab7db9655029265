//! Server-side orchestration: deploy a recipe to a fleet, aggregate the
//! shares, debias, and drive adaptive prefix discovery.

mod discovery;
mod export;
pub mod synthetic;

pub use discovery::{
    extend_prefixes, first_recipe, run_discovery, AcceptedPhrase, DiscoveryPlan, DiscoveryState, DiscoveryStatus,
    RoundBudget,
};
pub use export::{histogram_csv, phrases_csv, to_canonical_json};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationError, Aggregator, Modulus, Publication};
use crate::amplification::{certify, AggregateBound, CompositionLedger};
use crate::device::{AuditDecision, Device, DeviceResponse, DeviceTrustConfig};
use crate::ldp::{debias, DebiasedHistogram, LdpError, OheMode};
use crate::recipe::{match_prefix, verify_query_class, BinLabel, PrefixTree, QueryDenial, Recipe};

/// Default z-score multiplier for calling a bin frequent.
pub const DEFAULT_TAU: f64 = 3.0;

const DEPLOY_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine trust copy refuses the recipe: {0}")]
    Refused(QueryDenial),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error("debiasing: {0}")]
    Debias(#[from] LdpError),
    #[error("device sent a {got:?} report, expected {expected:?}")]
    MixedMode { expected: OheMode, got: OheMode },
    #[error("no amplification bound certifies this round")]
    Uncertified,
    #[error("plan exceeded: {0}")]
    PlanExceeded(String),
    #[error("ledger: {0}")]
    Ledger(String),
}

/// A set of simulated devices.
#[derive(Debug, Default)]
pub struct Fleet {
    devices: Vec<Device>,
}

/// What the fleet did with one recipe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployStats {
    pub sent: u64,
    pub random_reports: u64,
    pub denied: u64,
    pub faulted: u64,
}

impl Fleet {
    pub fn new(devices: Vec<Device>) -> Self {
        Self { devices }
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn devices_mut(&mut self) -> &mut [Device] {
        &mut self.devices
    }

    pub fn push(&mut self, device: Device) {
        self.devices.push(device);
    }

    pub fn cache_tree(&mut self, tree: &PrefixTree) {
        for d in &mut self.devices {
            d.cache_tree(tree.clone());
        }
    }

    /// Runs the recipe on every device in parallel and feeds the responses
    /// to `sink` in device order.
    pub fn deploy(&mut self, recipe: &Recipe, now: u64, mut sink: impl FnMut(DeviceResponse)) {
        for chunk in self.devices.chunks_mut(DEPLOY_CHUNK) {
            let responses: Vec<DeviceResponse> = chunk.par_iter_mut().map(|d| d.handle_recipe(recipe, now)).collect();
            responses.into_iter().for_each(&mut sink);
        }
    }

    /// Budget table for `analysis_id` rolled up over every device that
    /// trusts it.
    pub fn budget_rollup(&self, analysis_id: &str) -> Option<BudgetRollup> {
        let snaps: Vec<_> = self.devices.iter().filter_map(|d| d.budget_snapshot(analysis_id)).collect();
        let first = snaps.first()?.clone();
        let a = &first.analysis;
        let analysis = BudgetRow {
            id: "analysis".into(),
            allowed_local_epsilon: a.allowed_local_epsilon,
            allowed_epsilon: a.allowed_epsilon,
            used_epsilon: Spread::of(snaps.iter().map(|s| s.analysis.used_epsilon)),
            allowed_reports: a.allowed_reports,
            used_reports: Spread::of(snaps.iter().map(|s| s.analysis.used_reports as f64)),
            total_reports: snaps.iter().map(|s| s.analysis.used_reports).sum(),
        };
        let fields = first
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| BudgetRow {
                id: f.field_id.clone(),
                allowed_local_epsilon: Some(f.allowed_local_epsilon),
                allowed_epsilon: f.allowed_epsilon,
                used_epsilon: Spread::of(snaps.iter().map(|s| s.fields[i].used_epsilon)),
                allowed_reports: f.allowed_reports,
                used_reports: Spread::of(snaps.iter().map(|s| s.fields[i].used_reports as f64)),
                total_reports: snaps.iter().map(|s| s.fields[i].used_reports).sum(),
            })
            .collect();
        Some(BudgetRollup {
            devices: snaps.len() as u64,
            analysis,
            fields,
            allowed_delta: first.allowed_delta,
            used_delta: Spread::of(snaps.iter().map(|s| s.used_delta)),
            total_charges: snaps.iter().map(|s| s.charges).sum(),
        })
    }

    /// Number of audit records across the fleet that declare an egress for
    /// `recipe_id`.
    pub fn audited_egress(&self, recipe_id: &str) -> u64 {
        self.devices
            .iter()
            .flat_map(|d| d.export_audit())
            .filter(|r| {
                r.recipe_id == recipe_id && matches!(r.decision, AuditDecision::Sent | AuditDecision::RandomReport)
            })
            .count() as u64
    }
}

/// Smallest and largest value of a quantity across devices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        values
            .fold(None, |acc: Option<Spread>, v| {
                Some(match acc {
                    None => Spread { min: v, max: v },
                    Some(s) => Spread {
                        min: s.min.min(v),
                        max: s.max.max(v),
                    },
                })
            })
            .unwrap_or_default()
    }
}

/// One row of the fleet budget table: allowed values from the trust config,
/// used values rolled up over device accountants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_local_epsilon: Option<f64>,
    pub allowed_epsilon: f64,
    pub used_epsilon: Spread,
    pub allowed_reports: u64,
    pub used_reports: Spread,
    /// Reports charged across the whole fleet.
    pub total_reports: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRollup {
    pub devices: u64,
    pub analysis: BudgetRow,
    pub fields: Vec<BudgetRow>,
    pub allowed_delta: f64,
    pub used_delta: Spread,
    /// Charges across the whole fleet; equals the sum of device journals.
    pub total_charges: u64,
}

/// A published, debiased round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub recipe_id: String,
    pub cohort_size: u64,
    pub histogram: DebiasedHistogram,
    pub stderr: Vec<f64>,
    pub labels: Vec<String>,
    pub aggregate_bound: AggregateBound,
    pub deploy: DeployStats,
    /// Structured per-feature labels, parallel to `labels`.
    pub bin_labels: Vec<Vec<BinLabel>>,
}

impl RoundResult {
    pub fn estimates(&self) -> &[f64] {
        &self.histogram.estimates
    }

    /// Per-feature labels of one bin.
    pub fn bin_labels(&self, bin: usize) -> &[BinLabel] {
        &self.bin_labels[bin]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RoundOutcome {
    Published(Box<RoundResult>),
    /// Fewer than `min_cohort` reports: nothing about the data is released.
    Gated {
        recipe_id: String,
        min_cohort: u64,
    },
}

impl RoundOutcome {
    pub fn published(&self) -> Option<&RoundResult> {
        match self {
            RoundOutcome::Published(r) => Some(r),
            RoundOutcome::Gated { .. } => None,
        }
    }
}

/// Server state for one analysis: the engine's copy of the device trust
/// config, the ledger of released rounds and a synthetic clock.
#[derive(Debug)]
pub struct Engine {
    trust: Arc<DeviceTrustConfig>,
    tree_cache: BTreeMap<String, PrefixTree>,
    ledger: CompositionLedger,
    now: u64,
    modulus: Modulus,
}

impl Engine {
    pub fn new(trust: Arc<DeviceTrustConfig>) -> Self {
        Self {
            trust,
            tree_cache: BTreeMap::new(),
            ledger: CompositionLedger::default(),
            now: 0,
            modulus: Modulus::STANDARD,
        }
    }

    pub fn set_clock(&mut self, now: u64) {
        self.now = now;
    }

    pub fn ledger(&self) -> &CompositionLedger {
        &self.ledger
    }

    pub fn trust(&self) -> &DeviceTrustConfig {
        &self.trust
    }

    pub fn cache_tree(&mut self, tree: PrefixTree) {
        self.tree_cache.insert(tree.content_hash(), tree);
    }

    /// Randomizer mode configured for this analysis.
    pub fn mode_for(&self, analysis_id: &str) -> Option<OheMode> {
        match_prefix(&self.trust.analyses, analysis_id).map(|(_, a)| a.mode)
    }

    /// Deploys `recipe`, aggregates, and publishes a debiased histogram
    /// when the cohort threshold is met. Published rounds are appended to
    /// the ledger at the recipe's declared (ε, δ).
    pub fn run_round(&mut self, recipe: &Recipe, fleet: &mut Fleet) -> Result<RoundOutcome, EngineError> {
        let mut recipe = recipe.clone();
        verify_query_class(&mut recipe, &self.trust.query_classes(), &self.tree_cache).map_err(EngineError::Refused)?;
        let mode = self.mode_for(recipe.analysis_id()).expect("verified");
        let encoding = recipe.encoding().expect("resolved").clone();
        let bins = encoding.total_bins();
        let budgets = recipe.budgets().clone();
        let id = recipe.recipe_id().to_string();

        let mut agg = Aggregator::new(self.modulus);
        agg.open(&id, budgets.min_cohort, bins)?;
        let mut stats = DeployStats::default();
        let mut failure: Option<EngineError> = None;
        fleet.deploy(&recipe, self.now, |resp| {
            match &resp {
                DeviceResponse::Shares { .. } => stats.sent += 1,
                DeviceResponse::RandomReport { .. } => stats.random_reports += 1,
                DeviceResponse::Denied { .. } => stats.denied += 1,
                DeviceResponse::Faulted { .. } => stats.faulted += 1,
            }
            if failure.is_some() {
                return;
            }
            if let Some(e) = resp.into_egress() {
                if e.mode != mode {
                    failure = Some(EngineError::MixedMode { expected: mode, got: e.mode });
                } else if let Err(err) = agg.submit((e.share_a, e.share_b)) {
                    failure = Some(err.into());
                }
            }
        });
        if let Some(f) = failure {
            return Err(f);
        }

        let (received, counts) = match agg.close_and_publish(&id)? {
            Publication::Gated { recipe_id, min_cohort } => {
                return Ok(RoundOutcome::Gated { recipe_id, min_cohort });
            }
            Publication::Published { received, counts, .. } => (received, counts),
        };
        let histogram = debias(mode, &counts, received, budgets.local_epsilon)?;
        // the bound only improves with cohort size, so fall back to the
        // threshold the devices certified when the exact cohort is out of
        // reach of every route
        let bound = [received, budgets.min_cohort]
            .into_iter()
            .find_map(|n| certify(mode, budgets.local_epsilon, n, budgets.delta).ok().flatten())
            .ok_or(EngineError::Uncertified)?;
        self.ledger
            .record(budgets.aggregate_epsilon, budgets.delta)
            .map_err(|e| EngineError::Ledger(e.to_string()))?;
        let stderr = histogram.stderrs();
        let labels = (0..bins).map(|b| encoding.label_string(b)).collect();
        let bin_labels = (0..bins).map(|b| encoding.labels(b)).collect();
        Ok(RoundOutcome::Published(Box::new(RoundResult {
            recipe_id: id,
            cohort_size: received,
            histogram,
            stderr,
            labels,
            aggregate_bound: bound,
            deploy: stats,
            bin_labels,
        })))
    }
}

/// Bins called frequent in one round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequentSet {
    /// Bins to extend next round, with the phrase each one stands for.
    pub extend: Vec<(usize, String)>,
    /// End-token bins: complete phrases, not extended.
    pub terminal: Vec<(usize, String)>,
    /// Frequent bins with no phrase feature (e.g. numeric only).
    pub other: Vec<usize>,
}

impl FrequentSet {
    pub fn len(&self) -> usize {
        self.extend.len() + self.terminal.len() + self.other.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bins(&self) -> BTreeSet<usize> {
        self.extend
            .iter()
            .chain(&self.terminal)
            .map(|(b, _)| *b)
            .chain(self.other.iter().copied())
            .collect()
    }
}

/// Bins whose estimate is at least `tau` standard errors. OOV bins are never
/// selected; end-token bins are reported as terminal.
pub fn select_frequent(result: &RoundResult, tau: f64) -> FrequentSet {
    let mut out = FrequentSet::default();
    for (bin, (&est, &se)) in result.estimates().iter().zip(&result.stderr).enumerate() {
        if !(est > 0.0 && est >= tau * se) {
            continue;
        }
        let labels = result.bin_labels(bin);
        if labels.iter().any(|l| matches!(l, BinLabel::Oov | BinLabel::LeafOov { .. })) {
            continue;
        }
        if labels
            .iter()
            .any(|l| matches!(l, BinLabel::EndToken { prefix } if prefix.is_empty()))
        {
            continue;
        }
        let phrase = labels.iter().find_map(|l| match l {
            BinLabel::EndToken { prefix } => Some((true, prefix.clone())),
            BinLabel::Word { .. } => Some((false, l.phrase().expect("word bins have phrases"))),
            _ => None,
        });
        match phrase {
            Some((true, p)) => out.terminal.push((bin, p)),
            Some((false, p)) => out.extend.push((bin, p)),
            None => out.other.push(bin),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldp::LocalEpsilon;

    fn result(estimates: Vec<f64>, stderr: Vec<f64>, labels: Vec<BinLabel>) -> RoundResult {
        let n = estimates.len();
        RoundResult {
            recipe_id: "r".into(),
            cohort_size: 1000,
            histogram: DebiasedHistogram {
                estimates,
                n: 1000,
                epsilon0: LocalEpsilon::new(1.0).unwrap(),
                mode: OheMode::Symmetric,
            },
            stderr,
            labels: vec![String::new(); n],
            aggregate_bound: AggregateBound {
                epsilon: 1.0,
                delta: 1e-6,
                n: 1000,
                epsilon0: LocalEpsilon::new(1.0).unwrap(),
                model: crate::ldp::NeighborModel::Deletion,
            },
            deploy: DeployStats::default(),
            bin_labels: labels.into_iter().map(|l| vec![l]).collect(),
        }
    }

    fn word(w: &str) -> BinLabel {
        BinLabel::Word {
            prefix: String::new(),
            word: w.into(),
        }
    }

    #[test]
    fn threshold_rule() {
        let r = result(vec![500.0, 100.0], vec![80.0, 80.0], vec![word("a"), word("b")]);
        let s = select_frequent(&r, 3.0);
        assert_eq!(s.extend, vec![(0, "a".to_string())]);
    }

    #[test]
    fn oov_and_end_token_are_not_extended() {
        let r = result(
            vec![900.0, 900.0, 900.0, 900.0],
            vec![10.0; 4],
            vec![
                BinLabel::Oov,
                BinLabel::LeafOov { prefix: "i".into() },
                BinLabel::EndToken { prefix: "i am".into() },
                BinLabel::Word {
                    prefix: "i".into(),
                    word: "got".into(),
                },
            ],
        );
        let s = select_frequent(&r, DEFAULT_TAU);
        assert_eq!(s.terminal, vec![(2, "i am".to_string())]);
        assert_eq!(s.extend, vec![(3, "i got".to_string())]);
        assert_eq!(s.bins(), BTreeSet::from([2, 3]));
    }
}
