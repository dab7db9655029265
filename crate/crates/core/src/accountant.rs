//! On-device budget accountant.
//!
//! One [`Accountant`] guards one analysis on one device: the analysis-level
//! ε and report budgets plus a table of per-field budgets. A query is run
//! only when every check passes, and running it charges the analysis and
//! every field it touches. Charges are journaled so a restart cannot reset
//! the counters.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amplification::{certify, compose_advanced, min_cohort_size, NeumaierSum};
use crate::ldp::{LocalEpsilon, NeighborModel, OheMode};

pub const DEFAULT_ALLOWED_DELTA: f64 = 1e-6;
pub const DEFAULT_COMPOSITION_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBudget {
    pub allowed_epsilon: f64,
    #[serde(default)]
    pub used_epsilon: f64,
    pub allowed_reports: u64,
    #[serde(default)]
    pub used_reports: u64,
    /// Per-report local budget for the analysis. When absent, the largest
    /// field-level local budget stands in for it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_local_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBudget {
    pub field_id: String,
    pub allowed_local_epsilon: f64,
    pub allowed_epsilon: f64,
    #[serde(default)]
    pub used_epsilon: f64,
    pub allowed_reports: u64,
    #[serde(default)]
    pub used_reports: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CompositionRule {
    /// `ε + ε_used ≤ ε_allowed`.
    #[default]
    Basic,
    /// Check 1 bounds the advanced composition of `k_used + 1` queries at the
    /// largest per-query ε seen so far.
    Advanced { slack: f64 },
}

fn default_delta() -> f64 {
    DEFAULT_ALLOWED_DELTA
}

fn default_floor() -> u64 {
    1
}

/// Initial budgets for one analysis, as shipped in the device trust config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub analysis: AnalysisBudget,
    pub fields: Vec<FieldBudget>,
    #[serde(default = "default_delta")]
    pub allowed_delta: f64,
    #[serde(default)]
    pub composition: CompositionRule,
    /// Device-side minimum cohort; Check 3 uses the larger of this and the
    /// query's own `min_cohort`.
    #[serde(default = "default_floor")]
    pub min_cohort_floor: u64,
}

impl BudgetConfig {
    /// The keyboard example: analysis 0.5 / 1 report; fields `ngram`
    /// (local 5, aggregate 1), `age` (local 2, aggregate 0.3) and
    /// `perplexity` (local 8, aggregate 1), one report each.
    pub fn keyboard_example() -> Self {
        let field = |id: &str, local: f64, agg: f64| FieldBudget {
            field_id: id.to_string(),
            allowed_local_epsilon: local,
            allowed_epsilon: agg,
            used_epsilon: 0.0,
            allowed_reports: 1,
            used_reports: 0,
        };
        Self {
            analysis: AnalysisBudget {
                allowed_epsilon: 0.5,
                used_epsilon: 0.0,
                allowed_reports: 1,
                used_reports: 0,
                allowed_local_epsilon: None,
            },
            fields: vec![
                field("ngram", 5.0, 1.0),
                field("age", 2.0, 0.3),
                field("perplexity", 8.0, 1.0),
            ],
            allowed_delta: DEFAULT_ALLOWED_DELTA,
            composition: CompositionRule::Basic,
            min_cohort_floor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCost {
    pub local_epsilon: LocalEpsilon,
    pub aggregate_epsilon: f64,
    pub aggregate_delta: f64,
    pub fields_accessed: BTreeSet<String>,
    pub min_cohort: u64,
    pub mode: OheMode,
}

impl QueryCost {
    /// Smallest cohort for which the closed form certifies `aggregate_epsilon`
    /// at this local ε; useful for filling `min_cohort`.
    pub fn closed_form_cohort(local_epsilon: LocalEpsilon, aggregate_epsilon: f64, delta: f64) -> Option<u64> {
        min_cohort_size(local_epsilon, aggregate_epsilon, delta, NeighborModel::Replacement).ok()
    }
}

/// Why a query was refused. Variants are listed in the order they are
/// checked; a denial names the first failing one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum DenyReason {
    #[error("malformed cost: {detail}")]
    InvalidCost { detail: String },
    #[error("analysis budget: {requested} + {used} > {allowed}")]
    AnalysisEpsilon { requested: f64, used: f64, allowed: f64 },
    #[error("analysis reports: {used} + 1 > {allowed}")]
    AnalysisReports { used: u64, allowed: u64 },
    #[error("field {field} is not in the budget table")]
    UnknownField { field: String },
    #[error("field {field} local budget: {requested} > {allowed}")]
    FieldLocalEpsilon { field: String, requested: f64, allowed: f64 },
    #[error("field {field} aggregate budget: {requested} + {used} > {allowed}")]
    FieldEpsilon {
        field: String,
        requested: f64,
        used: f64,
        allowed: f64,
    },
    #[error("field {field} reports: {used} + 1 > {allowed}")]
    FieldReports { field: String, used: u64, allowed: u64 },
    #[error("delta ledger: {requested} + {used} > {allowed}")]
    Delta { requested: f64, used: f64, allowed: f64 },
    #[error("cohort of {m} at eps0 = {epsilon0} does not certify {target} (best: {certified:?})")]
    Cohort {
        m: u64,
        epsilon0: f64,
        target: f64,
        certified: Option<f64>,
    },
}

impl DenyReason {
    /// Which of the three checks (or 0 for validation, 4 for the δ ledger)
    /// produced the denial.
    pub fn check_number(&self) -> u8 {
        match self {
            Self::InvalidCost { .. } => 0,
            Self::AnalysisEpsilon { .. } | Self::AnalysisReports { .. } => 1,
            Self::UnknownField { .. }
            | Self::FieldLocalEpsilon { .. }
            | Self::FieldEpsilon { .. }
            | Self::FieldReports { .. } => 2,
            Self::Cohort { .. } => 3,
            Self::Delta { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Approve {
        /// Cohort used for Check 3 and the ε it certifies.
        m: u64,
        certified_epsilon: f64,
    },
    Deny { reason: DenyReason },
}

impl Decision {
    pub fn is_approve(&self) -> bool {
        matches!(self, Decision::Approve { .. })
    }
}

#[derive(Debug, Error)]
pub enum AccountantFault {
    #[error("charge without approval: {0}")]
    NotApproved(DenyReason),
    #[error("inconsistent accountant state: {0}")]
    Inconsistent(String),
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal entry {line}: {detail}")]
    Journal { line: usize, detail: String },
}

/// One journaled charge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub cost: QueryCost,
}

/// Exported view of the accountant, suitable for audit logs and the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantSnapshot {
    pub analysis: AnalysisBudget,
    pub fields: Vec<FieldBudget>,
    pub allowed_delta: f64,
    pub used_delta: f64,
    pub composition: CompositionRule,
    pub min_cohort_floor: u64,
    pub charges: u64,
}

#[derive(Debug, Clone, Default)]
struct Usage {
    epsilon: NeumaierSum,
    reports: u64,
}

#[derive(Debug)]
pub struct Accountant {
    config: BudgetConfig,
    analysis: Usage,
    fields: BTreeMap<String, (FieldBudget, Usage)>,
    delta: NeumaierSum,
    max_epsilon: f64,
    max_delta: f64,
    journal: Vec<JournalEntry>,
    sink: Option<File>,
}

fn finite_nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl Accountant {
    /// Builds an accountant from initial budgets. Nonzero `used_*` entries in
    /// the config are taken as already spent.
    pub fn new(config: BudgetConfig) -> Result<Self, AccountantFault> {
        let bad = |m: String| Err(AccountantFault::Inconsistent(m));
        let a = &config.analysis;
        if !finite_nonneg(a.allowed_epsilon) || !finite_nonneg(a.used_epsilon) {
            return bad("analysis epsilon must be finite and non-negative".into());
        }
        if a.used_epsilon > a.allowed_epsilon || a.used_reports > a.allowed_reports {
            return bad(format!("analysis used exceeds allowed: {a:?}"));
        }
        if let Some(l) = a.allowed_local_epsilon {
            if !finite_nonneg(l) {
                return bad(format!("analysis local budget {l}"));
            }
        }
        if !(config.allowed_delta >= 0.0 && config.allowed_delta <= 1.0) {
            return bad(format!("allowed delta {}", config.allowed_delta));
        }
        if let CompositionRule::Advanced { slack } = config.composition {
            if !(slack > 0.0 && slack < 1.0) {
                return bad(format!("composition slack {slack}"));
            }
        }
        let mut fields = BTreeMap::new();
        for f in &config.fields {
            if ![f.allowed_local_epsilon, f.allowed_epsilon, f.used_epsilon]
                .into_iter()
                .all(finite_nonneg)
            {
                return bad(format!("field {} has a negative or non-finite budget", f.field_id));
            }
            if f.used_epsilon > f.allowed_epsilon || f.used_reports > f.allowed_reports {
                return bad(format!("field {} used exceeds allowed", f.field_id));
            }
            let mut usage = Usage::default();
            usage.epsilon.add(f.used_epsilon);
            usage.reports = f.used_reports;
            if fields.insert(f.field_id.clone(), (f.clone(), usage)).is_some() {
                return bad(format!("duplicate field {}", f.field_id));
            }
        }
        let mut analysis = Usage::default();
        analysis.epsilon.add(a.used_epsilon);
        analysis.reports = a.used_reports;
        Ok(Self {
            config,
            analysis,
            fields,
            delta: NeumaierSum::new(),
            max_epsilon: 0.0,
            max_delta: 0.0,
            journal: Vec::new(),
            sink: None,
        })
    }

    /// Rebuilds state by replaying journaled charges on top of `config`.
    pub fn restore(config: BudgetConfig, entries: &[JournalEntry]) -> Result<Self, AccountantFault> {
        let mut acc = Self::new(config)?;
        for (i, e) in entries.iter().enumerate() {
            if e.seq != i as u64 {
                return Err(AccountantFault::Journal {
                    line: i + 1,
                    detail: format!("sequence {} out of order", e.seq),
                });
            }
            acc.charge(&e.cost)?;
        }
        Ok(acc)
    }

    /// Opens (or creates) a JSON-lines journal at `path`, replays it, and
    /// appends every later charge to it.
    pub fn with_journal_file(config: BudgetConfig, path: impl AsRef<Path>) -> Result<Self, AccountantFault> {
        let path: PathBuf = path.as_ref().to_path_buf();
        let mut entries = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: JournalEntry = serde_json::from_str(&line).map_err(|err| AccountantFault::Journal {
                    line: i + 1,
                    detail: err.to_string(),
                })?;
                entries.push(e);
            }
        }
        let mut acc = Self::restore(config, &entries)?;
        acc.sink = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        Ok(acc)
    }

    pub fn config(&self) -> &BudgetConfig {
        &self.config
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    /// Runs Checks 1-3 plus the δ ledger without changing any state.
    pub fn check(&self, cost: &QueryCost) -> Decision {
        match self.evaluate(cost) {
            Ok((m, certified_epsilon)) => Decision::Approve { m, certified_epsilon },
            Err(reason) => Decision::Deny { reason },
        }
    }

    fn evaluate(&self, cost: &QueryCost) -> Result<(u64, f64), DenyReason> {
        let invalid = |detail: String| Err(DenyReason::InvalidCost { detail });
        let eps = cost.aggregate_epsilon;
        let delta = cost.aggregate_delta;
        if !finite_nonneg(eps) {
            return invalid(format!("aggregate epsilon {eps}"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return invalid(format!("aggregate delta {delta}"));
        }
        if cost.fields_accessed.is_empty() {
            return invalid("no fields accessed".into());
        }
        if cost.min_cohort == 0 {
            return invalid("min_cohort must be at least 1".into());
        }

        // Check 1
        let a = &self.config.analysis;
        let used = self.analysis.epsilon.value();
        let fits = match self.config.composition {
            CompositionRule::Basic => {
                let mut s = self.analysis.epsilon;
                s.add(eps);
                s.value() <= a.allowed_epsilon
            }
            CompositionRule::Advanced { slack } => {
                let k = self.analysis.reports + 1;
                compose_advanced(self.max_epsilon.max(eps), self.max_delta.max(delta), k, slack)
                    .map(|(e, _)| e <= a.allowed_epsilon)
                    .unwrap_or(false)
            }
        };
        if !fits {
            return Err(DenyReason::AnalysisEpsilon {
                requested: eps,
                used,
                allowed: a.allowed_epsilon,
            });
        }
        if self.analysis.reports + 1 > a.allowed_reports {
            return Err(DenyReason::AnalysisReports {
                used: self.analysis.reports,
                allowed: a.allowed_reports,
            });
        }

        // Check 2
        let eps0 = cost.local_epsilon.value();
        for field in &cost.fields_accessed {
            let Some((budget, usage)) = self.fields.get(field) else {
                return Err(DenyReason::UnknownField { field: field.clone() });
            };
            if eps0 > budget.allowed_local_epsilon {
                return Err(DenyReason::FieldLocalEpsilon {
                    field: field.clone(),
                    requested: eps0,
                    allowed: budget.allowed_local_epsilon,
                });
            }
            let mut s = usage.epsilon;
            s.add(eps);
            if s.value() > budget.allowed_epsilon {
                return Err(DenyReason::FieldEpsilon {
                    field: field.clone(),
                    requested: eps,
                    used: usage.epsilon.value(),
                    allowed: budget.allowed_epsilon,
                });
            }
            if usage.reports + 1 > budget.allowed_reports {
                return Err(DenyReason::FieldReports {
                    field: field.clone(),
                    used: usage.reports,
                    allowed: budget.allowed_reports,
                });
            }
        }

        // δ ledger
        let mut d = self.delta;
        d.add(delta);
        if d.value() > self.config.allowed_delta {
            return Err(DenyReason::Delta {
                requested: delta,
                used: self.delta.value(),
                allowed: self.config.allowed_delta,
            });
        }

        // Check 3
        let m = cost.min_cohort.max(self.config.min_cohort_floor);
        let certified = certify(cost.mode, cost.local_epsilon, m, delta)
            .ok()
            .flatten()
            .map(|b| b.epsilon);
        match certified {
            Some(c) if c <= eps => Ok((m, c)),
            _ => Err(DenyReason::Cohort {
                m,
                epsilon0: eps0,
                target: eps,
                certified,
            }),
        }
    }

    /// Applies the update rules for an approved query.
    ///
    /// The query is re-checked first; charging a query that would be denied
    /// is a fault and leaves the state untouched.
    pub fn charge(&mut self, cost: &QueryCost) -> Result<(), AccountantFault> {
        if let Err(reason) = self.evaluate(cost) {
            return Err(AccountantFault::NotApproved(reason));
        }
        let entry = JournalEntry {
            seq: self.journal.len() as u64,
            cost: cost.clone(),
        };
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("journal entry serialises");
            writeln!(sink, "{line}")?;
            sink.sync_data()?;
        }
        let eps = cost.aggregate_epsilon;
        self.analysis.epsilon.add(eps);
        self.analysis.reports += 1;
        for field in &cost.fields_accessed {
            let (_, usage) = self.fields.get_mut(field).expect("checked above");
            usage.epsilon.add(eps);
            usage.reports += 1;
        }
        self.delta.add(cost.aggregate_delta);
        self.max_epsilon = self.max_epsilon.max(eps);
        self.max_delta = self.max_delta.max(cost.aggregate_delta);
        self.journal.push(entry);
        Ok(())
    }

    /// Check and, on approval, charge in one step.
    pub fn check_and_charge(&mut self, cost: &QueryCost) -> Result<Decision, AccountantFault> {
        let decision = self.check(cost);
        if decision.is_approve() {
            self.charge(cost)?;
        }
        Ok(decision)
    }

    pub fn snapshot(&self) -> AccountantSnapshot {
        let mut analysis = self.config.analysis.clone();
        analysis.used_epsilon = self.analysis.epsilon.value();
        analysis.used_reports = self.analysis.reports;
        let fields = self
            .config
            .fields
            .iter()
            .map(|f| {
                let (_, usage) = &self.fields[&f.field_id];
                FieldBudget {
                    used_epsilon: usage.epsilon.value(),
                    used_reports: usage.reports,
                    ..f.clone()
                }
            })
            .collect();
        AccountantSnapshot {
            analysis,
            fields,
            allowed_delta: self.config.allowed_delta,
            used_delta: self.delta.value(),
            composition: self.config.composition,
            min_cohort_floor: self.config.min_cohort_floor,
            charges: self.journal.len() as u64,
        }
    }

    /// Upper bounds on local privacy loss implied by the report limits.
    pub fn local_loss_bound(&self) -> LocalLossBound {
        local_loss_bound(&self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLossBound {
    pub analysis: f64,
    pub fields: BTreeMap<String, f64>,
}

/// `ε_local × k_allowed` for the analysis and for each field.
pub fn local_loss_bound(config: &BudgetConfig) -> LocalLossBound {
    let local = config.analysis.allowed_local_epsilon.unwrap_or_else(|| {
        config
            .fields
            .iter()
            .map(|f| f.allowed_local_epsilon)
            .fold(0.0, f64::max)
    });
    let product = |eps: f64, k: u64| if k == 0 { 0.0 } else { eps * k as f64 };
    LocalLossBound {
        analysis: product(local, config.analysis.allowed_reports),
        fields: config
            .fields
            .iter()
            .map(|f| (f.field_id.clone(), product(f.allowed_local_epsilon, f.allowed_reports)))
            .collect(),
    }
}

/// Thread-safe accountant whose check-and-charge is a single critical
/// section.
#[derive(Debug)]
pub struct SharedAccountant(Mutex<Accountant>);

impl SharedAccountant {
    pub fn new(acc: Accountant) -> Self {
        Self(Mutex::new(acc))
    }

    fn lock(&self) -> MutexGuard<'_, Accountant> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn check(&self, cost: &QueryCost) -> Decision {
        self.lock().check(cost)
    }

    pub fn check_and_charge(&self, cost: &QueryCost) -> Result<Decision, AccountantFault> {
        self.lock().check_and_charge(cost)
    }

    pub fn snapshot(&self) -> AccountantSnapshot {
        self.lock().snapshot()
    }

    pub fn into_inner(self) -> Accountant {
        self.0.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(eps0: f64, eps: f64, fields: &[&str], m: u64) -> QueryCost {
        QueryCost {
            local_epsilon: LocalEpsilon::new(eps0).unwrap(),
            aggregate_epsilon: eps,
            aggregate_delta: 1e-6,
            fields_accessed: fields.iter().map(|s| s.to_string()).collect(),
            min_cohort: m,
            mode: OheMode::Asymmetric,
        }
    }

    fn ngram_cost() -> QueryCost {
        let le = LocalEpsilon::new(5.0).unwrap();
        let m = QueryCost::closed_form_cohort(le, 0.3, 1e-6).unwrap();
        cost(5.0, 0.3, &["ngram"], m)
    }

    #[test]
    fn keyboard_ngram_query_is_approved_and_charged() {
        let mut acc = Accountant::new(BudgetConfig::keyboard_example()).unwrap();
        let c = ngram_cost();
        assert!(acc.check(&c).is_approve());
        acc.charge(&c).unwrap();
        let s = acc.snapshot();
        assert_eq!((s.analysis.used_epsilon, s.analysis.used_reports), (0.3, 1));
        let ng = s.fields.iter().find(|f| f.field_id == "ngram").unwrap();
        assert_eq!((ng.used_epsilon, ng.used_reports), (0.3, 1));
        let age = s.fields.iter().find(|f| f.field_id == "age").unwrap();
        assert_eq!((age.used_epsilon, age.used_reports), (0.0, 0));
    }

    #[test]
    fn age_query_denied_on_field_aggregate_budget() {
        let acc = Accountant::new(BudgetConfig::keyboard_example()).unwrap();
        let d = acc.check(&cost(2.0, 0.4, &["age"], 1_000_000));
        match d {
            Decision::Deny {
                reason: DenyReason::FieldEpsilon { field, requested, allowed, .. },
            } => {
                assert_eq!(field, "age");
                assert_eq!((requested, allowed), (0.4, 0.3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn second_query_denied_on_report_count() {
        let mut acc = Accountant::new(BudgetConfig::keyboard_example()).unwrap();
        acc.charge(&ngram_cost()).unwrap();
        let d = acc.check(&cost(1.0, 0.01, &["perplexity"], 1_000_000));
        assert!(matches!(
            d,
            Decision::Deny {
                reason: DenyReason::AnalysisReports { used: 1, allowed: 1 }
            }
        ));
        assert!(matches!(acc.charge(&ngram_cost()), Err(AccountantFault::NotApproved(_))));
        assert_eq!(acc.snapshot().analysis.used_reports, 1);
    }

    #[test]
    fn deny_order_and_unknown_fields() {
        let acc = Accountant::new(BudgetConfig::keyboard_example()).unwrap();
        let d = acc.check(&cost(5.0, 0.6, &["ngram"], 1_000_000));
        assert_eq!(
            d,
            Decision::Deny {
                reason: DenyReason::AnalysisEpsilon {
                    requested: 0.6,
                    used: 0.0,
                    allowed: 0.5
                }
            }
        );
        let d = acc.check(&cost(5.0, 0.3, &["raw_text"], 1_000_000));
        assert!(matches!(d, Decision::Deny { reason: DenyReason::UnknownField { .. } }));
        let d = acc.check(&cost(3.0, 0.2, &["age"], 1_000_000));
        assert!(matches!(d, Decision::Deny { reason: DenyReason::FieldLocalEpsilon { .. } }));
        let d = acc.check(&cost(5.0, 0.3, &["ngram"], 100));
        match d {
            Decision::Deny { reason } => assert_eq!(reason.check_number(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn device_floor_raises_cohort() {
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.min_cohort_floor = 10_000_000;
        let acc = Accountant::new(cfg).unwrap();
        match acc.check(&cost(5.0, 0.3, &["ngram"], 1)) {
            Decision::Approve { m, .. } => assert_eq!(m, 10_000_000),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epsilon_charge_only_advances_reports() {
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.analysis.allowed_reports = 3;
        let mut acc = Accountant::new(cfg).unwrap();
        let c = cost(0.0, 0.0, &["ngram"], 1000);
        acc.charge(&c).unwrap();
        let s = acc.snapshot();
        assert_eq!((s.analysis.used_epsilon, s.analysis.used_reports), (0.0, 1));
    }

    #[test]
    fn delta_ledger_blocks_overspend() {
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.analysis.allowed_reports = 5;
        cfg.fields[0].allowed_reports = 5;
        let mut acc = Accountant::new(cfg).unwrap();
        let mut c = cost(5.0, 0.2, &["ngram"], 10_000_000);
        c.aggregate_delta = 6e-7;
        assert!(acc.check_and_charge(&c).unwrap().is_approve());
        match acc.check(&c) {
            Decision::Deny { reason } => assert_eq!(reason.check_number(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn advanced_composition_changes_check_one() {
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.analysis.allowed_epsilon = 2.0;
        cfg.analysis.allowed_reports = 100;
        cfg.fields[0].allowed_epsilon = 100.0;
        cfg.fields[0].allowed_reports = 100;
        cfg.allowed_delta = 1.0;
        let basic = Accountant::new(cfg.clone()).unwrap();
        cfg.composition = CompositionRule::Advanced {
            slack: DEFAULT_COMPOSITION_SLACK,
        };
        let adv = Accountant::new(cfg).unwrap();
        // a single 1.9 query fits the basic rule but not the advanced one
        let c = cost(5.0, 1.9, &["ngram"], 100_000);
        assert!(basic.check(&c).is_approve());
        assert!(!adv.check(&c).is_approve());
    }

    #[test]
    fn inconsistent_state_is_a_fault() {
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.analysis.used_epsilon = 0.6;
        assert!(matches!(Accountant::new(cfg), Err(AccountantFault::Inconsistent(_))));
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.fields[1].used_reports = 2;
        assert!(Accountant::new(cfg).is_err());
    }

    #[test]
    fn local_loss_bounds() {
        let b = local_loss_bound(&BudgetConfig::keyboard_example());
        assert_eq!(b.fields["ngram"], 5.0);
        assert_eq!(b.fields["age"], 2.0);
        assert_eq!(b.analysis, 8.0);
        let mut cfg = BudgetConfig::keyboard_example();
        cfg.analysis.allowed_reports = 0;
        cfg.analysis.allowed_local_epsilon = Some(3.0);
        assert_eq!(local_loss_bound(&cfg).analysis, 0.0);
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acct.jsonl");
        {
            let mut acc = Accountant::with_journal_file(BudgetConfig::keyboard_example(), &path).unwrap();
            acc.charge(&ngram_cost()).unwrap();
        }
        let acc = Accountant::with_journal_file(BudgetConfig::keyboard_example(), &path).unwrap();
        assert_eq!(acc.snapshot().analysis.used_reports, 1);
        assert!(!acc.check(&ngram_cost()).is_approve());
        let replayed = Accountant::restore(BudgetConfig::keyboard_example(), acc.journal()).unwrap();
        assert_eq!(replayed.snapshot(), acc.snapshot());
    }

    #[test]
    fn snapshot_round_trips_as_json() {
        let acc = Accountant::new(BudgetConfig::keyboard_example()).unwrap();
        let s = acc.snapshot();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<AccountantSnapshot>(&text).unwrap(), s);
    }
}
