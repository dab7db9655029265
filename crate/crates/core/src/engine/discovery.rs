use serde::{Deserialize, Serialize};

use super::{select_frequent, Engine, EngineError, Fleet, RoundOutcome, DEFAULT_TAU};
use crate::amplification::{CompositionLedger, NeumaierSum};
use crate::ldp::LocalEpsilon;
use crate::recipe::{
    Budgets, DataContentType, FeatureDoc, Query, QueryFilter, Recipe, RecipeDoc,
};

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_stream() -> String {
    "keyboard".into()
}

fn default_field() -> String {
    "ngram".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundBudget {
    pub aggregate_epsilon: f64,
    pub delta: f64,
}

/// Totals and per-round parameters for one discovery analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryPlan {
    pub analysis_id: String,
    #[serde(default = "default_stream")]
    pub stream: String,
    #[serde(default = "default_field")]
    pub field: String,
    pub vocab: Vec<String>,
    /// Longest n-gram to learn; one round per length.
    pub max_length: usize,
    pub local_epsilon: LocalEpsilon,
    pub total_epsilon: f64,
    pub total_delta: f64,
    pub min_cohort: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Explicit per-round split; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<RoundBudget>>,
}

impl DiscoveryPlan {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::PlanExceeded(m));
        if self.max_length == 0 {
            return bad("max_length must be at least 1".into());
        }
        if !(self.total_epsilon > 0.0 && self.total_epsilon.is_finite()) {
            return bad(format!("total_epsilon {}", self.total_epsilon));
        }
        if !(self.total_delta > 0.0 && self.total_delta < 1.0) {
            return bad(format!("total_delta {}", self.total_delta));
        }
        if self.vocab.is_empty() || self.min_cohort == 0 || !(self.tau >= 0.0) {
            return bad("plan needs a vocabulary, a positive cohort and tau >= 0".into());
        }
        if let Some(s) = &self.schedule {
            if s.len() != self.max_length {
                return bad(format!("schedule has {} rounds, max_length is {}", s.len(), self.max_length));
            }
            let eps: NeumaierSum = s.iter().map(|r| r.aggregate_epsilon).collect();
            let del: NeumaierSum = s.iter().map(|r| r.delta).collect();
            if eps.value() > self.total_epsilon || del.value() > self.total_delta {
                return bad("schedule exceeds the plan totals".into());
            }
        }
        Ok(())
    }

    /// Budget of round `index` (0-based).
    pub fn round_budget(&self, index: usize) -> RoundBudget {
        match &self.schedule {
            Some(s) => s[index],
            None => RoundBudget {
                aggregate_epsilon: self.total_epsilon / self.max_length as f64,
                delta: self.total_delta / self.max_length as f64,
            },
        }
    }

    fn recipe(&self, index: usize, prefixes: Vec<String>) -> Result<Recipe, EngineError> {
        let b = self.round_budget(index);
        let doc = RecipeDoc {
            recipe_id: format!("{}.round{}", self.analysis_id, index + 1),
            version: 1,
            analysis_id: self.analysis_id.clone(),
            query: Query {
                stream: self.stream.clone(),
                select: vec![self.field.clone()],
                filter: Some(QueryFilter::PrefixInTree {
                    field: self.field.clone(),
                }),
            },
            non_sensitive_fields: Vec::new(),
            budgets: Budgets {
                local_epsilon: self.local_epsilon,
                aggregate_epsilon: b.aggregate_epsilon,
                delta: b.delta,
                min_cohort: self.min_cohort,
            },
            data_content_type: DataContentType {
                features: vec![FeatureDoc::PrefixTree {
                    field: self.field.clone(),
                    prefixes: Some(prefixes),
                    prefix_tree_hash: None,
                    vocab: self.vocab.clone(),
                }],
            },
        };
        Recipe::from_doc(doc).map_err(|e| EngineError::PlanExceeded(e.to_string()))
    }

    fn fits(&self, ledger: &CompositionLedger, next: RoundBudget) -> bool {
        let (e, d) = ledger.basic();
        let mut eps = NeumaierSum::default();
        eps.add(e);
        eps.add(next.aggregate_epsilon);
        let mut del = NeumaierSum::default();
        del.add(d);
        del.add(next.delta);
        eps.value() <= self.total_epsilon && del.value() <= self.total_delta
    }
}

/// The 1-gram recipe: a single empty prefix.
pub fn first_recipe(plan: &DiscoveryPlan) -> Result<Recipe, EngineError> {
    plan.validate()?;
    plan.recipe(0, vec![String::new()])
}

/// Builds round `index` from the previous round's frequent phrases.
/// `Ok(None)` means there is nothing left to extend.
pub fn extend_prefixes(
    frequent: &[String],
    plan: &DiscoveryPlan,
    index: usize,
    ledger: &CompositionLedger,
) -> Result<Option<Recipe>, EngineError> {
    if frequent.is_empty() {
        return Ok(None);
    }
    plan.validate()?;
    if index >= plan.max_length {
        return Err(EngineError::PlanExceeded(format!(
            "round {} beyond max_length {}",
            index + 1,
            plan.max_length
        )));
    }
    let next = plan.round_budget(index);
    if !plan.fits(ledger, next) {
        let (e, d) = ledger.basic();
        return Err(EngineError::PlanExceeded(format!(
            "({}, {}) on top of ({e}, {d}) exceeds ({}, {})",
            next.aggregate_epsilon, next.delta, plan.total_epsilon, plan.total_delta
        )));
    }
    plan.recipe(index, frequent.to_vec()).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedPhrase {
    pub phrase: String,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryStatus {
    Running,
    Gated,
    Exhausted,
    Done,
}

/// Everything learned so far in one discovery analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscoveryState {
    pub analysis_id: String,
    /// Completed rounds.
    pub round: usize,
    /// `levels[l]` holds the accepted phrases of `l + 1` words.
    pub levels: Vec<Vec<AcceptedPhrase>>,
    /// Phrases that ended exactly at an accepted prefix.
    pub terminal: Vec<AcceptedPhrase>,
    pub ledger: CompositionLedger,
    pub history: Vec<RoundOutcome>,
    pub status: DiscoveryStatus,
}

impl DiscoveryState {
    pub fn new(analysis_id: &str) -> Self {
        Self {
            analysis_id: analysis_id.to_string(),
            round: 0,
            levels: Vec::new(),
            terminal: Vec::new(),
            ledger: CompositionLedger::default(),
            history: Vec::new(),
            status: DiscoveryStatus::Running,
        }
    }

    /// Accepted phrases of `length` words.
    pub fn frequent(&self, length: usize) -> Vec<&str> {
        length
            .checked_sub(1)
            .and_then(|l| self.levels.get(l))
            .map(|v| v.iter().map(|p| p.phrase.as_str()).collect())
            .unwrap_or_default()
    }

    /// The recipe the next round would deploy, if any.
    pub fn next_recipe(&self, plan: &DiscoveryPlan) -> Result<Option<Recipe>, EngineError> {
        if self.status != DiscoveryStatus::Running || self.round >= plan.max_length {
            return Ok(None);
        }
        if self.round == 0 {
            let r = first_recipe(plan)?;
            return if plan.fits(&self.ledger, plan.round_budget(0)) {
                Ok(Some(r))
            } else {
                Err(EngineError::PlanExceeded("first round exceeds the plan".into()))
            };
        }
        let prev: Vec<String> = self.frequent(self.round).into_iter().map(String::from).collect();
        extend_prefixes(&prev, plan, self.round, &self.ledger)
    }

    /// Runs one adaptive round. Returns `Ok(false)` once discovery has
    /// stopped.
    pub fn step(&mut self, plan: &DiscoveryPlan, engine: &mut Engine, fleet: &mut Fleet) -> Result<bool, EngineError> {
        let recipe = match self.next_recipe(plan) {
            Ok(Some(r)) => r,
            Ok(None) => {
                if self.status == DiscoveryStatus::Running {
                    self.status = DiscoveryStatus::Done;
                }
                return Ok(false);
            }
            Err(EngineError::PlanExceeded(_)) => {
                self.status = DiscoveryStatus::Exhausted;
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let outcome = engine.run_round(&recipe, fleet)?;
        self.record_round(&recipe, plan, outcome)?;
        Ok(self.status == DiscoveryStatus::Running)
    }

    /// Folds the outcome of a discovery recipe (one built by
    /// [`DiscoveryState::next_recipe`]) into the state.
    pub fn record_round(&mut self, recipe: &Recipe, plan: &DiscoveryPlan, outcome: RoundOutcome) -> Result<(), EngineError> {
        match &outcome {
            RoundOutcome::Gated { .. } => self.status = DiscoveryStatus::Gated,
            RoundOutcome::Published(result) => {
                let b = recipe.budgets();
                self.ledger
                    .record(b.aggregate_epsilon, b.delta)
                    .map_err(|e| EngineError::Ledger(e.to_string()))?;
                let selected = select_frequent(result, plan.tau);
                let accept = |(bin, phrase): &(usize, String)| AcceptedPhrase {
                    phrase: phrase.clone(),
                    estimate: result.estimates()[*bin],
                    stderr: result.stderr[*bin],
                };
                let level: Vec<AcceptedPhrase> = selected.extend.iter().map(accept).collect();
                if let Some(prev) = self.round.checked_sub(1).and_then(|l| self.levels.get(l)) {
                    assert!(
                        level.iter().all(|p| prev.iter().any(|q| p.phrase.starts_with(&format!("{} ", q.phrase)))),
                        "accepted phrase does not extend an accepted prefix"
                    );
                }
                self.terminal.extend(selected.terminal.iter().map(accept));
                self.round += 1;
                let empty = level.is_empty();
                self.levels.push(level);
                if empty || self.round >= plan.max_length {
                    self.status = DiscoveryStatus::Done;
                }
            }
        }
        self.history.push(outcome);
        Ok(())
    }

    /// Records a round run from an analyst-supplied recipe: it is charged to
    /// the ledger but does not change the prefix tree.
    pub fn record_custom(&mut self, recipe: &Recipe, outcome: RoundOutcome) -> Result<(), EngineError> {
        if outcome.published().is_some() {
            let b = recipe.budgets();
            self.ledger
                .record(b.aggregate_epsilon, b.delta)
                .map_err(|e| EngineError::Ledger(e.to_string()))?;
        }
        self.history.push(outcome);
        Ok(())
    }

    /// Whether `recipe`'s budget still fits the plan on top of the ledger.
    pub fn admits(&self, plan: &DiscoveryPlan, recipe: &Recipe) -> bool {
        let b = recipe.budgets();
        plan.fits(
            &self.ledger,
            RoundBudget {
                aggregate_epsilon: b.aggregate_epsilon,
                delta: b.delta,
            },
        )
    }
}

/// Runs rounds until the plan's length is reached, nothing is frequent, a
/// round is gated, or the budget runs out.
pub fn run_discovery(plan: &DiscoveryPlan, engine: &mut Engine, fleet: &mut Fleet) -> Result<DiscoveryState, EngineError> {
    plan.validate()?;
    let mut state = DiscoveryState::new(&plan.analysis_id);
    while state.step(plan, engine, fleet)? {}
    Ok(state)
}
