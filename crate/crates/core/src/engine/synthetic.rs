//! Synthetic keyboard fleets for simulation and tests.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiscoveryPlan, Engine, EngineError, Fleet, DEFAULT_TAU};
use crate::accountant::{AnalysisBudget, BudgetConfig, CompositionRule, FieldBudget};
use crate::device::{AnalysisTrust, Device, DeviceTrustConfig, FieldType, StreamConfig};
use crate::ldp::{LocalEpsilon, OheMode};
use crate::recipe::{FieldValue, QueryClass, Record};

pub const VOCAB: [&str; 9] = ["a", "am", "got", "hello", "i", "is", "the", "to", "world"];

/// Twenty phrases over [`VOCAB`], most popular first.
pub const PHRASES: [&str; 20] = [
    "i am",
    "hello world",
    "i got a",
    "the world is",
    "i am the",
    "hello i am",
    "to the world",
    "i got the",
    "a world",
    "the hello",
    "is the world",
    "hello world is",
    "i is",
    "got to",
    "am i",
    "to a world",
    "world is a",
    "a hello",
    "is i",
    "the am",
];

fn default_zipf() -> f64 {
    1.2
}

fn default_events() -> usize {
    1
}

/// A fleet whose devices each type phrases drawn from a Zipf law over a
/// ranked phrase list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFleet {
    pub devices: usize,
    #[serde(default = "default_zipf")]
    pub zipf_s: f64,
    /// Ranked phrases; defaults to [`PHRASES`].
    #[serde(default)]
    pub phrases: Vec<String>,
    #[serde(default = "default_events")]
    pub events_per_device: usize,
    pub seed: u64,
}

impl SyntheticFleet {
    pub fn new(devices: usize, seed: u64) -> Self {
        Self {
            devices,
            zipf_s: default_zipf(),
            phrases: Vec::new(),
            events_per_device: 1,
            seed,
        }
    }

    pub fn phrase_list(&self) -> Vec<String> {
        if self.phrases.is_empty() {
            PHRASES.iter().map(|s| s.to_string()).collect()
        } else {
            self.phrases.clone()
        }
    }

    /// Probability of each ranked phrase: `k^-s / H`.
    pub fn weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = (1..=self.phrase_list().len()).map(|k| (k as f64).powf(-self.zipf_s)).collect();
        let h: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / h).collect()
    }

    /// The phrases each device types, in device order.
    pub fn sample(&self) -> Vec<Vec<String>> {
        let phrases = self.phrase_list();
        let dist = WeightedIndex::new(self.weights()).expect("positive weights");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        (0..self.devices)
            .map(|_| {
                (0..self.events_per_device)
                    .map(|_| phrases[dist.sample(&mut rng)].clone())
                    .collect()
            })
            .collect()
    }

    /// Builds the fleet, each device holding its sampled phrases.
    pub fn build(&self, trust: Arc<DeviceTrustConfig>) -> (Fleet, Truth) {
        let typed = self.sample();
        let truth = Truth::from_devices(&typed);
        let devices = typed
            .into_iter()
            .enumerate()
            .map(|(id, phrases)| {
                let mut d = Device::new(id as u64, trust.clone(), self.seed).expect("valid budget tables");
                for (t, p) in phrases.into_iter().enumerate() {
                    let rec = Record::from([("ngram".to_string(), FieldValue::Text(p))]);
                    d.ingest_event("keyboard", rec, t as u64).expect("schema matches");
                }
                d
            })
            .collect();
        (Fleet::new(devices), truth)
    }
}

/// Exact prefix counts over the fleet: the oracle for discovery.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// `counts[l]` maps each `l + 1`-word prefix to the number of devices
    /// holding at least one phrase with that prefix.
    pub counts: Vec<BTreeMap<String, u64>>,
    pub devices: u64,
}

impl Truth {
    pub fn from_devices(typed: &[Vec<String>]) -> Self {
        let mut counts: Vec<BTreeMap<String, u64>> = Vec::new();
        for phrases in typed {
            let mut seen: BTreeSet<(usize, String)> = BTreeSet::new();
            for p in phrases {
                let words: Vec<&str> = p.split_whitespace().collect();
                for l in 1..=words.len() {
                    seen.insert((l - 1, words[..l].join(" ")));
                }
            }
            for (l, prefix) in seen {
                if counts.len() <= l {
                    counts.resize_with(l + 1, BTreeMap::new);
                }
                *counts[l].entry(prefix).or_default() += 1;
            }
        }
        Self {
            counts,
            devices: typed.len() as u64,
        }
    }

    /// Prefixes of `length` words, most frequent first (ties by text).
    pub fn ranked(&self, length: usize) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = length
            .checked_sub(1)
            .and_then(|l| self.counts.get(l))
            .map(|m| m.iter().map(|(k, c)| (k.clone(), *c)).collect())
            .unwrap_or_default();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn count(&self, phrase: &str) -> u64 {
        let l = phrase.split_whitespace().count();
        l.checked_sub(1)
            .and_then(|l| self.counts.get(l))
            .and_then(|m| m.get(phrase))
            .copied()
            .unwrap_or(0)
    }
}

/// The default discovery plan: three rounds at ε0 = 5, cohort threshold
/// 10⁴, total (6, 3·10⁻⁶).
pub fn default_plan() -> DiscoveryPlan {
    DiscoveryPlan {
        analysis_id: "com.example.keyboard.discovery".into(),
        stream: "keyboard".into(),
        field: "ngram".into(),
        vocab: VOCAB.iter().map(|s| s.to_string()).collect(),
        max_length: 3,
        local_epsilon: LocalEpsilon::new(5.0).expect("positive"),
        total_epsilon: 6.0,
        total_delta: 3e-6,
        min_cohort: 10_000,
        tau: DEFAULT_TAU,
        schedule: None,
    }
}

/// Device trust matching a plan: a keyboard stream with one text field and
/// budgets exactly covering the plan.
pub fn trust_for_plan(plan: &DiscoveryPlan, mode: OheMode) -> DeviceTrustConfig {
    let rounds = plan.max_length as u64;
    let budget = BudgetConfig {
        analysis: AnalysisBudget {
            allowed_epsilon: plan.total_epsilon,
            used_epsilon: 0.0,
            allowed_reports: rounds,
            used_reports: 0,
            allowed_local_epsilon: Some(plan.local_epsilon.value()),
        },
        fields: vec![FieldBudget {
            field_id: plan.field.clone(),
            allowed_local_epsilon: plan.local_epsilon.value(),
            allowed_epsilon: plan.total_epsilon,
            used_epsilon: 0.0,
            allowed_reports: rounds,
            used_reports: 0,
        }],
        allowed_delta: plan.total_delta,
        composition: CompositionRule::Basic,
        min_cohort_floor: 1,
    };
    DeviceTrustConfig {
        analyses: BTreeMap::from([(
            plan.analysis_id.clone(),
            AnalysisTrust {
                query_class: QueryClass {
                    stream: plan.stream.clone(),
                    allowed_fields: BTreeSet::from([plan.field.clone()]),
                    templates: None,
                    non_sensitive_fields: BTreeSet::new(),
                },
                budget,
                mode,
            },
        )]),
        streams: vec![StreamConfig {
            stream_id: plan.stream.clone(),
            schema: BTreeMap::from([(plan.field.clone(), FieldType::Text)]),
            retention_secs: 30 * 24 * 3600,
        }],
    }
}

fn default_mode() -> OheMode {
    OheMode::Symmetric
}

/// A discovery plan plus the synthetic fleet it runs against. The CLI and
/// the HTTP service read the same document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub plan: DiscoveryPlan,
    pub fleet: SyntheticFleet,
    #[serde(default = "default_mode")]
    pub mode: OheMode,
}

impl SimulationConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The reference setup: default plan over 10⁵ devices.
    pub fn reference(seed: u64) -> Self {
        Self {
            plan: default_plan(),
            fleet: SyntheticFleet::new(100_000, seed),
            mode: OheMode::Symmetric,
        }
    }

    /// Validates the plan and builds the engine, fleet and ground truth.
    pub fn build(&self) -> Result<(Engine, Fleet, Truth), EngineError> {
        self.plan.validate()?;
        let trust = Arc::new(trust_for_plan(&self.plan, self.mode));
        let (fleet, truth) = self.fleet.build(trust.clone());
        Ok((Engine::new(trust), fleet, truth))
    }
}
