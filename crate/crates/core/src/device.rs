//! Simulated device: retained event streams, a fixed trust configuration,
//! and the recipe pipeline verify → budget → query → encode → randomize →
//! share → audit.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accountant::{Accountant, AccountantSnapshot, BudgetConfig, Decision, DenyReason, QueryCost};
use crate::aggregation::{encode_share, split, Modulus, ShareVector};
use crate::ldp::{encode_one_hot, randomize_with, OheMode};
use crate::recipe::{
    check_query_class, match_prefix, split_words, verify_query_class, FeatureRule, FieldValue, PrefixTree, QueryClass, QueryDenial,
    QueryFilter, Recipe, Record,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Number,
    Text,
}

impl FieldType {
    fn admits(self, v: &FieldValue) -> bool {
        matches!(
            (self, v),
            (FieldType::Number, FieldValue::Number(_)) | (FieldType::Text, FieldValue::Text(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub stream_id: String,
    pub schema: BTreeMap<String, FieldType>,
    /// Events older than this many seconds are expired.
    pub retention_secs: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("unknown stream {0}")]
    UnknownStream(String),
    #[error("record field {0} is not in the stream schema")]
    UnexpectedField(String),
    #[error("record lacks schema field {0}")]
    MissingField(String),
    #[error("field {0} has the wrong type")]
    WrongType(String),
    #[error("arrival time {now} precedes the last event at {last}")]
    ClockWentBack { now: u64, last: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub arrival: u64,
    pub record: Record,
}

/// An append-only, retention-limited stream of schema-conforming records.
#[derive(Debug, Clone)]
pub struct EventStream {
    config: StreamConfig,
    events: VecDeque<TimedEvent>,
}

impl EventStream {
    pub fn new(config: StreamConfig) -> Self {
        Self {
            config,
            events: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    fn validate(&self, record: &Record) -> Result<(), StreamError> {
        if let Some(k) = record.keys().find(|k| !self.config.schema.contains_key(*k)) {
            return Err(StreamError::UnexpectedField(k.clone()));
        }
        for (field, ty) in &self.config.schema {
            let v = record.get(field).ok_or_else(|| StreamError::MissingField(field.clone()))?;
            if !ty.admits(v) {
                return Err(StreamError::WrongType(field.clone()));
            }
        }
        Ok(())
    }

    pub fn ingest(&mut self, record: Record, now: u64) -> Result<(), StreamError> {
        self.validate(&record)?;
        if let Some(last) = self.events.back() {
            if now < last.arrival {
                return Err(StreamError::ClockWentBack { now, last: last.arrival });
            }
        }
        self.expire(now);
        self.events.push_back(TimedEvent { arrival: now, record });
        Ok(())
    }

    fn is_live(&self, e: &TimedEvent, now: u64) -> bool {
        now.saturating_sub(e.arrival) <= self.config.retention_secs
    }

    /// Drops every event older than the retention period.
    pub fn expire(&mut self, now: u64) {
        while self.events.front().is_some_and(|e| !self.is_live(e, now)) {
            self.events.pop_front();
        }
    }

    /// Events a query at `now` may observe.
    pub fn live(&self, now: u64) -> impl Iterator<Item = &TimedEvent> {
        self.events.iter().filter(move |e| self.is_live(e, now))
    }

    /// Everything still stored, including events awaiting lazy expiry.
    pub fn stored(&self) -> usize {
        self.events.len()
    }
}

/// Per-analysis trust: which queries are allowed, the initial budget table
/// and the randomizer used for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisTrust {
    pub query_class: QueryClass,
    pub budget: BudgetConfig,
    pub mode: OheMode,
}

/// Fixed at device construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceTrustConfig {
    /// Keyed by trusted analysis-id prefix; the longest match wins.
    pub analyses: BTreeMap<String, AnalysisTrust>,
    pub streams: Vec<StreamConfig>,
}

impl DeviceTrustConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn query_classes(&self) -> BTreeMap<String, QueryClass> {
        self.analyses
            .iter()
            .map(|(p, a)| (p.clone(), a.query_class.clone()))
            .collect()
    }

    /// The keyboard setup: analyses under `com.example.keyboard.` may read
    /// `ngram` and `age` from a 30-day keyboard stream.
    pub fn keyboard_example(mode: OheMode) -> Self {
        let stream = StreamConfig {
            stream_id: "keyboard".into(),
            schema: BTreeMap::from([("ngram".into(), FieldType::Text), ("age".into(), FieldType::Number)]),
            retention_secs: 30 * 24 * 3600,
        };
        let class = QueryClass {
            stream: "keyboard".into(),
            allowed_fields: BTreeSet::from(["ngram".into(), "age".into()]),
            templates: None,
            non_sensitive_fields: BTreeSet::new(),
        };
        Self {
            analyses: BTreeMap::from([(
                "com.example.keyboard.".into(),
                AnalysisTrust {
                    query_class: class,
                    budget: BudgetConfig::keyboard_example(),
                    mode,
                },
            )]),
            streams: vec![stream],
        }
    }
}

/// Why a device sent nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum DeviceDenial {
    #[error("device has not opted in")]
    NotOptedIn,
    #[error("query class: {denial}")]
    QueryClass { denial: QueryDenial },
    #[error("unknown stream {stream}")]
    UnknownStream { stream: String },
    #[error("schema mismatch on field {field}")]
    SchemaMismatch { field: String },
    #[error("budget: {reason}")]
    Budget { reason: DenyReason },
}

/// Everything that leaves the device for one recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Egress {
    /// Randomizer the report was produced with; needed to debias.
    pub mode: OheMode,
    pub share_a: ShareVector,
    pub share_b: ShareVector,
    /// Clear-text values of registered non-sensitive fields.
    pub metadata: BTreeMap<String, FieldValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "response", rename_all = "snake_case")]
pub enum DeviceResponse {
    Shares { egress: Egress },
    /// No matching event: a uniformly random bin was reported instead.
    RandomReport { egress: Egress },
    Denied { reason: DeviceDenial },
    /// Failure after the budget was charged; nothing was sent.
    Faulted { detail: String },
}

impl DeviceResponse {
    pub fn egress(&self) -> Option<&Egress> {
        match self {
            DeviceResponse::Shares { egress } | DeviceResponse::RandomReport { egress } => Some(egress),
            _ => None,
        }
    }

    pub fn into_egress(self) -> Option<Egress> {
        match self {
            DeviceResponse::Shares { egress } | DeviceResponse::RandomReport { egress } => Some(egress),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditDecision {
    Sent,
    RandomReport,
    Denied,
    Faulted,
}

/// One line of the device's append-only audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: u64,
    pub recipe_id: String,
    pub analysis_id: String,
    pub decision: AuditDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DeviceDenial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub share_sha256: Vec<String>,
    pub min_cohort: u64,
}

/// Inputs kept in test mode so audit hashes can be recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedEgress {
    pub report_bits: Vec<u8>,
    pub share_a: ShareVector,
    pub share_b: ShareVector,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Randomness stream of one device: the fleet seed picks the key, the device
/// id picks the stream.
pub fn device_rng(fleet_seed: u64, device_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(fleet_seed);
    rng.set_stream(device_id);
    rng
}

#[derive(Debug)]
pub struct Device {
    id: u64,
    trust: Arc<DeviceTrustConfig>,
    classes: BTreeMap<String, QueryClass>,
    streams: BTreeMap<String, EventStream>,
    accountants: BTreeMap<String, Accountant>,
    tree_cache: BTreeMap<String, PrefixTree>,
    rng: ChaCha8Rng,
    audit: Vec<AuditRecord>,
    opted_in: bool,
    retained: Option<Vec<RetainedEgress>>,
}

impl Device {
    /// Builds a device; fails if any initial budget table is invalid.
    pub fn new(id: u64, trust: Arc<DeviceTrustConfig>, fleet_seed: u64) -> Result<Self, crate::accountant::AccountantFault> {
        let accountants = trust
            .analyses
            .iter()
            .map(|(p, a)| Accountant::new(a.budget.clone()).map(|acc| (p.clone(), acc)))
            .collect::<Result<_, _>>()?;
        let streams = trust
            .streams
            .iter()
            .map(|s| (s.stream_id.clone(), EventStream::new(s.clone())))
            .collect();
        Ok(Self {
            id,
            classes: trust.query_classes(),
            trust,
            streams,
            accountants,
            tree_cache: BTreeMap::new(),
            rng: device_rng(fleet_seed, id),
            audit: Vec::new(),
            opted_in: true,
            retained: None,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn trust(&self) -> &DeviceTrustConfig {
        &self.trust
    }

    pub fn set_opted_in(&mut self, yes: bool) {
        self.opted_in = yes;
    }

    /// Keeps report bits and shares so audit hashes can be checked.
    pub fn enable_test_mode(&mut self) {
        self.retained.get_or_insert_with(Vec::new);
    }

    pub fn retained(&self) -> &[RetainedEgress] {
        self.retained.as_deref().unwrap_or(&[])
    }

    pub fn cache_tree(&mut self, tree: PrefixTree) {
        self.tree_cache.insert(tree.content_hash(), tree);
    }

    pub fn ingest_event(&mut self, stream_id: &str, record: Record, now: u64) -> Result<(), StreamError> {
        self.streams
            .get_mut(stream_id)
            .ok_or_else(|| StreamError::UnknownStream(stream_id.to_string()))?
            .ingest(record, now)
    }

    pub fn stream(&self, stream_id: &str) -> Option<&EventStream> {
        self.streams.get(stream_id)
    }

    /// Budget state for the trusted prefix that `analysis_id` falls under.
    pub fn budget_snapshot(&self, analysis_id: &str) -> Option<AccountantSnapshot> {
        match_prefix(&self.accountants, analysis_id).map(|(_, a)| a.snapshot())
    }

    pub fn export_audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn audit_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.audit {
            out.push_str(&serde_json::to_string(r).expect("audit record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write_audit(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.audit_jsonl().as_bytes())
    }

    /// Runs the pipeline with the device's own randomness stream.
    pub fn handle_recipe(&mut self, recipe: &Recipe, now: u64) -> DeviceResponse {
        let mut rng = self.rng.clone();
        let out = self.handle_recipe_with(recipe, now, &mut rng);
        self.rng = rng;
        out
    }

    pub fn handle_recipe_with<R: Rng + ?Sized>(&mut self, recipe: &Recipe, now: u64, rng: &mut R) -> DeviceResponse {
        let mut record = AuditRecord {
            seq: self.audit.len() as u64,
            timestamp: now,
            recipe_id: recipe.recipe_id().to_string(),
            analysis_id: recipe.analysis_id().to_string(),
            decision: AuditDecision::Denied,
            reason: None,
            fault: None,
            report_sha256: None,
            share_sha256: Vec::new(),
            min_cohort: recipe.budgets().min_cohort,
        };
        let (response, report_bits) = self.pipeline(recipe, now, rng);
        match &response {
            DeviceResponse::Denied { reason } => record.reason = Some(reason.clone()),
            DeviceResponse::Faulted { detail } => {
                record.decision = AuditDecision::Faulted;
                record.fault = Some(detail.clone());
            }
            DeviceResponse::Shares { egress } | DeviceResponse::RandomReport { egress } => {
                record.decision = if matches!(response, DeviceResponse::Shares { .. }) {
                    AuditDecision::Sent
                } else {
                    AuditDecision::RandomReport
                };
                record.share_sha256 = vec![
                    sha256_hex(&encode_share(&egress.share_a)),
                    sha256_hex(&encode_share(&egress.share_b)),
                ];
            }
        }
        if let Some(bits) = report_bits {
            record.report_sha256 = Some(sha256_hex(&bits));
            if let (Some(kept), Some(egress)) = (self.retained.as_mut(), response.egress()) {
                kept.push(RetainedEgress {
                    report_bits: bits,
                    share_a: egress.share_a.clone(),
                    share_b: egress.share_b.clone(),
                });
            }
        }
        self.audit.push(record);
        response
    }

    fn pipeline<R: Rng + ?Sized>(
        &mut self,
        recipe: &Recipe,
        now: u64,
        rng: &mut R,
    ) -> (DeviceResponse, Option<Vec<u8>>) {
        let deny = |reason| (DeviceResponse::Denied { reason }, None);
        let fault = |detail: String| (DeviceResponse::Faulted { detail }, None);
        if !self.opted_in {
            return deny(DeviceDenial::NotOptedIn);
        }
        // 1. query class
        let resolved;
        let recipe = if recipe.encoding().is_some() {
            if let Err(denial) = check_query_class(recipe, &self.classes) {
                return deny(DeviceDenial::QueryClass { denial });
            }
            recipe
        } else {
            let mut r = recipe.clone();
            if let Err(denial) = verify_query_class(&mut r, &self.classes, &self.tree_cache) {
                return deny(DeviceDenial::QueryClass { denial });
            }
            resolved = r;
            &resolved
        };
        let (prefix, trust) = match_prefix(&self.trust.analyses, recipe.analysis_id()).expect("verified");
        let prefix = prefix.to_string();
        let mode = trust.mode;
        let q = recipe.query().clone();
        let Some(stream) = self.streams.get(&q.stream) else {
            return deny(DeviceDenial::UnknownStream { stream: q.stream });
        };
        let encoding = recipe.encoding().expect("resolved by verification");
        for field in q.fields() {
            let Some(ty) = stream.config.schema.get(&field) else {
                return deny(DeviceDenial::SchemaMismatch { field });
            };
            let expected = match encoding.features().iter().find(|f| f.field() == field) {
                Some(FeatureRule::NumericBuckets { .. }) => Some(FieldType::Number),
                Some(FeatureRule::PrefixTree { .. }) => Some(FieldType::Text),
                None => None,
            };
            if expected.is_some_and(|e| e != *ty) {
                return deny(DeviceDenial::SchemaMismatch { field });
            }
        }
        for field in &recipe.doc().non_sensitive_fields {
            if !stream.config.schema.contains_key(field) {
                return deny(DeviceDenial::SchemaMismatch { field: field.clone() });
            }
        }

        // 2. budget: a denial charges nothing; an approval is charged now,
        // before any sampling
        let b = recipe.budgets();
        let cost = QueryCost {
            local_epsilon: b.local_epsilon,
            aggregate_epsilon: b.aggregate_epsilon,
            aggregate_delta: b.delta,
            fields_accessed: q.fields(),
            min_cohort: b.min_cohort,
            mode,
        };
        let acc = self.accountants.get_mut(&prefix).expect("one accountant per prefix");
        match acc.check_and_charge(&cost) {
            Ok(Decision::Approve { .. }) => {}
            Ok(Decision::Deny { reason }) => return deny(DeviceDenial::Budget { reason }),
            Err(e) => return fault(e.to_string()),
        }

        // 3. pick one matching event uniformly
        let stream = &self.streams[&q.stream];
        let matches: Vec<&TimedEvent> = stream
            .live(now)
            .filter(|e| passes_filter(&q.filter, encoding.features(), &e.record))
            .collect();
        let chosen = (!matches.is_empty()).then(|| matches[rng.random_range(0..matches.len())]);

        // 4-5. encode, or a uniform bin when nothing matched
        let bins = encoding.total_bins();
        let (index, metadata) = match chosen {
            Some(e) => match encoding.encode_event(&e.record) {
                Ok(i) => {
                    let meta = recipe
                        .doc()
                        .non_sensitive_fields
                        .iter()
                        .filter_map(|f| e.record.get(f).map(|v| (f.clone(), v.clone())))
                        .collect();
                    (i, meta)
                }
                Err(err) => return fault(err.to_string()),
            },
            None => (rng.random_range(0..bins), BTreeMap::new()),
        };

        // 6-7. randomize and split
        let report = match encode_one_hot(index, bins).and_then(|v| randomize_with(mode, &v, b.local_epsilon, rng)) {
            Ok(r) => r,
            Err(err) => return fault(err.to_string()),
        };
        let (share_a, share_b) = split(&report, recipe.recipe_id(), Modulus::STANDARD, rng);
        let egress = Egress {
            mode,
            share_a,
            share_b,
            metadata,
        };
        let response = if chosen.is_some() {
            DeviceResponse::Shares { egress }
        } else {
            DeviceResponse::RandomReport { egress }
        };
        (response, Some(report.bits().to_vec()))
    }
}

/// Whether a record satisfies the query filter under this encoding.
fn passes_filter(filter: &Option<QueryFilter>, features: &[FeatureRule], record: &Record) -> bool {
    let Some(QueryFilter::PrefixInTree { field }) = filter else {
        return true;
    };
    let Some(FeatureRule::PrefixTree { tree, .. }) = features.iter().find(|f| f.field() == field) else {
        return false;
    };
    let Some(FieldValue::Text(phrase)) = record.get(field) else {
        return false;
    };
    let words = split_words(phrase);
    words.len() >= tree.depth() && tree.position(&words[..tree.depth()]).is_some()
}
