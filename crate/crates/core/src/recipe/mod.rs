//! Recipes: the query, budgets and encoding schema deployed to devices, and
//! the on-device query-class verifier.

mod encoding;

pub use encoding::{
    split_words, BinLabel, EncodingSpec, FeatureDoc, FeatureRule, FieldValue, PrefixTree, Record,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ldp::LocalEpsilon;

pub const SUPPORTED_VERSIONS: std::ops::RangeInclusive<u32> = 1..=1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecipeError {
    #[error("malformed recipe: {0}")]
    Malformed(String),
    #[error("invalid recipe: {0}")]
    Invalid(String),
    #[error("unsupported recipe version {0}")]
    UnsupportedVersion(u32),
    #[error("event lacks feature {0}")]
    MissingFeature(String),
    #[error("field {field} has the wrong type: {value}")]
    TypeMismatch { field: String, value: String },
    #[error("prefix tree {0} is not cached on this device")]
    UnresolvedTree(String),
}

/// Declarative query: pick one event of `stream` carrying every `select`ed
/// field, optionally restricted by `filter`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub stream: String,
    pub select: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<QueryFilter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum QueryFilter {
    /// The phrase in `field` must start with a leaf of the recipe's prefix
    /// tree for that field.
    PrefixInTree { field: String },
}

impl Query {
    /// Canonical single-line text, used for byte-exact template matching.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("query serialises")
    }

    /// Every field the query reads.
    pub fn fields(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.select.iter().cloned().collect();
        if let Some(QueryFilter::PrefixInTree { field }) = &self.filter {
            out.insert(field.clone());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub local_epsilon: LocalEpsilon,
    pub aggregate_epsilon: f64,
    pub delta: f64,
    pub min_cohort: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataContentType {
    pub features: Vec<FeatureDoc>,
}

/// The wire form of a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeDoc {
    pub recipe_id: String,
    pub version: u32,
    pub analysis_id: String,
    pub query: Query,
    #[serde(default)]
    pub non_sensitive_fields: Vec<String>,
    pub budgets: Budgets,
    pub data_content_type: DataContentType,
}

/// A structurally valid recipe. Prefix trees referenced by hash stay
/// unresolved until [`Recipe::resolve`] is called with a device cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    doc: RecipeDoc,
    encoding: Option<EncodingSpec>,
}

fn validate_doc(doc: &RecipeDoc) -> Result<(), RecipeError> {
    let invalid = |m: String| Err(RecipeError::Invalid(m));
    if !SUPPORTED_VERSIONS.contains(&doc.version) {
        return Err(RecipeError::UnsupportedVersion(doc.version));
    }
    if doc.recipe_id.is_empty() || doc.analysis_id.is_empty() {
        return invalid("recipe_id and analysis_id must be nonempty".into());
    }
    let b = &doc.budgets;
    if !(b.local_epsilon.value() > 0.0) {
        return invalid("local_epsilon must be positive".into());
    }
    if !(b.aggregate_epsilon.is_finite() && b.aggregate_epsilon > 0.0) {
        return invalid(format!("aggregate_epsilon must be positive, got {}", b.aggregate_epsilon));
    }
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return invalid(format!("delta must lie in (0, 1), got {}", b.delta));
    }
    if b.min_cohort == 0 {
        return invalid("min_cohort must be at least 1".into());
    }
    if doc.query.select.is_empty() {
        return invalid("query selects no fields".into());
    }
    let selected: BTreeSet<&str> = doc.query.select.iter().map(String::as_str).collect();
    if selected.len() != doc.query.select.len() {
        return invalid("query selects a field twice".into());
    }
    if doc.data_content_type.features.is_empty() {
        return invalid("data_content_type has no features".into());
    }
    let mut features = BTreeSet::new();
    for f in &doc.data_content_type.features {
        if !features.insert(f.field()) {
            return invalid(format!("duplicate feature {}", f.field()));
        }
        if !selected.contains(f.field()) {
            return invalid(format!("feature {} is not selected by the query", f.field()));
        }
        if let FeatureDoc::PrefixTree {
            prefixes, prefix_tree_hash, ..
        } = f
        {
            if prefixes.is_some() == prefix_tree_hash.is_some() {
                return invalid(format!(
                    "feature {} needs exactly one of prefixes or prefix_tree_hash",
                    f.field()
                ));
            }
        }
    }
    if let Some(QueryFilter::PrefixInTree { field }) = &doc.query.filter {
        let ok = doc
            .data_content_type
            .features
            .iter()
            .any(|f| matches!(f, FeatureDoc::PrefixTree { field: g, .. } if g == field));
        if !ok {
            return invalid(format!("filter field {field} has no prefix-tree feature"));
        }
    }
    Ok(())
}

fn build_encoding(
    features: &[FeatureDoc],
    cache: Option<&BTreeMap<String, PrefixTree>>,
) -> Result<Option<EncodingSpec>, RecipeError> {
    let mut rules = Vec::with_capacity(features.len());
    for f in features {
        match f {
            FeatureDoc::NumericBuckets {
                field,
                boundaries,
                upper_bound,
            } => rules.push(FeatureRule::numeric(field, boundaries, *upper_bound)?),
            FeatureDoc::PrefixTree {
                field,
                prefixes,
                prefix_tree_hash,
                vocab,
            } => {
                let tree = match (prefixes, prefix_tree_hash) {
                    (Some(p), _) => PrefixTree::new(p)?,
                    (None, Some(h)) => match cache {
                        None => return Ok(None),
                        Some(c) => c.get(h).cloned().ok_or_else(|| RecipeError::UnresolvedTree(h.clone()))?,
                    },
                    (None, None) => unreachable!("validated"),
                };
                rules.push(FeatureRule::prefix_tree(field, tree, vocab)?);
            }
        }
    }
    EncodingSpec::new(rules).map(Some)
}

impl Recipe {
    pub fn from_doc(doc: RecipeDoc) -> Result<Self, RecipeError> {
        validate_doc(&doc)?;
        let encoding = build_encoding(&doc.data_content_type.features, None)?;
        Ok(Self { doc, encoding })
    }

    pub fn doc(&self) -> &RecipeDoc {
        &self.doc
    }

    pub fn recipe_id(&self) -> &str {
        &self.doc.recipe_id
    }

    pub fn analysis_id(&self) -> &str {
        &self.doc.analysis_id
    }

    pub fn query(&self) -> &Query {
        &self.doc.query
    }

    pub fn budgets(&self) -> &Budgets {
        &self.doc.budgets
    }

    /// The encoding, once every referenced prefix tree is known.
    pub fn encoding(&self) -> Option<&EncodingSpec> {
        self.encoding.as_ref()
    }

    /// Resolves hash-referenced prefix trees against a cache keyed by
    /// [`PrefixTree::content_hash`].
    pub fn resolve(&mut self, cache: &BTreeMap<String, PrefixTree>) -> Result<&EncodingSpec, RecipeError> {
        if self.encoding.is_none() {
            self.encoding = build_encoding(&self.doc.data_content_type.features, Some(cache))?;
        }
        Ok(self.encoding.as_ref().expect("resolved"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("recipe serialises")
    }
}

/// Parses a recipe document. Unknown fields are rejected.
pub fn parse_recipe(text: &str) -> Result<Recipe, RecipeError> {
    let doc: RecipeDoc = serde_json::from_str(text).map_err(|e| RecipeError::Malformed(e.to_string()))?;
    Recipe::from_doc(doc)
}

/// What a device allows for one trusted analysis prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryClass {
    pub stream: String,
    pub allowed_fields: BTreeSet<String>,
    /// Canonical query texts. When present the query must equal one of them
    /// byte for byte; when absent any query over allowed fields passes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<String>>,
    #[serde(default)]
    pub non_sensitive_fields: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum QueryDenial {
    #[error("analysis {analysis_id} matches no trusted prefix")]
    UnknownAnalysis { analysis_id: String },
    #[error("stream {stream} is not allowed")]
    StreamNotAllowed { stream: String },
    #[error("field {field} is not allowed")]
    FieldNotAllowed { field: String },
    #[error("query does not match any allowed template")]
    TemplateMismatch,
    #[error("field {field} is not registered as non-sensitive")]
    NotNonSensitive { field: String },
    #[error("prefix tree {hash} could not be resolved")]
    UnresolvedTree { hash: String },
}

/// Longest trusted prefix that `analysis_id` starts with.
pub fn match_prefix<'a, V>(classes: &'a BTreeMap<String, V>, analysis_id: &str) -> Option<(&'a str, &'a V)> {
    classes
        .iter()
        .filter(|(p, _)| analysis_id.starts_with(p.as_str()))
        .max_by_key(|(p, _)| p.len())
        .map(|(p, v)| (p.as_str(), v))
}

/// Approves a recipe iff its analysis is trusted, it reads only allowed
/// fields of the allowed stream, it matches a template when the class is
/// template-restricted, its clear-text fields are registered non-sensitive,
/// and every referenced prefix tree resolves.
pub fn verify_query_class(
    recipe: &mut Recipe,
    classes: &BTreeMap<String, QueryClass>,
    tree_cache: &BTreeMap<String, PrefixTree>,
) -> Result<(), QueryDenial> {
    check_query_class(recipe, classes)?;
    recipe.resolve(tree_cache).map_err(|e| match e {
        RecipeError::UnresolvedTree(hash) => QueryDenial::UnresolvedTree { hash },
        other => QueryDenial::UnresolvedTree { hash: other.to_string() },
    })?;
    Ok(())
}

/// Every check of [`verify_query_class`] except prefix-tree resolution.
pub fn check_query_class<'a>(
    recipe: &Recipe,
    classes: &'a BTreeMap<String, QueryClass>,
) -> Result<&'a QueryClass, QueryDenial> {
    let Some((_, class)) = match_prefix(classes, recipe.analysis_id()) else {
        return Err(QueryDenial::UnknownAnalysis {
            analysis_id: recipe.analysis_id().to_string(),
        });
    };
    let q = recipe.query();
    if q.stream != class.stream {
        return Err(QueryDenial::StreamNotAllowed { stream: q.stream.clone() });
    }
    if let Some(field) = q.fields().into_iter().find(|f| !class.allowed_fields.contains(f)) {
        return Err(QueryDenial::FieldNotAllowed { field });
    }
    if let Some(templates) = &class.templates {
        let text = q.canonical();
        if !templates.iter().any(|t| t.as_bytes() == text.as_bytes()) {
            return Err(QueryDenial::TemplateMismatch);
        }
    }
    if let Some(field) = recipe
        .doc()
        .non_sensitive_fields
        .iter()
        .find(|f| !class.non_sensitive_fields.contains(*f))
    {
        return Err(QueryDenial::NotNonSensitive { field: field.clone() });
    }
    Ok(class)
}

/// The worked example recipe: 3-grams over a three-leaf tree and a
/// nine-word vocabulary, joined with bucketed age.
pub const EXAMPLE_RECIPE: &str = r#"{
  "recipe_id": "kbd-3gram-age-0001",
  "version": 1,
  "analysis_id": "com.example.keyboard.ngrams",
  "query": {
    "stream": "keyboard",
    "select": ["age", "ngram"],
    "filter": { "op": "prefix_in_tree", "field": "ngram" }
  },
  "non_sensitive_fields": ["locale"],
  "budgets": {
    "local_epsilon": 5.0,
    "aggregate_epsilon": 0.3,
    "delta": 1e-6,
    "min_cohort": 100000
  },
  "data_content_type": {
    "features": [
      { "kind": "numeric_buckets", "field": "age", "boundaries": [20, 30, 40, 50, 60, 70, 80] },
      {
        "kind": "prefix_tree",
        "field": "ngram",
        "prefixes": ["hello world", "i am", "i got"],
        "vocab": ["a", "am", "got", "hello", "i", "is", "the", "to", "world"]
      }
    ]
  }
}"#;
