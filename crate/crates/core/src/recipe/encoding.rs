//! One-hot encoding schema: per-feature bucketing composed in mixed radix.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RecipeError;

/// A value stored in an event record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
}

pub type Record = BTreeMap<String, FieldValue>;

/// Leaves of a popular-prefix tree. Every leaf has the same number of words;
/// a single empty leaf means "no prefix yet" (the 1-gram round).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixTree {
    leaves: Vec<Vec<String>>,
    index: BTreeMap<Vec<String>, usize>,
}

pub fn split_words(phrase: &str) -> Vec<String> {
    phrase.split_whitespace().map(str::to_string).collect()
}

impl PrefixTree {
    pub fn new<S: AsRef<str>>(leaves: &[S]) -> Result<Self, RecipeError> {
        let leaves: Vec<Vec<String>> = leaves.iter().map(|l| split_words(l.as_ref())).collect();
        if leaves.is_empty() {
            return Err(RecipeError::Invalid("prefix tree has no leaves".into()));
        }
        let depth = leaves[0].len();
        let mut index = BTreeMap::new();
        for (i, leaf) in leaves.iter().enumerate() {
            if leaf.len() != depth {
                return Err(RecipeError::Invalid(format!(
                    "prefix tree leaves must all have {depth} words, got {:?}",
                    leaf.join(" ")
                )));
            }
            if index.insert(leaf.clone(), i).is_some() {
                return Err(RecipeError::Invalid(format!("duplicate prefix {:?}", leaf.join(" "))));
            }
        }
        Ok(Self { leaves, index })
    }

    /// The root-only tree used before any prefix is known.
    pub fn root() -> Self {
        Self::new(&[""]).expect("root tree is valid")
    }

    pub fn depth(&self) -> usize {
        self.leaves[0].len()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = String> + '_ {
        self.leaves.iter().map(|l| l.join(" "))
    }

    pub fn leaf_words(&self, i: usize) -> &[String] {
        &self.leaves[i]
    }

    pub fn position(&self, prefix: &[String]) -> Option<usize> {
        self.index.get(prefix).copied()
    }

    /// SHA-256 over the leaves in order, one per line.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for leaf in self.leaves() {
            h.update(leaf.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureDoc {
    NumericBuckets {
        field: String,
        boundaries: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        upper_bound: Option<f64>,
    },
    PrefixTree {
        field: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prefixes: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prefix_tree_hash: Option<String>,
        vocab: Vec<String>,
    },
}

impl FeatureDoc {
    pub fn field(&self) -> &str {
        match self {
            FeatureDoc::NumericBuckets { field, .. } | FeatureDoc::PrefixTree { field, .. } => field,
        }
    }
}

/// A validated bucketing rule.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRule {
    /// Half-open buckets `[b_i, b_{i+1})`, the last one closed by `upper`.
    NumericBuckets { field: String, edges: Vec<f64>, upper: f64 },
    PrefixTree {
        field: String,
        tree: PrefixTree,
        vocab: Vec<String>,
        vocab_index: BTreeMap<String, usize>,
    },
}

impl FeatureRule {
    pub fn numeric(field: &str, boundaries: &[f64], upper_bound: Option<f64>) -> Result<Self, RecipeError> {
        if boundaries.is_empty() {
            return Err(RecipeError::Invalid(format!("feature {field}: no bucket boundaries")));
        }
        if boundaries.iter().any(|b| !b.is_finite()) || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RecipeError::Invalid(format!(
                "feature {field}: boundaries must be finite and strictly increasing"
            )));
        }
        let upper = upper_bound.unwrap_or(f64::INFINITY);
        if !(upper > *boundaries.last().expect("nonempty")) {
            return Err(RecipeError::Invalid(format!("feature {field}: upper bound {upper} too small")));
        }
        Ok(Self::NumericBuckets {
            field: field.to_string(),
            edges: boundaries.to_vec(),
            upper,
        })
    }

    pub fn prefix_tree(field: &str, tree: PrefixTree, vocab: &[String]) -> Result<Self, RecipeError> {
        if vocab.is_empty() {
            return Err(RecipeError::Invalid(format!("feature {field}: empty vocabulary")));
        }
        let mut vocab_index = BTreeMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.split_whitespace().count() != 1 {
                return Err(RecipeError::Invalid(format!("feature {field}: bad vocabulary word {w:?}")));
            }
            if vocab_index.insert(w.clone(), i).is_some() {
                return Err(RecipeError::Invalid(format!("feature {field}: duplicate word {w:?}")));
            }
        }
        Ok(Self::PrefixTree {
            field: field.to_string(),
            tree,
            vocab: vocab.to_vec(),
            vocab_index,
        })
    }

    pub fn field(&self) -> &str {
        match self {
            FeatureRule::NumericBuckets { field, .. } | FeatureRule::PrefixTree { field, .. } => field,
        }
    }

    /// Number of bins, including this feature's OOV bin.
    pub fn bins(&self) -> usize {
        match self {
            FeatureRule::NumericBuckets { edges, .. } => 1 + edges.len(),
            FeatureRule::PrefixTree { tree, vocab, .. } => 1 + tree.len() * (2 + vocab.len()),
        }
    }

    /// Per-feature bin of a value. Never fails on a value of the right type.
    pub fn bin_of(&self, value: &FieldValue) -> Result<usize, RecipeError> {
        match (self, value) {
            (FeatureRule::NumericBuckets { edges, upper, .. }, FieldValue::Number(x)) => {
                if !x.is_finite() || *x < edges[0] || *x >= *upper {
                    return Ok(0);
                }
                // number of edges <= x, which is >= 1 here
                Ok(edges.partition_point(|e| e <= x))
            }
            (
                FeatureRule::PrefixTree {
                    tree, vocab, vocab_index, ..
                },
                FieldValue::Text(phrase),
            ) => {
                let words = split_words(phrase);
                let d = tree.depth();
                if words.len() < d {
                    return Ok(0);
                }
                let Some(leaf) = tree.position(&words[..d]) else {
                    return Ok(0);
                };
                let base = 1 + leaf * (2 + vocab.len());
                Ok(match words.get(d) {
                    None => base,
                    Some(w) => match vocab_index.get(w) {
                        Some(&j) => base + 2 + j,
                        None => base + 1,
                    },
                })
            }
            (rule, v) => Err(RecipeError::TypeMismatch {
                field: rule.field().to_string(),
                value: format!("{v:?}"),
            }),
        }
    }

    pub fn label(&self, bin: usize) -> BinLabel {
        match self {
            FeatureRule::NumericBuckets { edges, upper, .. } => {
                if bin == 0 {
                    BinLabel::Oov
                } else {
                    let lo = edges[bin - 1];
                    let hi = edges.get(bin).copied().unwrap_or(*upper);
                    BinLabel::Bucket { lo, hi }
                }
            }
            FeatureRule::PrefixTree { tree, vocab, .. } => {
                if bin == 0 {
                    return BinLabel::Oov;
                }
                let stride = 2 + vocab.len();
                let leaf = (bin - 1) / stride;
                let prefix = tree.leaf_words(leaf).join(" ");
                match (bin - 1) % stride {
                    0 => BinLabel::EndToken { prefix },
                    1 => BinLabel::LeafOov { prefix },
                    j => BinLabel::Word {
                        prefix,
                        word: vocab[j - 2].clone(),
                    },
                }
            }
        }
    }
}

/// Human-readable name of one feature's bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinLabel {
    Oov,
    Bucket { lo: f64, hi: f64 },
    EndToken { prefix: String },
    LeafOov { prefix: String },
    Word { prefix: String, word: String },
}

impl BinLabel {
    /// Phrase completed by this bin, when it names one.
    pub fn phrase(&self) -> Option<String> {
        let join = |p: &str, w: &str| if p.is_empty() { w.to_string() } else { format!("{p} {w}") };
        match self {
            BinLabel::Word { prefix, word } => Some(join(prefix, word)),
            BinLabel::EndToken { prefix } if !prefix.is_empty() => Some(prefix.clone()),
            _ => None,
        }
    }
}

impl fmt::Display for BinLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pre = |p: &str| if p.is_empty() { String::new() } else { format!("{p} ") };
        match self {
            BinLabel::Oov => write!(f, "OOV"),
            BinLabel::Bucket { lo, hi } => write!(f, "[{lo}, {hi})"),
            BinLabel::EndToken { prefix } => write!(f, "{}<end>", pre(prefix)),
            BinLabel::LeafOov { prefix } => write!(f, "{}<oov>", pre(prefix)),
            BinLabel::Word { prefix, word } => write!(f, "{}{word}", pre(prefix)),
        }
    }
}

/// Ordered features; the first is the most significant digit of the index.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSpec {
    features: Vec<FeatureRule>,
    total_bins: usize,
}

impl EncodingSpec {
    pub fn new(features: Vec<FeatureRule>) -> Result<Self, RecipeError> {
        if features.is_empty() {
            return Err(RecipeError::Invalid("encoding has no features".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &features {
            if !seen.insert(f.field()) {
                return Err(RecipeError::Invalid(format!("duplicate feature {}", f.field())));
            }
        }
        let total_bins = features
            .iter()
            .try_fold(1usize, |acc, f| acc.checked_mul(f.bins()))
            .filter(|&t| t <= crate::ldp::MAX_DOMAIN_SIZE)
            .ok_or_else(|| RecipeError::Invalid("encoding domain too large".into()))?;
        Ok(Self { features, total_bins })
    }

    pub fn features(&self) -> &[FeatureRule] {
        &self.features
    }

    pub fn total_bins(&self) -> usize {
        self.total_bins
    }

    /// Mixed-radix composition of per-feature bins.
    pub fn compose(&self, bins: &[usize]) -> usize {
        debug_assert_eq!(bins.len(), self.features.len());
        self.features
            .iter()
            .zip(bins)
            .fold(0, |acc, (f, &b)| acc * f.bins() + b)
    }

    pub fn decompose(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.features.len()];
        for (slot, f) in out.iter_mut().zip(&self.features).rev() {
            *slot = index % f.bins();
            index /= f.bins();
        }
        out
    }

    pub fn labels(&self, index: usize) -> Vec<BinLabel> {
        self.decompose(index)
            .into_iter()
            .zip(&self.features)
            .map(|(b, f)| f.label(b))
            .collect()
    }

    /// Labels of all features joined with `" | "`.
    pub fn label_string(&self, index: usize) -> String {
        self.labels(index)
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn encode_event(&self, event: &Record) -> Result<usize, RecipeError> {
        let bins = self
            .features
            .iter()
            .map(|f| {
                let v = event
                    .get(f.field())
                    .ok_or_else(|| RecipeError::MissingFeature(f.field().to_string()))?;
                f.bin_of(v)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.compose(&bins))
    }

    /// Every prefix-tree feature's tree, with the field it belongs to.
    pub fn trees(&self) -> impl Iterator<Item = (&str, &PrefixTree)> {
        self.features.iter().filter_map(|f| match f {
            FeatureRule::PrefixTree { field, tree, .. } => Some((field.as_str(), tree)),
            _ => None,
        })
    }
}
