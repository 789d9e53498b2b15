//! Corpus diversity metrics, dataset statistics, norm-relationship
//! profiling, and inter-rater agreement.
//!
//! N-grams never cross document boundaries; one conversation maps to one
//! document. The same [`tokenize`] is used for diversity metrics and token
//! statistics so the numbers stay mutually consistent.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Conversation;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no n-grams in the corpus for n = {0}")]
    EmptyDistribution(usize),
    #[error("dataset has no accepted conversations")]
    EmptyDataset,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

/// Lowercases, splits on whitespace, strips leading/trailing
/// non-alphanumeric characters, and drops empties. Internal punctuation
/// ("don't") survives.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token documents, one per conversation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<String>>,
}

impl Corpus {
    pub fn from_texts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self { documents: texts.into_iter().map(|t| tokenize(t.as_ref())).collect() }
    }

    pub fn from_conversations<'a>(conversations: impl IntoIterator<Item = &'a Conversation>) -> Self {
        Self::from_texts(conversations.into_iter().map(|c| c.joined_text()))
    }

    /// Loads a directory of plain-text files, one conversation per file,
    /// in file-name order.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut texts = Vec::with_capacity(paths.len());
        for path in paths {
            texts.push(std::fs::read_to_string(&path)?);
        }
        Ok(Self::from_texts(texts))
    }

    fn ngram_counts(&self, n: usize) -> HashMap<&[String], u64> {
        let mut counts: HashMap<&[String], u64> = HashMap::new();
        for doc in &self.documents {
            if doc.len() < n {
                continue;
            }
            for gram in doc.windows(n) {
                *counts.entry(gram).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Unique n-grams over total n-grams, in [0, 1]. Documents shorter than `n`
/// contribute nothing; an empty distribution yields 0.
pub fn distinct_n(corpus: &Corpus, n: usize) -> f64 {
    assert!(n >= 1, "n must be >= 1");
    let counts = corpus.ngram_counts(n);
    let total: u64 = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    counts.len() as f64 / total as f64
}

/// Shannon entropy (bits) of the n-gram relative-frequency distribution.
pub fn ngram_entropy(corpus: &Corpus, n: usize) -> Result<f64, MetricsError> {
    assert!(n >= 1, "n must be >= 1");
    let counts = corpus.ngram_counts(n);
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(MetricsError::EmptyDistribution(n));
    }
    let total = total as f64;
    let mut entropy = 0.0;
    for &c in counts.values() {
        let p = c as f64 / total;
        entropy -= p * p.log2();
    }
    Ok(entropy)
}

/// Geometric mean of three nonnegative values; 0 when any is 0.
pub fn geomean3(h1: f64, h2: f64, h3: f64) -> f64 {
    if h1 == 0.0 || h2 == 0.0 || h3 == 0.0 {
        return 0.0;
    }
    (h1 * h2 * h3).cbrt()
}

/// Geometric mean of the 1/2/3-gram entropies.
pub fn entropy_geomean(corpus: &Corpus) -> Result<f64, MetricsError> {
    let h1 = ngram_entropy(corpus, 1)?;
    let h2 = ngram_entropy(corpus, 2)?;
    let h3 = ngram_entropy(corpus, 3)?;
    Ok(geomean3(h1, h2, h3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dialogues: usize,
    pub utterances: usize,
    pub avg_uttr_per_dialogue: f64,
    pub avg_tokens_per_dialogue: f64,
    pub avg_violations_per_dialogue: f64,
    pub avg_tokens_per_utterance: f64,
}

/// Basic dataset statistics over accepted conversations. `violations` is the
/// count of resolved violations per conversation id.
pub fn dataset_stats(
    conversations: &[Conversation],
    violations_by_conv: &BTreeMap<String, usize>,
) -> Result<StatsReport, MetricsError> {
    if conversations.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let dialogues = conversations.len();
    let utterances: usize = conversations.iter().map(|c| c.utterances.len()).sum();
    let tokens: usize = conversations
        .iter()
        .flat_map(|c| c.utterances.iter())
        .map(|u| tokenize(&u.text).len())
        .sum();
    let violations: usize = conversations
        .iter()
        .map(|c| violations_by_conv.get(&c.conv_id).copied().unwrap_or(0))
        .sum();
    Ok(StatsReport {
        dialogues,
        utterances,
        avg_uttr_per_dialogue: utterances as f64 / dialogues as f64,
        avg_tokens_per_dialogue: tokens as f64 / dialogues as f64,
        avg_violations_per_dialogue: violations as f64 / dialogues as f64,
        avg_tokens_per_utterance: if utterances == 0 { 0.0 } else { tokens as f64 / utterances as f64 },
    })
}

/// Per-relationship norm-category tri-gram counts, keeping entries seen
/// strictly more than five times, sorted by count descending then
/// lexicographically.
pub fn norm_relationship_profile<'a>(
    records: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> BTreeMap<String, Vec<(String, usize)>> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (relationship, norm_category) in records {
        let tokens = tokenize(norm_category);
        if tokens.len() < 3 {
            continue;
        }
        let per_rel = counts.entry(relationship.to_string()).or_default();
        for gram in tokens.windows(3) {
            *per_rel.entry(gram.join(" ")).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|(rel, grams)| {
            let mut kept: Vec<(String, usize)> = grams.into_iter().filter(|(_, c)| *c > 5).collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            (rel, kept)
        })
        .collect()
}

/// Free-marginal multirater kappa over a raters x items label matrix with
/// `k` categories. Observed agreement is the mean per-item proportion of
/// agreeing rater pairs; chance agreement is 1/k. Clamped to [-1, 1].
pub fn randolph_kappa(labels: &[Vec<usize>], k: usize) -> Result<f64, MetricsError> {
    let raters = labels.len();
    if raters < 2 {
        return Err(MetricsError::DegenerateInput("need at least 2 raters".into()));
    }
    if k < 2 {
        return Err(MetricsError::DegenerateInput("need at least 2 categories".into()));
    }
    let items = labels[0].len();
    if items == 0 {
        return Err(MetricsError::DegenerateInput("need at least 1 item".into()));
    }
    if labels.iter().any(|row| row.len() != items) {
        return Err(MetricsError::DegenerateInput("ragged label matrix".into()));
    }
    if labels.iter().flatten().any(|&c| c >= k) {
        return Err(MetricsError::DegenerateInput(format!("label outside 0..{k}")));
    }

    let pair_total = (raters * (raters - 1) / 2) as f64;
    let mut observed_sum = 0.0;
    let mut category_counts = vec![0usize; k];
    for item in 0..items {
        category_counts.iter_mut().for_each(|c| *c = 0);
        for row in labels {
            category_counts[row[item]] += 1;
        }
        let agreeing_pairs: usize = category_counts.iter().map(|&c| c * (c.saturating_sub(1)) / 2).sum();
        observed_sum += agreeing_pairs as f64 / pair_total;
    }
    let observed = observed_sum / items as f64;
    let chance = 1.0 / k as f64;
    let kappa = (observed - chance) / (1.0 - chance);
    Ok(kappa.clamp(-1.0, 1.0))
}
