//! Situation normalization, embedding-based near-duplicate clustering, and
//! topic n-gram mining for the avoid-list.
//!
//! Near-duplicates are merged by single-linkage: situations whose pairwise
//! cosine similarity strictly exceeds the threshold land in one connected
//! component, and the earliest-generated member represents the component.

use std::collections::{BTreeMap, HashMap};

use regex::Regex;
use thiserror::Error;

use crate::domain::{CharacterPair, Situation, SituationStatus};
use crate::gateway::{Gateway, GatewayError};
use crate::metrics::tokenize;

/// Merge threshold on cosine similarity; "exceeds" is read strictly.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.75;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("situation {0} references unknown pair {1}")]
    UnknownPair(String, String),
}

/// How character names are removed before embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameHandling {
    /// Replace with PersonA/PersonB, preserving grammar.
    #[default]
    Placeholder,
    /// Delete the names outright.
    Delete,
}

/// Replaces whole-word, case-insensitive occurrences of the two names
/// (possessives included) with PersonA/PersonB, or deletes them.
pub fn normalize_situation(text: &str, names: &[String; 2], mode: NameHandling) -> String {
    let mut out = text.to_string();
    for (name, placeholder) in names.iter().zip(["PersonA", "PersonB"]) {
        if name.trim().is_empty() {
            continue;
        }
        let pattern = format!(r"(?i)\b{}\b", regex::escape(name.trim()));
        let re = Regex::new(&pattern).expect("escaped name pattern");
        let replacement = match mode {
            NameHandling::Placeholder => placeholder,
            NameHandling::Delete => "",
        };
        out = re.replace_all(&out, replacement).into_owned();
    }
    if mode == NameHandling::Delete {
        out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    out
}

/// dot(u, v) / (|u| |v|), computed in f64.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, DedupError> {
    if u.len() != v.len() {
        return Err(DedupError::DimensionMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(DedupError::ZeroVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Pairs whose similarity strictly exceeds the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

/// Builds the above-threshold similarity graph over the vectors.
pub fn build_similarity_graph(vectors: &[Vec<f32>], threshold: f64) -> Result<SimilarityGraph, DedupError> {
    let n = vectors.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let sim = cosine_similarity(&vectors[i], &vectors[j])?;
            if sim > threshold {
                edges.push((i, j, sim));
            }
        }
    }
    Ok(SimilarityGraph { n, edges })
}

/// Cluster ids per index plus one representative (lowest index) per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub cluster_of: Vec<usize>,
    pub representatives: Vec<usize>,
}

impl ClusterAssignment {
    pub fn is_representative(&self, index: usize) -> bool {
        self.representatives.contains(&index)
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, x: usize, y: usize) {
        let (mut a, mut b) = (self.find(x), self.find(y));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Connected components of the similarity graph. Cluster ids are assigned in
/// order of first appearance, so the representative of cluster `c` is the
/// lowest generation index in that component.
pub fn cluster_graph(graph: &SimilarityGraph) -> ClusterAssignment {
    let mut uf = UnionFind::new(graph.n);
    for &(i, j, _) in &graph.edges {
        uf.union(i, j);
    }
    let mut cluster_ids: HashMap<usize, usize> = HashMap::new();
    let mut cluster_of = Vec::with_capacity(graph.n);
    let mut representatives = Vec::new();
    for i in 0..graph.n {
        let root = uf.find(i);
        let next_id = cluster_ids.len();
        let id = *cluster_ids.entry(root).or_insert_with(|| {
            representatives.push(i);
            next_id
        });
        cluster_of.push(id);
    }
    ClusterAssignment { cluster_of, representatives }
}

/// Single-linkage clustering of embedding vectors at the given threshold.
pub fn cluster(vectors: &[Vec<f32>], threshold: f64) -> Result<ClusterAssignment, DedupError> {
    Ok(cluster_graph(&build_similarity_graph(vectors, threshold)?))
}

/// Deduplicates one group of situations (one relationship group, or
/// everything under global dedup). Normalizes each situation with its own
/// pair's names, embeds, clusters, and marks non-representatives
/// [`SituationStatus::DroppedDuplicate`].
pub async fn dedup_group(
    gateway: &Gateway,
    pairs_by_id: &BTreeMap<String, CharacterPair>,
    mut situations: Vec<Situation>,
    threshold: f64,
    mode: NameHandling,
) -> Result<Vec<Situation>, DedupError> {
    // Only situations still in play participate in clustering.
    let active: Vec<usize> = situations
        .iter()
        .enumerate()
        .filter(|(_, s)| s.status == SituationStatus::Kept)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return Ok(situations);
    }
    let mut texts = Vec::with_capacity(active.len());
    for &i in &active {
        let situation = &situations[i];
        let pair = pairs_by_id.get(&situation.pair_id).ok_or_else(|| {
            DedupError::UnknownPair(situation.situation_id.clone(), situation.pair_id.clone())
        })?;
        let names = [pair.profiles[0].name.clone(), pair.profiles[1].name.clone()];
        let normalized = normalize_situation(&situation.text, &names, mode);
        situations[i].normalized_text = normalized.clone();
        texts.push(normalized);
    }
    let vectors = gateway.embed(&texts).await?;
    let raw: Vec<Vec<f32>> = vectors.iter().map(|v| v.values.clone()).collect();
    let assignment = cluster(&raw, threshold)?;
    for (pos, &i) in active.iter().enumerate() {
        situations[i].embedding = Some(raw[pos].clone());
        if !assignment.is_representative(pos) {
            situations[i].status = SituationStatus::DroppedDuplicate;
        }
    }
    Ok(situations)
}

/// Convenience wrapper deduplicating a single pair's situations.
pub async fn dedup_pair_situations(
    gateway: &Gateway,
    pair: &CharacterPair,
    situations: Vec<Situation>,
    threshold: f64,
    mode: NameHandling,
) -> Result<Vec<Situation>, DedupError> {
    let mut pairs = BTreeMap::new();
    pairs.insert(pair.pair_id.clone(), pair.clone());
    dedup_group(gateway, &pairs, situations, threshold, mode).await
}

static STOPWORDS: &str = include_str!("../data/stopwords.txt");

fn stopword_set() -> std::collections::BTreeSet<&'static str> {
    STOPWORDS.lines().map(str::trim).filter(|w| !w.is_empty()).collect()
}

/// Most frequent topic n-grams across normalized situation texts, for
/// feeding the avoid-list. Stop words and the PersonA/PersonB placeholders
/// are removed before counting; ties break lexicographically.
pub fn frequent_topic_ngrams(
    situations: &[String],
    n_range: &[usize],
    top_k: usize,
) -> Vec<(String, usize)> {
    assert!(top_k >= 1, "top_k must be >= 1");
    let stopwords = stopword_set();
    let is_placeholder = |t: &str| {
        ["persona", "personb"]
            .iter()
            .any(|p| t == *p || t.strip_prefix(p).is_some_and(|rest| rest.starts_with('\'')))
    };
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in situations {
        let tokens: Vec<String> = tokenize(text)
            .into_iter()
            .filter(|t| !stopwords.contains(t.as_str()) && !is_placeholder(t))
            .collect();
        for &n in n_range {
            if n == 0 || tokens.len() < n {
                continue;
            }
            for gram in tokens.windows(n) {
                *counts.entry(gram.join(" ")).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    ranked
}
