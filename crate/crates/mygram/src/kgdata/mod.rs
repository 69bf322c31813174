//! Multi-modal knowledge-graph data model: dataset types, adjacency
//! construction, bag-of-words features, visual-feature loading, seed
//! splitting, synthetic pair generation, and the on-disk dataset
//! format.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::matrix::{Matrix, SparseSym};

mod io;
mod synth;

pub use io::{load_dataset, load_visual_features, save_dataset, IngestOptions};
pub use synth::{generate_synthetic, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("dangling entity id {id} in {context}")]
    DanglingId { id: String, context: String },
    #[error("entity {id} appears twice on the {side} side of the alignment")]
    DuplicateAlignment { id: String, side: &'static str },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("train ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("{0}")]
    Invalid(String),
}

/// One multi-modal knowledge graph with dense 0-based entity and
/// relation index spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalKG {
    pub entity_count: usize,
    pub relation_count: usize,
    /// (head, relation, tail) triples.
    pub triples: Vec<(usize, usize, usize)>,
    /// `entity_count × d_a` binary bag-of-words indicators for attributes.
    pub attr_features: Matrix,
    /// `entity_count × d_r` binary bag-of-words indicators for relations.
    pub rel_features: Matrix,
    /// `entity_count × d_v` real visual features.
    pub visual_features: Matrix,
    /// Whether each entity's visual row came from real data (vs the
    /// seeded random initializer).
    pub visual_present: Vec<bool>,
}

impl MultiModalKG {
    /// Check the structural invariants; returns the first violation.
    pub fn validate(&self) -> Result<(), DataError> {
        for &(h, r, t) in &self.triples {
            if h >= self.entity_count || t >= self.entity_count {
                return Err(DataError::Invalid(format!(
                    "triple ({h},{r},{t}) references entity out of range {}",
                    self.entity_count
                )));
            }
            if r >= self.relation_count {
                return Err(DataError::Invalid(format!(
                    "triple ({h},{r},{t}) references relation out of range {}",
                    self.relation_count
                )));
            }
        }
        for m in [&self.attr_features, &self.rel_features] {
            if m.rows != self.entity_count {
                return Err(DataError::Invalid("feature row count mismatch".into()));
            }
            if m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(DataError::Invalid(
                    "bag-of-words features must be 0/1".into(),
                ));
            }
        }
        if self.visual_features.rows != self.entity_count
            || self.visual_present.len() != self.entity_count
        {
            return Err(DataError::Invalid("visual feature row count mismatch".into()));
        }
        if !self.visual_features.is_finite() {
            return Err(DataError::Invalid("non-finite visual feature".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Pre-aligned entity pairs with a train/test split. A partial
/// bijection: no entity repeats on either side.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAlignments {
    pub pairs: Vec<(usize, usize)>,
    pub split: Vec<Split>,
}

impl SeedAlignments {
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn test_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == Split::Test)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut left = std::collections::BTreeSet::new();
        let mut right = std::collections::BTreeSet::new();
        for &(l, r) in &self.pairs {
            if !left.insert(l) {
                return Err(DataError::DuplicateAlignment {
                    id: l.to_string(),
                    side: "left",
                });
            }
            if !right.insert(r) {
                return Err(DataError::DuplicateAlignment {
                    id: r.to_string(),
                    side: "right",
                });
            }
        }
        if self.split.len() != self.pairs.len() {
            return Err(DataError::Invalid("split length mismatch".into()));
        }
        Ok(())
    }
}

/// Symmetric degree-normalized adjacency with self-loops:
/// `Â = D^{-1/2} (A + I) D^{-1/2}`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub dimension: usize,
    pub matrix: Rc<SparseSym>,
}

/// Build `Â` from the triples, discarding relation direction and edge
/// multiplicity.
pub fn build_adjacency(kg: &MultiModalKG) -> NormalizedAdjacency {
    let n = kg.entity_count;
    let mut edges = std::collections::BTreeSet::new();
    for i in 0..n {
        edges.insert((i, i));
    }
    for &(h, _, t) in &kg.triples {
        edges.insert((h, t));
        edges.insert((t, h));
    }
    let mut degree = vec![0.0f64; n];
    for &(i, _) in &edges {
        degree[i] += 1.0;
    }
    let triplets: Vec<(usize, usize, f64)> = edges
        .into_iter()
        .map(|(i, j)| (i, j, 1.0 / (degree[i] * degree[j]).sqrt()))
        .collect();
    NormalizedAdjacency {
        dimension: n,
        matrix: Rc::new(SparseSym::from_triplets(n, triplets)),
    }
}

/// Dense reference formula `D^{-1/2}(A+I)D^{-1/2}`; the oracle used by
/// the adjacency tests.
pub fn dense_normalized_adjacency(kg: &MultiModalKG) -> Matrix {
    let n = kg.entity_count;
    let mut a = Matrix::identity(n);
    for &(h, _, t) in &kg.triples {
        a.set(h, t, 1.0);
        a.set(t, h, 1.0);
    }
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if a.get(i, j) != 0.0 {
                out.set(i, j, a.get(i, j) / (degree[i] * degree[j]).sqrt());
            }
        }
    }
    out
}

/// Binary indicators over the `vocabulary_cap` most frequent tokens.
///
/// Frequency is document frequency (an entity counts a token once);
/// ties break by ascending token order; columns are ordered by
/// descending frequency. Returns the matrix and the chosen vocabulary
/// in column order.
pub fn build_bow_features(
    raw_tokens: &[Vec<String>],
    vocabulary_cap: usize,
) -> (Matrix, Vec<String>) {
    assert!(vocabulary_cap >= 1, "vocabulary_cap must be at least 1");
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for tokens in raw_tokens {
        let mut seen = std::collections::BTreeSet::new();
        for t in tokens {
            if seen.insert(t.as_str()) {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut vocab: Vec<(&str, usize)> = freq.into_iter().collect();
    // descending frequency, ascending token on ties
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    vocab.truncate(vocabulary_cap);
    let index: BTreeMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (*t, i))
        .collect();
    let mut m = Matrix::zeros(raw_tokens.len(), vocab.len());
    for (e, tokens) in raw_tokens.iter().enumerate() {
        for t in tokens {
            if let Some(&c) = index.get(t.as_str()) {
                m.set(e, c, 1.0);
            }
        }
    }
    (m, vocab.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// Fill the visual matrix from `(entity, vector)` entries; entities
/// without an entry get a seeded uniform draw from
/// `[-1/sqrt(d_v), 1/sqrt(d_v)]`.
pub fn apply_visual_features(
    kg: &mut MultiModalKG,
    entries: &[(usize, Vec<f64>)],
    dim: usize,
    rng_seed: u64,
) -> Result<(), DataError> {
    let n = kg.entity_count;
    let mut features = Matrix::zeros(n, dim);
    let mut present = vec![false; n];
    for (e, v) in entries {
        if *e >= n {
            return Err(DataError::DanglingId {
                id: e.to_string(),
                context: "visual feature file".into(),
            });
        }
        if v.len() != dim {
            return Err(DataError::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        features.row_mut(*e).copy_from_slice(v);
        present[*e] = true;
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    for e in 0..n {
        if !present[e] {
            for x in features.row_mut(e) {
                *x = rng.gen_range(-bound..bound);
            }
        }
    }
    kg.visual_features = features;
    kg.visual_present = present;
    Ok(())
}

/// Deterministically split alignment pairs into train/test.
pub fn split_seeds(
    pairs: &[(usize, usize)],
    train_ratio: f64,
    rng_seed: u64,
) -> Result<SeedAlignments, DataError> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(DataError::InvalidRatio(train_ratio));
    }
    if pairs.len() < 2 {
        return Err(DataError::Invalid(
            "need at least 2 alignment pairs to split".into(),
        ));
    }
    let n_train = ((pairs.len() as f64) * train_ratio).round() as usize;
    let n_train = n_train.clamp(1, pairs.len() - 1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut split = vec![Split::Test; pairs.len()];
    for &i in order.iter().take(n_train) {
        split[i] = Split::Train;
    }
    Ok(SeedAlignments {
        pairs: pairs.to_vec(),
        split,
    })
}
