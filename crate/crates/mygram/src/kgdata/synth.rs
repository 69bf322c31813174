//! Synthetic benchmark generator: a random multi-modal graph and a
//! perturbed copy of it under a hidden permutation, with the full
//! permutation as ground-truth alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

use super::{build_bow_features, split_seeds, DataError, MultiModalKG, SeedAlignments};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Entity count per graph.
    pub entities: usize,
    pub relations: usize,
    /// Average triples per entity.
    pub triple_density: f64,
    /// Attribute vocabulary size.
    pub attr_dim: usize,
    /// Attribute tokens given to each entity.
    pub attr_active: usize,
    pub visual_dim: usize,
    /// Probability that a triple is dropped from the copy.
    pub edge_drop: f64,
    /// Std of gaussian noise added to the copy's visual features,
    /// relative to the feature scale.
    pub feature_noise_std: f64,
    /// Fraction of entities given a near-duplicate partner whose
    /// visual and attribute features almost coincide.
    pub duplicate_fraction: f64,
    pub train_ratio: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 200,
            relations: 12,
            triple_density: 3.0,
            attr_dim: 60,
            attr_active: 6,
            visual_dim: 32,
            edge_drop: 0.0,
            feature_noise_std: 0.0,
            duplicate_fraction: 0.0,
            train_ratio: 0.3,
        }
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn as_f32(x: f64) -> f64 {
    // keep values exactly representable in the on-disk f32 format
    x as f32 as f64
}

pub fn generate_synthetic(
    spec: &SynthSpec,
    rng_seed: u64,
) -> Result<(MultiModalKG, MultiModalKG, SeedAlignments), DataError> {
    if spec.entities < 4 {
        return Err(DataError::Invalid(
            "synthetic graph needs at least 4 entities".into(),
        ));
    }
    if spec.relations == 0 || spec.attr_dim == 0 || spec.visual_dim == 0 {
        return Err(DataError::Invalid(
            "relations and feature dimensions must be positive".into(),
        ));
    }
    let n = spec.entities;
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);

    // ring backbone keeps the graph connected, then random extra triples
    let mut triples: std::collections::BTreeSet<(usize, usize, usize)> =
        std::collections::BTreeSet::new();
    for i in 0..n {
        triples.insert((i, rng.gen_range(0..spec.relations), (i + 1) % n));
    }
    let target = ((n as f64) * spec.triple_density).round() as usize;
    let mut guard = 0;
    while triples.len() < target && guard < 100 * target {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        if h != t {
            triples.insert((h, rng.gen_range(0..spec.relations), t));
        }
        guard += 1;
    }
    let triples1: Vec<(usize, usize, usize)> = triples.into_iter().collect();

    // attribute token lists
    let mut attr_tokens1: Vec<Vec<String>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut toks = std::collections::BTreeSet::new();
        while toks.len() < spec.attr_active.min(spec.attr_dim) {
            toks.insert(format!("a{:04}", rng.gen_range(0..spec.attr_dim)));
        }
        attr_tokens1.push(toks.into_iter().collect());
    }

    // visual features
    let bound = 1.0 / (spec.visual_dim as f64).sqrt();
    let mut visual1 = Matrix::zeros(n, spec.visual_dim);
    for v in visual1.data.iter_mut() {
        *v = as_f32(rng.gen_range(-bound..bound));
    }

    // near-duplicate interference pairs
    let dup_pairs = ((spec.duplicate_fraction * n as f64).ceil() as usize).min(n / 2);
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    for p in 0..dup_pairs {
        let base = ids[p];
        let recv = ids[dup_pairs + p];
        attr_tokens1[recv] = attr_tokens1[base].clone();
        for c in 0..spec.visual_dim {
            let v = visual1.get(base, c) + 0.07 * bound * gauss(&mut rng);
            visual1.set(recv, c, as_f32(v));
        }
    }

    // hidden permutation and the perturbed copy
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let mut triples2 = Vec::new();
    for &(h, r, t) in &triples1 {
        if rng.gen::<f64>() < spec.edge_drop {
            continue;
        }
        triples2.push((perm[h], r, perm[t]));
    }
    triples2.sort_unstable();

    let mut attr_tokens2 = vec![Vec::new(); n];
    let mut visual2 = Matrix::zeros(n, spec.visual_dim);
    for i in 0..n {
        attr_tokens2[perm[i]] = attr_tokens1[i].clone();
        for c in 0..spec.visual_dim {
            let noise = spec.feature_noise_std * bound * gauss(&mut rng);
            visual2.set(perm[i], c, as_f32(visual1.get(i, c) + noise));
        }
    }

    // shared attribute vocabulary across both graphs
    let mut combined = attr_tokens1.clone();
    combined.extend(attr_tokens2.iter().cloned());
    let (attr_all, _vocab) = build_bow_features(&combined, spec.attr_dim);
    let (attr1, attr2) = split_rows(&attr_all, n);

    // relation participation indicators, shared token space
    let rel_tokens = |triples: &[(usize, usize, usize)]| -> Vec<Vec<String>> {
        let mut toks = vec![std::collections::BTreeSet::new(); n];
        for &(h, r, t) in triples {
            toks[h].insert(format!("r{r:04}"));
            toks[t].insert(format!("r{r:04}"));
        }
        toks.into_iter()
            .map(|s| s.into_iter().collect())
            .collect()
    };
    let mut combined_rel = rel_tokens(&triples1);
    combined_rel.extend(rel_tokens(&triples2));
    let (rel_all, _vocab) = build_bow_features(&combined_rel, spec.relations);
    let (rel1, rel2) = split_rows(&rel_all, n);

    let kg1 = MultiModalKG {
        entity_count: n,
        relation_count: spec.relations,
        triples: triples1,
        attr_features: attr1,
        rel_features: rel1,
        visual_features: visual1,
        visual_present: vec![true; n],
    };
    let kg2 = MultiModalKG {
        entity_count: n,
        relation_count: spec.relations,
        triples: triples2,
        attr_features: attr2,
        rel_features: rel2,
        visual_features: visual2,
        visual_present: vec![true; n],
    };

    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, perm[i])).collect();
    let seeds = split_seeds(&pairs, spec.train_ratio, rng.gen())?;
    Ok((kg1, kg2, seeds))
}

fn split_rows(m: &Matrix, n: usize) -> (Matrix, Matrix) {
    let top = Matrix::from_vec(n, m.cols, m.data[..n * m.cols].to_vec());
    let bottom = Matrix::from_vec(m.rows - n, m.cols, m.data[n * m.cols..].to_vec());
    (top, bottom)
}
