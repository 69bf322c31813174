//! The training objective: top-K candidate selection on
//! structural-visual similarity, 4-column parallelotope Gram volumes,
//! the sparse contrastive Gram loss, the InfoNCE alignment loss, and
//! their weighted combination.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Gram softmax temperature τ.
    pub tau: f64,
    /// InfoNCE temperature 𝒯.
    pub temperature: f64,
    /// Gram loss weight λ.
    pub lambda: f64,
    /// Candidates per source entity.
    pub topk: usize,
    /// Volume regularizer ε inside the square root.
    pub epsilon: f64,
    /// L2-normalize parallelotope columns before the Gram matrix.
    pub gram_normalize: bool,
    /// Count the positive pair inside the InfoNCE denominator.
    pub include_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            temperature: 0.1,
            lambda: 0.1,
            topk: 16,
            epsilon: 1e-8,
            gram_normalize: true,
            include_positive: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) {
        assert!(self.tau > 0.0 && self.temperature > 0.0, "temperatures must be positive");
        assert!(self.lambda >= 0.0, "lambda must be non-negative");
        assert!(self.topk >= 2, "need at least 2 candidates");
        assert!(self.epsilon > 0.0, "epsilon must be positive");
    }
}

/// Cosine similarity between every source row and every target row.
/// Zero rows normalize to zero rows (similarity 0).
pub fn similarity_matrix(src: &Matrix, tgt: &Matrix) -> Matrix {
    assert_eq!(src.cols, tgt.cols, "similarity dimension mismatch");
    src.l2_normalize_rows().matmul_nt(&tgt.l2_normalize_rows())
}

/// Per row: indices of the K largest similarities, descending, ties
/// broken by ascending entity index.
pub fn topk_candidates(sim: &Matrix, k: usize) -> Vec<Vec<usize>> {
    assert!(k <= sim.cols, "top-K larger than the candidate set");
    (0..sim.rows)
        .map(|r| {
            let row = sim.row(r);
            let mut idx: Vec<usize> = (0..sim.cols).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// `Vol = sqrt(|det(mᵀm)| + ε)` for a `d × 4` column stack.
pub fn gram_volume(m: &Tensor, epsilon: f64) -> Tensor {
    assert_eq!(m.cols, 4, "parallelotope must have 4 columns");
    m.transpose()
        .matmul(m)
        .det4()
        .abs()
        .add_scalar(epsilon)
        .sqrt()
}

/// One batch of Gram-loss inputs: source structural rows plus the
/// target graph's per-modality hidden states and the top-K candidate
/// table.
pub struct GramBatch {
    /// `M × d`, row i is sample i's source structural embedding.
    pub src_struct: Tensor,
    /// Target graph hidden states, `n₂ × d` each.
    pub tgt_vis: Tensor,
    pub tgt_attr: Tensor,
    pub tgt_rel: Tensor,
    /// `M × K` candidate entity indices.
    pub topk_idx: Vec<Vec<usize>>,
    /// True target entity per sample.
    pub target: Vec<usize>,
}

impl GramBatch {
    pub fn samples(&self) -> usize {
        self.topk_idx.len()
    }

    /// Position of the true target inside each top-K row, if present.
    pub fn mask_positions(&self) -> Vec<Option<usize>> {
        self.topk_idx
            .iter()
            .zip(&self.target)
            .map(|(row, t)| row.iter().position(|c| c == t))
            .collect()
    }

    /// Row-stack of all (sample, candidate) parallelotopes as 4-row
    /// blocks `[g_i; v_c; a_c; r_c]`, optionally row-normalized.
    /// Block-wise `S·Sᵀ` of this stack is the Gram matrix of Eq-12
    /// columns, so its 4×4 block determinants are the Gram determinants.
    fn stacked_blocks(&self, normalize: bool) -> Tensor {
        let m = self.samples();
        let n2 = self.tgt_vis.rows;
        let combined = Tensor::concat_rows(&[
            self.src_struct.clone(),
            self.tgt_vis.clone(),
            self.tgt_attr.clone(),
            self.tgt_rel.clone(),
        ]);
        let mut idx = Vec::with_capacity(4 * m * self.topk_idx[0].len());
        for (i, row) in self.topk_idx.iter().enumerate() {
            for &c in row {
                idx.push(i);
                idx.push(m + c);
                idx.push(m + n2 + c);
                idx.push(m + 2 * n2 + c);
            }
        }
        let stacked = combined.gather_rows(&idx);
        if normalize {
            stacked.l2_normalize_rows()
        } else {
            stacked
        }
    }

    /// All `M·K` volumes as an `M×K` tensor.
    pub fn volumes(&self, config: &LossConfig) -> Tensor {
        let k = self.topk_idx[0].len();
        let stacked = self.stacked_blocks(config.gram_normalize);
        stacked
            .block_matmul_nt(&stacked, 4)
            .det4_blocks()
            .abs()
            .add_scalar(config.epsilon)
            .sqrt()
            .reshape(self.samples(), k)
    }
}

/// One parallelotope `d × 4` for sample `i`, candidate slot `k`:
/// columns `[H̃_g^s(i), H̃_v^t(c), H̃_a^t(c), H̃_r^t(c)]`.
pub fn build_parallelotope(batch: &GramBatch, i: usize, k: usize) -> Tensor {
    let c = batch.topk_idx[i][k];
    let cols = [
        batch.src_struct.gather_rows(&[i]),
        batch.tgt_vis.gather_rows(&[c]),
        batch.tgt_attr.gather_rows(&[c]),
        batch.tgt_rel.gather_rows(&[c]),
    ];
    let normed: Vec<Tensor> = cols
        .iter()
        .map(|t| t.l2_normalize_rows().transpose())
        .collect();
    Tensor::concat_cols(&normed)
}

/// Sparse contrastive Gram loss (mean of `−log softmax(−Vol/τ)` at the
/// true target's slot). Samples whose target misses the top-K are
/// excluded from the mean; returns recorded 0 if none remain.
pub fn gram_loss(batch: &GramBatch, config: &LossConfig) -> Tensor {
    config.validate();
    let tape = batch.src_struct.tape().clone();
    let positions = batch.mask_positions();
    let included: Vec<(usize, usize)> = positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    if included.is_empty() {
        return tape.scalar(0.0);
    }
    let k = batch.topk_idx[0].len();
    let logits = batch.volumes(config).scale(-1.0 / config.tau);
    let lse = logits.row_logsumexp();
    let flat = logits.reshape(batch.samples() * k, 1);
    let pos_idx: Vec<usize> = included.iter().map(|&(i, p)| i * k + p).collect();
    let row_idx: Vec<usize> = included.iter().map(|&(i, _)| i).collect();
    lse.gather_rows(&row_idx)
        .sub(&flat.gather_rows(&pos_idx))
        .mean()
}

/// Symmetrized InfoNCE over a batch of aligned pairs with in-batch
/// negatives. `src`/`tgt` hold the L2-normalized joint embeddings of
/// the batch pairs, row i aligned with row i.
pub fn infonce_loss(src: &Tensor, tgt: &Tensor, config: &LossConfig) -> Tensor {
    config.validate();
    let b = src.rows;
    assert!(b >= 2, "InfoNCE needs at least 2 pairs for in-batch negatives");
    assert_eq!(tgt.rows, b);
    let tape = src.tape().clone();
    let sim = src.matmul(&tgt.transpose()).scale(1.0 / config.temperature);
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let direction = |logits: &Tensor| -> Tensor {
        let masked = if config.include_positive {
            logits.clone()
        } else {
            // remove the positive from the denominator
            let mut mask = Matrix::zeros(b, b);
            for i in 0..b {
                mask.set(i, i, -1e30);
            }
            logits.add(&tape.constant(mask))
        };
        let pos = logits.reshape(b * b, 1).gather_rows(&diag_idx);
        masked.row_logsumexp().sub(&pos).mean()
    };
    let fwd = direction(&sim);
    let bwd = direction(&sim.transpose());
    fwd.add(&bwd).scale(0.5)
}

/// `𝓛_total = 𝓛_InfoNCE + λ·𝓛_Gram`.
pub fn total_loss(infonce: &Tensor, gram: &Tensor, lambda: f64) -> Tensor {
    infonce.add(&gram.scale(lambda))
}
