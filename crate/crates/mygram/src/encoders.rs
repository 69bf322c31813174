//! Per-modality entity encoders: a relational-reflection graph
//! attention network (RRGAT) for the structural modality and affine
//! projections for the relation, attribute, and visual modalities.

use crate::kgdata::MultiModalKG;
use crate::matrix::Matrix;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Affine projection of one modality's raw features into the shared
/// hidden space: `H_m = X_m W_m + b_m` (rows are entities).
pub struct ModalityProjection {
    /// `d_m × d`
    pub w: Tensor,
    /// `1 × d`
    pub b: Tensor,
}

pub fn project_modality(proj: &ModalityProjection, features: &Tensor) -> Tensor {
    assert_eq!(
        features.cols, proj.w.rows,
        "feature dim {} does not match projection input {}",
        features.cols, proj.w.rows
    );
    features.matmul(&proj.w).add_row_broadcast(&proj.b)
}

/// Parameters of the structure encoder, registered on the current tape.
pub struct RRGATParams {
    /// `n × d` learnable entity base embeddings.
    pub x_g: Tensor,
    /// `1 × 2d` additive-attention vector.
    pub omega: Tensor,
    /// `R × d` unit-norm relation vectors.
    pub rel_vecs: Tensor,
    /// `(layer_count·d) × d` projection of the concatenated layer outputs.
    pub w_out: Tensor,
    pub layer_count: usize,
}

/// Static edge structure consumed by [`rrgat_encode`]: one record per
/// (destination, source, relation) attention edge, destination-sorted,
/// with self-loops carrying the sentinel relation index `R` (identity
/// reflection).
pub struct RRGATGraph {
    pub entity_count: usize,
    pub relation_count: usize,
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
    pub rel: Vec<usize>,
    /// Contiguous `(start, end)` edge ranges per destination entity.
    pub segments: Vec<(usize, usize)>,
}

impl RRGATGraph {
    pub fn new(kg: &MultiModalKG) -> Self {
        let n = kg.entity_count;
        let self_rel = kg.relation_count;
        // undirected neighborhoods, deduplicated
        let mut edges = std::collections::BTreeSet::new();
        for i in 0..n {
            edges.insert((i, i, self_rel));
        }
        for &(h, r, t) in &kg.triples {
            edges.insert((t, h, r));
            edges.insert((h, t, r));
        }
        let mut dst = Vec::with_capacity(edges.len());
        let mut src = Vec::with_capacity(edges.len());
        let mut rel = Vec::with_capacity(edges.len());
        for (d, s, r) in edges {
            dst.push(d);
            src.push(s);
            rel.push(r);
        }
        let mut segments = Vec::with_capacity(n);
        let mut start = 0;
        for i in 0..n {
            let mut end = start;
            while end < dst.len() && dst[end] == i {
                end += 1;
            }
            segments.push((start, end));
            start = end;
        }
        RRGATGraph {
            entity_count: n,
            relation_count: kg.relation_count,
            dst,
            src,
            rel,
            segments,
        }
    }
}

/// Householder reflection `M_r = I − 2 r rᵀ` for a unit vector.
/// Reference implementation for tests and invariant checks; the
/// encoder itself applies `M_r h = h − 2 (r·h) r` without materializing
/// the matrix.
pub fn reflection_matrix(r: &[f64]) -> Matrix {
    let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(
        (norm - 1.0).abs() < 1e-8,
        "reflection_matrix needs a unit vector, got norm {norm}"
    );
    let d = r.len();
    let mut m = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            m.data[i * d + j] -= 2.0 * r[i] * r[j];
        }
    }
    m
}

/// Structure encoding: `layer_count` rounds of reflection-based
/// attention aggregation, layer outputs concatenated and projected back
/// to width `d`.
///
/// Per layer: `h_i ← tanh(Σ_{(j,r)} a_{ij}^r · M_r h_j)` where the
/// attention logits are `leaky_relu(ω · [h_i ⊕ M_r h_j])` softmaxed
/// over each destination's neighborhood.
pub fn rrgat_encode(params: &RRGATParams, graph: &RRGATGraph) -> Tensor {
    let d = params.x_g.cols;
    assert_eq!(params.omega.cols, 2 * d, "omega width must be 2d");
    assert_eq!(params.rel_vecs.rows, graph.relation_count);
    assert_eq!(
        params.w_out.rows,
        params.layer_count * d,
        "w_out must accept the concatenated layer outputs"
    );
    let tape = params.x_g.tape().clone();
    // sentinel relation row: a zero vector makes the reflection the identity
    let zero_row = tape.constant(Matrix::zeros(1, d));
    let rel_ext = Tensor::concat_rows(&[params.rel_vecs.clone(), zero_row]);
    let omega_col = params.omega.transpose();

    let mut h = params.x_g.clone();
    let mut layer_outputs = Vec::with_capacity(params.layer_count);
    for _ in 0..params.layer_count {
        let h_src = h.gather_rows(&graph.src);
        let h_dst = h.gather_rows(&graph.dst);
        let r_hat = rel_ext.gather_rows(&graph.rel);
        // M_r h = h − 2 (r̂·h) r̂
        let dot = r_hat.hadamard(&h_src).row_sums();
        let mh = h_src.sub(&r_hat.mul_col_broadcast(&dot).scale(2.0));
        let logits = Tensor::concat_cols(&[h_dst, mh.clone()])
            .matmul(&omega_col)
            .leaky_relu(LEAKY_SLOPE);
        let attn = logits.segment_softmax(&graph.segments);
        let agg = mh
            .mul_col_broadcast(&attn)
            .scatter_add_rows(&graph.dst, graph.entity_count);
        h = agg.tanh();
        layer_outputs.push(h.clone());
    }
    Tensor::concat_cols(&layer_outputs).matmul(&params.w_out)
}
