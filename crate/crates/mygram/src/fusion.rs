//! Transformer-style cross-modal fusion. Each entity contributes four
//! modality tokens (structure, relation, attribute, visual) that
//! attend to each other through a multi-head attention block with
//! residuals, layer norms, and a feed-forward network. Attention mass
//! received by each modality yields global modality weights used to
//! scale the joint embedding.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::tensor::{Tape, Tensor};

pub const MODALITY_COUNT: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Sum attention received by a modality (column sums). Discriminates
    /// modalities; the default.
    Incoming,
    /// Sum attention emitted by a modality (row sums). Row-stochastic
    /// attention makes this uniform; kept for comparison runs.
    Outgoing,
}

pub struct AttentionHead {
    /// `d × d_h` query/key/value projections.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

pub struct FusionParams {
    pub heads: Vec<AttentionHead>,
    /// `d × d` output projection of the concatenated heads.
    pub w_o: Tensor,
    /// Feed-forward `d → ffn_dim → d`.
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `4 × d` learned modality-type embeddings added to the tokens.
    pub type_embed: Tensor,
}

impl FusionParams {
    pub fn head_dim(&self) -> usize {
        self.heads[0].wq.cols
    }
}

/// Per-entity multi-head attention over the four modality tokens.
///
/// `tokens` stacks entities as contiguous 4-row blocks `[g; r; a; v]`.
/// Returns the projected attention output and the per-head `4n × 4`
/// row-stochastic attention matrices.
pub fn cross_modal_attention(tokens: &Tensor, params: &FusionParams) -> (Tensor, Vec<Tensor>) {
    assert_eq!(tokens.rows % MODALITY_COUNT, 0, "tokens must stack 4-row blocks");
    let d_h = params.head_dim();
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads.len());
    let mut attns = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = tokens.matmul(&head.wq);
        let k = tokens.matmul(&head.wk);
        let v = tokens.matmul(&head.wv);
        let attn = q.block_matmul_nt(&k, MODALITY_COUNT).row_softmax(scale);
        heads.push(attn.block_matmul_nn(&v, MODALITY_COUNT));
        attns.push(attn);
    }
    let out = Tensor::concat_cols(&heads).matmul(&params.w_o);
    (out, attns)
}

/// Full block: type embeddings, attention with residual + layer norm,
/// feed-forward with residual + layer norm.
pub fn transformer_block(tokens: &Tensor, params: &FusionParams) -> (Tensor, Vec<Tensor>) {
    let type_idx: Vec<usize> = (0..tokens.rows).map(|r| r % MODALITY_COUNT).collect();
    let x0 = tokens.add(&params.type_embed.gather_rows(&type_idx));
    let (ma, attns) = cross_modal_attention(&x0, params);
    let x1 = x0
        .add(&ma)
        .layer_norm(&params.ln1_gain, &params.ln1_bias, LAYER_NORM_EPS);
    let ffn = x1
        .matmul(&params.ffn_w1)
        .add_row_broadcast(&params.ffn_b1)
        .relu()
        .matmul(&params.ffn_w2)
        .add_row_broadcast(&params.ffn_b2);
    let hidden = x1
        .add(&ffn)
        .layer_norm(&params.ln2_gain, &params.ln2_bias, LAYER_NORM_EPS);
    (hidden, attns)
}

/// Differentiable modality weights from recorded attention matrices:
/// per-modality attention mass averaged over entities and summed over
/// heads, softmaxed with the `1/√(|M|·N_h)` damping. Returns a `1 × 4`
/// tensor.
pub fn modality_weight_tensor(attns: &[Tensor], mode: WeightMode) -> Tensor {
    assert!(!attns.is_empty());
    let rows = attns[0].rows;
    let n = (rows / MODALITY_COUNT) as f64;
    let n_h = attns.len();
    let tape = attns[0].tape().clone();
    // selector averaging the 4×4 blocks over entities
    let mut sel = Matrix::zeros(MODALITY_COUNT, rows);
    for b in 0..rows / MODALITY_COUNT {
        for r in 0..MODALITY_COUNT {
            sel.set(r, b * MODALITY_COUNT + r, 1.0 / n);
        }
    }
    let sel = tape.constant(sel);
    let mut total: Option<Tensor> = None;
    for attn in attns {
        let avg = sel.matmul(attn);
        let s = match mode {
            WeightMode::Incoming => tape
                .constant(Matrix::filled(1, MODALITY_COUNT, 1.0))
                .matmul(&avg),
            WeightMode::Outgoing => avg.row_sums().transpose(),
        };
        total = Some(match total {
            Some(t) => t.add(&s),
            None => s,
        });
    }
    let damp = 1.0 / ((MODALITY_COUNT * n_h) as f64).sqrt();
    total.unwrap().row_softmax(damp)
}

/// Value-level reference: weights from per-head entity-averaged 4×4
/// attention matrices.
pub fn modality_weights(attn_avg: &[Matrix], mode: WeightMode) -> [f64; MODALITY_COUNT] {
    let n_h = attn_avg.len();
    let mut s = [0.0f64; MODALITY_COUNT];
    for a in attn_avg {
        assert!(a.rows == MODALITY_COUNT && a.cols == MODALITY_COUNT);
        for m in 0..MODALITY_COUNT {
            for j in 0..MODALITY_COUNT {
                s[m] += match mode {
                    WeightMode::Incoming => a.get(j, m),
                    WeightMode::Outgoing => a.get(m, j),
                };
            }
        }
    }
    let damp = 1.0 / ((MODALITY_COUNT * n_h) as f64).sqrt();
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; MODALITY_COUNT];
    let mut sum = 0.0;
    for m in 0..MODALITY_COUNT {
        out[m] = ((s[m] - mx) * damp).exp();
        sum += out[m];
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// Gather one modality's rows out of a `4n × d` block-stacked matrix.
pub fn modality_rows(stacked: &Tensor, modality: usize) -> Tensor {
    assert!(modality < MODALITY_COUNT);
    let n = stacked.rows / MODALITY_COUNT;
    let idx: Vec<usize> = (0..n).map(|i| i * MODALITY_COUNT + modality).collect();
    stacked.gather_rows(&idx)
}

/// Joint embedding `H_o = [H_g | ω_r H̃_r | ω_a H̃_a | ω_v H̃_v]`,
/// rows L2-normalized for cosine retrieval.
pub fn fuse_joint(h_g: &Tensor, hidden: &Tensor, weights: &Tensor) -> Tensor {
    assert_eq!(hidden.rows, MODALITY_COUNT * h_g.rows, "hidden/H_g row mismatch");
    assert!(weights.rows == 1 && weights.cols == MODALITY_COUNT);
    let w_col = weights.transpose();
    let mut parts = vec![h_g.clone()];
    for m in 1..MODALITY_COUNT {
        let w_m = w_col.gather_rows(&[m]);
        parts.push(modality_rows(hidden, m).mul_scalar_tensor(&w_m));
    }
    Tensor::concat_cols(&parts).l2_normalize_rows()
}

/// Stack per-modality `n × d` embeddings into the `4n × d` token layout.
pub fn stack_tokens(h_g: &Tensor, h_r: &Tensor, h_a: &Tensor, h_v: &Tensor) -> Tensor {
    let n = h_g.rows;
    assert!(h_r.rows == n && h_a.rows == n && h_v.rows == n);
    // interleave: rows 4i..4i+4 are entity i's [g; r; a; v]
    let stacked = Tensor::concat_rows(&[h_g.clone(), h_r.clone(), h_a.clone(), h_v.clone()]);
    let idx: Vec<usize> = (0..4 * n).map(|r| (r % 4) * n + r / 4).collect();
    stacked.gather_rows(&idx)
}

/// Fresh fusion parameters; uniform init scaled by fan-in.
pub fn init_fusion_matrices(
    d: usize,
    heads: usize,
    ffn_dim: usize,
    rng: &mut impl rand::Rng,
) -> Vec<(String, Matrix)> {
    assert!(d % heads == 0, "head count must divide the hidden size");
    let d_h = d / heads;
    let bound = 1.0 / (d as f64).sqrt();
    let mut out = Vec::new();
    for i in 0..heads {
        out.push((format!("fusion.head{i}.wq"), Matrix::uniform(d, d_h, -bound, bound, rng)));
        out.push((format!("fusion.head{i}.wk"), Matrix::uniform(d, d_h, -bound, bound, rng)));
        out.push((format!("fusion.head{i}.wv"), Matrix::uniform(d, d_h, -bound, bound, rng)));
    }
    out.push(("fusion.w_o".into(), Matrix::uniform(d, d, -bound, bound, rng)));
    out.push(("fusion.ffn_w1".into(), Matrix::uniform(d, ffn_dim, -bound, bound, rng)));
    out.push(("fusion.ffn_b1".into(), Matrix::zeros(1, ffn_dim)));
    out.push((
        "fusion.ffn_w2".into(),
        Matrix::uniform(ffn_dim, d, -1.0 / (ffn_dim as f64).sqrt(), 1.0 / (ffn_dim as f64).sqrt(), rng),
    ));
    out.push(("fusion.ffn_b2".into(), Matrix::zeros(1, d)));
    out.push(("fusion.ln1_gain".into(), Matrix::filled(1, d, 1.0)));
    out.push(("fusion.ln1_bias".into(), Matrix::zeros(1, d)));
    out.push(("fusion.ln2_gain".into(), Matrix::filled(1, d, 1.0)));
    out.push(("fusion.ln2_bias".into(), Matrix::zeros(1, d)));
    out.push(("fusion.type_embed".into(), Matrix::uniform(4, d, -bound, bound, rng)));
    out
}

/// Rebuild [`FusionParams`] from named tensors registered on a tape.
pub fn fusion_params_from(lookup: &dyn Fn(&str) -> Tensor, heads: usize) -> FusionParams {
    FusionParams {
        heads: (0..heads)
            .map(|i| AttentionHead {
                wq: lookup(&format!("fusion.head{i}.wq")),
                wk: lookup(&format!("fusion.head{i}.wk")),
                wv: lookup(&format!("fusion.head{i}.wv")),
            })
            .collect(),
        w_o: lookup("fusion.w_o"),
        ffn_w1: lookup("fusion.ffn_w1"),
        ffn_b1: lookup("fusion.ffn_b1"),
        ffn_w2: lookup("fusion.ffn_w2"),
        ffn_b2: lookup("fusion.ffn_b2"),
        ln1_gain: lookup("fusion.ln1_gain"),
        ln1_bias: lookup("fusion.ln1_bias"),
        ln2_gain: lookup("fusion.ln2_gain"),
        ln2_bias: lookup("fusion.ln2_bias"),
        type_embed: lookup("fusion.type_embed"),
    }
}

pub fn params_on_tape(tape: &Tape, mats: &[(String, Matrix)], heads: usize) -> FusionParams {
    let tensors: std::collections::BTreeMap<String, Tensor> = mats
        .iter()
        .map(|(n, m)| (n.clone(), tape.param(m.clone())))
        .collect();
    fusion_params_from(&|name: &str| tensors[name].clone(), heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_param_rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(tape: &Tape, d: usize, heads: usize, ffn: usize) -> FusionParams {
        let d_h = d / heads;
        FusionParams {
            heads: (0..heads)
                .map(|_| AttentionHead {
                    wq: tape.param(Matrix::zeros(d, d_h)),
                    wk: tape.param(Matrix::zeros(d, d_h)),
                    wv: tape.param(Matrix::zeros(d, d_h)),
                })
                .collect(),
            w_o: tape.param(Matrix::zeros(d, d)),
            ffn_w1: tape.param(Matrix::zeros(d, ffn)),
            ffn_b1: tape.param(Matrix::zeros(1, ffn)),
            ffn_w2: tape.param(Matrix::zeros(ffn, d)),
            ffn_b2: tape.param(Matrix::zeros(1, d)),
            ln1_gain: tape.param(Matrix::filled(1, d, 1.0)),
            ln1_bias: tape.param(Matrix::zeros(1, d)),
            ln2_gain: tape.param(Matrix::filled(1, d, 1.0)),
            ln2_bias: tape.param(Matrix::zeros(1, d)),
            type_embed: tape.param(Matrix::zeros(4, d)),
        }
    }

    fn random_params(tape: &Tape, d: usize, heads: usize, ffn: usize, seed: u64) -> FusionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params_on_tape(tape, &init_fusion_matrices(d, heads, ffn, &mut rng), heads)
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let tape = Tape::new();
        let d = 4;
        let mut params = zero_params(&tape, d, 1, 8);
        // nonzero V so the output is the mean of the value rows
        params.heads[0].wv = tape.param(Matrix::identity(d));
        params.w_o = tape.param(Matrix::identity(d));
        let t = Matrix::from_vec(
            4,
            4,
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, 0.0, //
                0.0, 0.0, 3.0, 0.0, //
                0.0, 0.0, 0.0, 4.0,
            ],
        );
        let (out, attns) = cross_modal_attention(&tape.constant(t.clone()), &params);
        for v in &attns[0].value().data {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let mean: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|i| t.get(i, j)).sum::<f64>() / 4.0)
            .collect();
        for r in 0..4 {
            for j in 0..4 {
                assert!((out.value().get(r, j) - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_score_saturates_to_one_token() {
        let tape = Tape::new();
        let d = 2;
        let mut params = zero_params(&tape, d, 1, 4);
        params.heads[0].wv = tape.param(Matrix::identity(d));
        params.w_o = tape.param(Matrix::identity(d));
        // queries/keys aligned so token 0 attends overwhelmingly to token 2
        params.heads[0].wq = tape.param(Matrix::from_vec(2, 2, vec![1e3, 0.0, 0.0, 0.0]));
        params.heads[0].wk = tape.param(Matrix::from_vec(2, 2, vec![0.0, 0.0, 1e3, 0.0]));
        let t = Matrix::from_vec(
            4,
            2,
            vec![
                1.0, 0.0, // strong query along dim 0
                0.0, 0.0, //
                0.0, 1.0, // strong key from dim 1
                0.0, 0.0,
            ],
        );
        let (out, attns) = cross_modal_attention(&tape.constant(t.clone()), &params);
        let a = attns[0].value();
        assert!(a.get(0, 2) > 1.0 - 1e-9);
        assert!((out.value().get(0, 0) - t.get(2, 0)).abs() < 1e-8);
        assert!((out.value().get(0, 1) - t.get(2, 1)).abs() < 1e-8);
    }

    #[test]
    fn two_head_hand_oracle_single_entity() {
        let d = 4;
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = random_params(&tape, d, 2, 8, 3);
        let t = Matrix::uniform(4, d, -1.0, 1.0, &mut rng);
        let (out, _) = cross_modal_attention(&tape.constant(t.clone()), &params);

        // straight-line recomputation
        let d_h = 2;
        let mut headouts: Vec<Matrix> = Vec::new();
        for h in &params.heads {
            let q = t.matmul(&h.wq.value());
            let k = t.matmul(&h.wk.value());
            let v = t.matmul(&h.wv.value());
            let mut s = q.matmul_nt(&k).scale(1.0 / (d_h as f64).sqrt());
            for r in 0..4 {
                let row = s.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            headouts.push(s.matmul(&v));
        }
        let mut cat = Matrix::zeros(4, d);
        for r in 0..4 {
            for j in 0..d_h {
                cat.set(r, j, headouts[0].get(r, j));
                cat.set(r, d_h + j, headouts[1].get(r, j));
            }
        }
        let want = cat.matmul(&params.w_o.value());
        assert!(out.value().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let tape = Tape::new();
        let params = random_params(&tape, 6, 3, 10, 5);
        let t = Matrix::uniform(8, 6, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(6));
        let (_, attns) = cross_modal_attention(&tape.constant(t), &params);
        for a in &attns {
            let av = a.value();
            for r in 0..av.rows {
                let s: f64 = av.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(av.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn zeroed_block_standardizes_tokens() {
        let tape = Tape::new();
        let d = 6;
        let params = zero_params(&tape, d, 2, 8);
        let t = Matrix::uniform(4, d, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let (hidden, _) = transformer_block(&tape.constant(t.clone()), &params);
        // MA and FFN vanish; two stacked layer norms reduce to one
        // standardization (an already standardized row is fixed up to eps)
        let hv = hidden.value();
        for r in 0..4 {
            let row = t.row(r);
            let n = d as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                let want = (row[j] - mu) * inv;
                assert!((hv.get(r, j) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn block_output_shape_matches_input() {
        let tape = Tape::new();
        let params = random_params(&tape, 6, 2, 12, 8);
        for n in [1usize, 3, 5] {
            let t = Matrix::uniform(4 * n, 6, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(n as u64));
            let (hidden, attns) = transformer_block(&tape.constant(t), &params);
            assert_eq!(hidden.rows, 4 * n);
            assert_eq!(hidden.cols, 6);
            assert_eq!(attns.len(), 2);
            assert_eq!(attns[0].rows, 4 * n);
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_weights() {
        let uni = Matrix::filled(4, 4, 0.25);
        let w = modality_weights(&vec![uni; 5], WeightMode::Incoming);
        for m in 0..4 {
            assert!((w[m] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_columns_give_dominant_weight() {
        // every token attends fully to modality 0, across 5 heads
        let mut a = Matrix::zeros(4, 4);
        for r in 0..4 {
            a.set(r, 0, 1.0);
        }
        let w = modality_weights(&vec![a; 5], WeightMode::Incoming);
        // s = (20,0,0,0), damped by 1/√20 → softmax(4.472, 0, 0, 0)
        let z = 20.0 / 20.0f64.sqrt();
        let want = z.exp() / (z.exp() + 3.0);
        assert!((w[0] - want).abs() < 1e-12);
        assert!((w[0] - 0.967).abs() < 5e-3);
        // outgoing mode stays uniform on row-stochastic input
        let w_out = modality_weights(&vec![Matrix::filled(4, 4, 0.25); 5], WeightMode::Outgoing);
        assert!((w_out[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // random row-stochastic matrices
        let mats: Vec<Matrix> = (0..3)
            .map(|_| {
                let mut m = Matrix::uniform(4, 4, 0.0, 1.0, &mut rng);
                for r in 0..4 {
                    let s: f64 = m.row(r).iter().sum();
                    for x in m.row_mut(r) {
                        *x /= s;
                    }
                }
                m
            })
            .collect();
        let w = modality_weights(&mats, WeightMode::Incoming);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        // adding a constant to every score leaves the softmax unchanged
        let shifted: Vec<Matrix> = mats.iter().map(|m| m.map(|x| x + 0.37)).collect();
        let ws = modality_weights(&shifted, WeightMode::Incoming);
        for m in 0..4 {
            assert!((w[m] - ws[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_tensor_matches_value_reference() {
        let tape = Tape::new();
        let params = random_params(&tape, 6, 3, 10, 11);
        let n = 5;
        let t = Matrix::uniform(4 * n, 6, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(13));
        let (_, attns) = cross_modal_attention(&tape.constant(t), &params);
        let wt = modality_weight_tensor(&attns, WeightMode::Incoming).value();
        // value-level reference from entity-averaged blocks
        let avg: Vec<Matrix> = attns
            .iter()
            .map(|a| {
                let av = a.value();
                let mut m = Matrix::zeros(4, 4);
                for b in 0..n {
                    for r in 0..4 {
                        for c in 0..4 {
                            m.data[r * 4 + c] += av.get(b * 4 + r, c) / n as f64;
                        }
                    }
                }
                m
            })
            .collect();
        let want = modality_weights(&avg, WeightMode::Incoming);
        for m in 0..4 {
            assert!((wt.data[m] - want[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_joint_layout_and_normalization() {
        let tape = Tape::new();
        let n = 3;
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h_g = tape.constant(Matrix::uniform(n, d, -1.0, 1.0, &mut rng));
        let hidden = tape.constant(Matrix::uniform(4 * n, d, -1.0, 1.0, &mut rng));
        // zero weight for the relation modality zeroes its block
        let w = tape.constant(Matrix::from_vec(1, 4, vec![0.5, 0.0, 0.3, 0.2]));
        let joint = fuse_joint(&h_g, &hidden, &w).value();
        assert_eq!(joint.cols, 4 * d);
        for r in 0..n {
            for j in d..2 * d {
                assert_eq!(joint.get(r, j), 0.0);
            }
            let norm: f64 = joint.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_tokens_interleaves_entities() {
        let tape = Tape::new();
        let mk = |v: f64| tape.constant(Matrix::filled(2, 3, v));
        let t = stack_tokens(&mk(0.0), &mk(1.0), &mk(2.0), &mk(3.0)).value();
        for e in 0..2 {
            for m in 0..4 {
                assert_eq!(t.get(e * 4 + m, 0), m as f64);
            }
        }
    }

    #[test]
    fn modality_token_permutation_equivariance() {
        // permuting the token order of a single entity (and the type
        // embeddings consistently) permutes the hidden rows identically
        let tape = Tape::new();
        let d = 6;
        let params = random_params(&tape, d, 2, 8, 21);
        let t = Matrix::uniform(4, d, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(22));
        let (base, _) = transformer_block(&tape.constant(t.clone()), &params);

        let perm = [2usize, 0, 3, 1];
        let mut tp = Matrix::zeros(4, d);
        let mut te = Matrix::zeros(4, d);
        let type_v = params.type_embed.value();
        for r in 0..4 {
            tp.row_mut(r).copy_from_slice(t.row(perm[r]));
            te.row_mut(r).copy_from_slice(type_v.row(perm[r]));
        }
        let tape2 = Tape::new();
        let p2 = FusionParams {
            heads: params
                .heads
                .iter()
                .map(|h| AttentionHead {
                    wq: tape2.param(h.wq.value()),
                    wk: tape2.param(h.wk.value()),
                    wv: tape2.param(h.wv.value()),
                })
                .collect(),
            w_o: tape2.param(params.w_o.value()),
            ffn_w1: tape2.param(params.ffn_w1.value()),
            ffn_b1: tape2.param(params.ffn_b1.value()),
            ffn_w2: tape2.param(params.ffn_w2.value()),
            ffn_b2: tape2.param(params.ffn_b2.value()),
            ln1_gain: tape2.param(params.ln1_gain.value()),
            ln1_bias: tape2.param(params.ln1_bias.value()),
            ln2_gain: tape2.param(params.ln2_gain.value()),
            ln2_bias: tape2.param(params.ln2_bias.value()),
            type_embed: tape2.param(te),
        };
        let (permuted, _) = transformer_block(&tape2.constant(tp), &p2);
        let bv = base.value();
        let pv = permuted.value();
        for r in 0..4 {
            for j in 0..d {
                assert!((bv.get(perm[r], j) - pv.get(r, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_fusion_gradient_matches_finite_differences() {
        let d = 4;
        let heads = 2;
        let ffn = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let named = init_fusion_matrices(d, heads, ffn, &mut rng);
        let mut mats: Vec<Matrix> = named.iter().map(|(_, m)| m.clone()).collect();
        // token input participates too
        mats.push(Matrix::uniform(8, d, -1.0, 1.0, &mut rng));
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let err = max_param_rel_err(
            &mats,
            &mut |_t, ps| {
                let lookup = |name: &str| {
                    let i = names.iter().position(|n| n == name).unwrap();
                    ps[i].clone()
                };
                let params = fusion_params_from(&lookup, heads);
                let tokens = ps[names.len()].clone();
                let (hidden, attns) = transformer_block(&tokens, &params);
                let w = modality_weight_tensor(&attns, WeightMode::Incoming);
                let h_g = modality_rows(&hidden, 0);
                let joint = fuse_joint(&h_g, &hidden, &w);
                joint.hadamard(&joint).mean()
            },
            8,
            1e-5,
            31,
        );
        assert!(err < 1e-4, "rel err {err}");
    }
}
