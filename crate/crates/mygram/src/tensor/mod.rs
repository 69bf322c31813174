//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive operation executed during a
//! forward pass. [`Tensor`] is a lightweight handle (tape + node index)
//! whose methods append new records. Calling [`Tensor::backward`] on a
//! scalar walks the records once in reverse and accumulates gradients
//! into every `requires_grad` ancestor.
//!
//! The training loop builds a fresh tape per step: parameters are
//! re-registered as leaves, the forward pass is recorded, `backward`
//! populates gradients, and the optimizer reads them back by index.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::matrix::{Matrix, SparseSym};

mod ops;
pub use ops::Op;

pub(crate) struct Node {
    pub op: Op,
    pub value: Matrix,
    pub grad: Option<Matrix>,
    pub requires_grad: bool,
    /// Times the reverse pass has propagated through this node.
    pub visits: usize,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// Shared recording of a differentiable computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&self, value: Matrix) -> Tensor {
        self.push(Op::Leaf, value, false)
    }

    /// Learnable input; `backward` will populate its gradient.
    pub fn param(&self, value: Matrix) -> Tensor {
        self.push(Op::Leaf, value, true)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Matrix::from_vec(1, 1, vec![v]))
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op, value: Matrix, requires_grad: bool) -> Tensor {
        let rows = value.rows;
        let cols = value.cols;
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
            visits: 0,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn requires(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].requires_grad
    }

    /// How many times each node was propagated through during reverse
    /// passes. Exposed for the single-visit invariant test.
    pub fn visit_counts(&self) -> Vec<usize> {
        self.inner.borrow().nodes.iter().map(|n| n.visits).collect()
    }
}

/// Handle to one recorded matrix value.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Matrix {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    pub fn grad(&self) -> Option<Matrix> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(
            self.rows == 1 && self.cols == 1,
            "scalar_value on a {}x{} tensor",
            self.rows,
            self.cols
        );
        self.with_value(|m| m.data[0])
    }

    fn unary(&self, op: Op, value: Matrix) -> Tensor {
        self.tape.push(op, value, self.requires_grad())
    }

    fn binary(&self, other: &Tensor, op: Op, value: Matrix) -> Tensor {
        assert!(
            self.tape.same_tape(&other.tape),
            "operands recorded on different tapes"
        );
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(op, value, rg)
    }

    // ---- arithmetic primitives ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let v = self.with_value(|a| other.with_value(|b| a.matmul(b)));
        self.binary(other, Op::MatMul(self.idx, other.idx), v)
    }

    /// `self · A·...` against a constant sparse symmetric matrix on the left:
    /// returns `adj · self`.
    pub fn sparse_lmul(&self, adj: &Rc<SparseSym>) -> Tensor {
        assert_eq!(adj.dim, self.rows, "sparse_lmul dimension mismatch");
        let v = self.with_value(|h| adj.matmul_dense(h));
        self.unary(Op::SparseLMul(Rc::clone(adj), self.idx), v)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "add shape mismatch"
        );
        let v = self.with_value(|a| other.with_value(|b| a.add(b)));
        self.binary(other, Op::Add(self.idx, other.idx), v)
    }

    /// Add a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Tensor {
        assert!(
            row.rows == 1 && row.cols == self.cols,
            "add_row_broadcast shape mismatch"
        );
        let v = self.with_value(|a| {
            row.with_value(|b| {
                let mut out = a.clone();
                for r in 0..out.rows {
                    for (o, x) in out.row_mut(r).iter_mut().zip(b.data.iter()) {
                        *o += x;
                    }
                }
                out
            })
        });
        self.binary(row, Op::AddRowBroadcast(self.idx, row.idx), v)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "sub shape mismatch"
        );
        let v = self.with_value(|a| other.with_value(|b| a.sub(b)));
        self.binary(other, Op::Sub(self.idx, other.idx), v)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "hadamard shape mismatch"
        );
        let v = self.with_value(|a| other.with_value(|b| a.zip(b, |x, y| x * y)));
        self.binary(other, Op::Hadamard(self.idx, other.idx), v)
    }

    /// Multiply each row of an `m×n` matrix by the matching entry of an
    /// `m×1` column.
    pub fn mul_col_broadcast(&self, col: &Tensor) -> Tensor {
        assert!(
            col.cols == 1 && col.rows == self.rows,
            "mul_col_broadcast shape mismatch"
        );
        let v = self.with_value(|a| {
            col.with_value(|b| {
                let mut out = a.clone();
                for r in 0..out.rows {
                    let s = b.data[r];
                    for o in out.row_mut(r) {
                        *o *= s;
                    }
                }
                out
            })
        });
        self.binary(col, Op::MulColBroadcast(self.idx, col.idx), v)
    }

    /// Multiply by a `1×1` recorded scalar.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Tensor {
        assert!(s.rows == 1 && s.cols == 1, "mul_scalar_tensor needs a 1x1 scalar");
        let sv = s.scalar_value();
        let v = self.with_value(|a| a.scale(sv));
        self.binary(s, Op::MulScalar(self.idx, s.idx), v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = self.with_value(|a| a.scale(c));
        self.unary(Op::Scale(self.idx, c), v)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = self.with_value(|a| a.map(|x| x + c));
        self.unary(Op::AddScalar(self.idx), v)
    }

    pub fn transpose(&self) -> Tensor {
        let v = self.with_value(|a| a.transpose());
        self.unary(Op::Transpose(self.idx), v)
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(self.rows * self.cols, rows * cols, "reshape element count mismatch");
        let v = self.with_value(|a| Matrix::from_vec(rows, cols, a.data.clone()));
        self.unary(Op::Reshape(self.idx), v)
    }

    // ---- structural primitives ----

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = parts[0].cols;
        let tape = parts[0].tape.clone();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ids = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows column mismatch");
            assert!(tape.same_tape(&p.tape), "concat_rows across tapes");
            p.with_value(|m| data.extend_from_slice(&m.data));
            rows += p.rows;
            ids.push(p.idx);
            rg |= p.requires_grad();
        }
        tape.push(Op::ConcatRows(ids), Matrix::from_vec(rows, cols, data), rg)
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows;
        let tape = parts[0].tape.clone();
        let total_cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, total_cols);
        let mut ids = Vec::with_capacity(parts.len());
        let mut rg = false;
        let mut offset = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "concat_cols row mismatch");
            assert!(tape.same_tape(&p.tape), "concat_cols across tapes");
            p.with_value(|m| {
                for r in 0..rows {
                    out.data[r * total_cols + offset..r * total_cols + offset + p.cols]
                        .copy_from_slice(m.row(r));
                }
            });
            offset += p.cols;
            ids.push(p.idx);
            rg |= p.requires_grad();
        }
        tape.push(Op::ConcatCols(ids), out, rg)
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let v = self.with_value(|a| {
            let mut out = Matrix::zeros(indices.len(), a.cols);
            for (r, &i) in indices.iter().enumerate() {
                assert!(i < a.rows, "gather_rows index {} out of {} rows", i, a.rows);
                out.row_mut(r).copy_from_slice(a.row(i));
            }
            out
        });
        self.unary(Op::GatherRows(self.idx, indices.to_vec()), v)
    }

    /// Scatter-add rows of an `E×d` matrix into an `out_rows×d` output:
    /// `out[targets[e]] += self[e]`.
    pub fn scatter_add_rows(&self, targets: &[usize], out_rows: usize) -> Tensor {
        assert_eq!(targets.len(), self.rows, "scatter_add_rows target count mismatch");
        let v = self.with_value(|a| {
            let mut out = Matrix::zeros(out_rows, a.cols);
            for (r, &t) in targets.iter().enumerate() {
                assert!(t < out_rows, "scatter target out of range");
                for (o, x) in out.row_mut(t).iter_mut().zip(a.row(r)) {
                    *o += x;
                }
            }
            out
        });
        self.unary(Op::ScatterAddRows(self.idx, targets.to_vec()), v)
    }

    // ---- pointwise nonlinearities ----

    pub fn relu(&self) -> Tensor {
        let v = self.with_value(|a| a.map(|x| x.max(0.0)));
        self.unary(Op::Relu(self.idx), v)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.with_value(|a| a.map(|x| if x > 0.0 { x } else { slope * x }));
        self.unary(Op::LeakyRelu(self.idx, slope), v)
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.with_value(|a| a.map(f64::tanh));
        self.unary(Op::Tanh(self.idx), v)
    }

    pub fn exp(&self) -> Tensor {
        let v = self.with_value(|a| a.map(f64::exp));
        self.unary(Op::Exp(self.idx), v)
    }

    pub fn log(&self) -> Tensor {
        let v = self.with_value(|a| a.map(f64::ln));
        self.unary(Op::Log(self.idx), v)
    }

    pub fn sqrt(&self) -> Tensor {
        let v = self.with_value(|a| a.map(f64::sqrt));
        self.unary(Op::Sqrt(self.idx), v)
    }

    pub fn abs(&self) -> Tensor {
        let v = self.with_value(|a| a.map(f64::abs));
        self.unary(Op::Abs(self.idx), v)
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let v = self.with_value(|a| Matrix::from_vec(1, 1, vec![a.data.iter().sum()]));
        self.unary(Op::Sum(self.idx), v)
    }

    pub fn mean(&self) -> Tensor {
        let n = (self.rows * self.cols) as f64;
        let v = self.with_value(|a| Matrix::from_vec(1, 1, vec![a.data.iter().sum::<f64>() / n]));
        self.unary(Op::Mean(self.idx), v)
    }

    /// Sum along each row: `m×n → m×1`.
    pub fn row_sums(&self) -> Tensor {
        let v = self.with_value(|a| {
            let mut out = Matrix::zeros(a.rows, 1);
            for r in 0..a.rows {
                out.data[r] = a.row(r).iter().sum();
            }
            out
        });
        self.unary(Op::RowSums(self.idx), v)
    }

    // ---- row-structured primitives ----

    /// Softmax of `scale · x` within each row, max-subtracted for
    /// stability.
    pub fn row_softmax(&self, scale: f64) -> Tensor {
        assert!(scale > 0.0, "row_softmax scale must be positive");
        let v = self.with_value(|a| {
            let mut out = a.clone();
            for r in 0..out.rows {
                softmax_slice(out.row_mut(r), scale);
            }
            out
        });
        self.unary(Op::RowSoftmax(self.idx, scale), v)
    }

    /// Softmax within contiguous row segments of an `E×1` column.
    /// `segments` are disjoint `(start, end)` ranges covering the rows.
    pub fn segment_softmax(&self, segments: &[(usize, usize)]) -> Tensor {
        assert_eq!(self.cols, 1, "segment_softmax expects a column vector");
        let v = self.with_value(|a| {
            let mut out = a.clone();
            for &(s, e) in segments {
                softmax_slice(&mut out.data[s..e], 1.0);
            }
            out
        });
        self.unary(Op::SegmentSoftmax(self.idx, segments.to_vec()), v)
    }

    /// `log Σ_j exp(x_rj)` per row, max-subtracted: `m×n → m×1`.
    pub fn row_logsumexp(&self) -> Tensor {
        let v = self.with_value(|a| {
            let mut out = Matrix::zeros(a.rows, 1);
            for r in 0..a.rows {
                let row = a.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                out.data[r] = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            }
            out
        });
        self.unary(Op::RowLogSumExp(self.idx), v)
    }

    /// L2-normalize each row; rows with norm below `1e-12` become zero
    /// rows and receive zero gradient.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let v = self.with_value(|a| a.l2_normalize_rows());
        self.unary(Op::L2NormalizeRows(self.idx), v)
    }

    /// Per-row standardization (biased variance) then affine scale/shift.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        assert!(gain.rows == 1 && gain.cols == self.cols, "layer_norm gain shape");
        assert!(bias.rows == 1 && bias.cols == self.cols, "layer_norm bias shape");
        assert!(
            self.tape.same_tape(&gain.tape) && self.tape.same_tape(&bias.tape),
            "layer_norm operands across tapes"
        );
        let v = self.with_value(|x| {
            gain.with_value(|g| {
                bias.with_value(|b| {
                    let mut out = x.clone();
                    let n = x.cols as f64;
                    for r in 0..x.rows {
                        let row = out.row_mut(r);
                        let mu = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = (*v - mu) * inv * g.data[j] + b.data[j];
                        }
                    }
                    out
                })
            })
        });
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.push(Op::LayerNorm(self.idx, gain.idx, bias.idx, eps), v, rg)
    }

    /// Inverted-scaling dropout. Eval mode and rate 0 are identities.
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut impl Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if !train || rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.rows * self.cols)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let v = self.with_value(|a| {
            Matrix::from_vec(
                a.rows,
                a.cols,
                a.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
            )
        });
        self.unary(Op::Dropout(self.idx, mask), v)
    }

    // ---- determinant ----

    /// Determinant of each 4×4 block of a `4B×4` input, by cofactor
    /// expansion: `4B×4 → B×1`. Gradient flows through the adjugate,
    /// valid for singular blocks too.
    pub fn det4_blocks(&self) -> Tensor {
        assert_eq!(self.cols, 4, "det4 expects 4 columns");
        assert_eq!(self.rows % 4, 0, "det4 expects row count divisible by 4");
        let v = self.with_value(|a| {
            let b = a.rows / 4;
            let mut out = Matrix::zeros(b, 1);
            for i in 0..b {
                out.data[i] = det4(&a.data[i * 16..(i + 1) * 16]);
            }
            out
        });
        self.unary(Op::Det4Block(self.idx), v)
    }

    /// Determinant of a single 4×4 matrix.
    pub fn det4(&self) -> Tensor {
        assert!(self.rows == 4 && self.cols == 4, "det4 expects a 4x4 input");
        self.det4_blocks()
    }

    /// Block-wise `A_b · B_bᵀ` over `k`-row blocks of two `kB×p`
    /// matrices, giving `kB×k`.
    pub fn block_matmul_nt(&self, other: &Tensor, k: usize) -> Tensor {
        assert_eq!(self.cols, other.cols, "block_matmul_nt inner dim mismatch");
        assert_eq!(self.rows, other.rows, "block_matmul_nt row mismatch");
        assert_eq!(self.rows % k, 0, "block size must divide rows");
        let v = self.with_value(|a| {
            other.with_value(|b| {
                let blocks = a.rows / k;
                let p = a.cols;
                let mut out = Matrix::zeros(a.rows, k);
                for bi in 0..blocks {
                    for i in 0..k {
                        for j in 0..k {
                            let ra = a.row(bi * k + i);
                            let rb = b.row(bi * k + j);
                            let mut s = 0.0;
                            for t in 0..p {
                                s += ra[t] * rb[t];
                            }
                            out.data[(bi * k + i) * k + j] = s;
                        }
                    }
                }
                out
            })
        });
        self.binary(other, Op::BlockMatMulNT(self.idx, other.idx, k), v)
    }

    /// Block-wise `S_b · V_b` where `S` is `kB×k` and `V` is `kB×p`,
    /// giving `kB×p`.
    pub fn block_matmul_nn(&self, other: &Tensor, k: usize) -> Tensor {
        assert_eq!(self.cols, k, "block_matmul_nn score width mismatch");
        assert_eq!(self.rows, other.rows, "block_matmul_nn row mismatch");
        assert_eq!(self.rows % k, 0, "block size must divide rows");
        let v = self.with_value(|s| {
            other.with_value(|vm| {
                let blocks = s.rows / k;
                let p = vm.cols;
                let mut out = Matrix::zeros(s.rows, p);
                for bi in 0..blocks {
                    for i in 0..k {
                        let orow = &mut out.data[(bi * k + i) * p..(bi * k + i + 1) * p];
                        for j in 0..k {
                            let w = s.data[(bi * k + i) * k + j];
                            let vrow = vm.row(bi * k + j);
                            for t in 0..p {
                                orow[t] += w * vrow[t];
                            }
                        }
                    }
                }
                out
            })
        });
        self.binary(other, Op::BlockMatMulNN(self.idx, other.idx, k), v)
    }

    // ---- reverse pass ----

    /// Reverse pass from a scalar loss. Repeated calls accumulate.
    pub fn backward(&self) {
        assert!(
            self.rows == 1 && self.cols == 1,
            "backward requires a scalar loss, got {}x{}",
            self.rows,
            self.cols
        );
        let mut inner = self.tape.inner.borrow_mut();
        ops::run_backward(&mut inner, self.idx);
    }
}

pub(crate) fn softmax_slice(xs: &mut [f64], scale: f64) {
    let m = xs.iter().map(|x| x * scale).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x * scale - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Cofactor-expansion determinant of a row-major 4×4 slice.
pub(crate) fn det4(g: &[f64]) -> f64 {
    debug_assert_eq!(g.len(), 16);
    let mut det = 0.0;
    for c in 0..4 {
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * g[c] * minor3(g, 0, c);
    }
    det
}

/// Determinant of the 3×3 minor obtained by deleting row `dr` and
/// column `dc` of a 4×4 matrix.
pub(crate) fn minor3(g: &[f64], dr: usize, dc: usize) -> f64 {
    let mut m = [0.0f64; 9];
    let mut k = 0;
    for r in 0..4 {
        if r == dr {
            continue;
        }
        for c in 0..4 {
            if c == dc {
                continue;
            }
            m[k] = g[r * 4 + c];
            k += 1;
        }
    }
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

#[cfg(test)]
mod tests;
