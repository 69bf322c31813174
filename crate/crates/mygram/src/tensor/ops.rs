//! Primitive operation records and the reverse pass.

use std::rc::Rc;

use crate::matrix::{Matrix, SparseSym};

use super::{minor3, Node, TapeInner};

/// One recorded primitive. Indices refer to earlier tape positions.
#[derive(Clone)]
pub enum Op {
    Leaf,
    MatMul(usize, usize),
    SparseLMul(Rc<SparseSym>, usize),
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    MulColBroadcast(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    RowSoftmax(usize, f64),
    SegmentSoftmax(usize, Vec<(usize, usize)>),
    RowLogSumExp(usize),
    L2NormalizeRows(usize),
    LayerNorm(usize, usize, usize, f64),
    Dropout(usize, Vec<f64>),
    Det4Block(usize),
    BlockMatMulNT(usize, usize, usize),
    BlockMatMulNN(usize, usize, usize),
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
    if !nodes[idx].requires_grad {
        return;
    }
    match grads[idx].as_mut() {
        Some(g) => g.add_assign(&delta),
        None => grads[idx] = Some(delta),
    }
}

pub(crate) fn run_backward(inner: &mut TapeInner, loss_idx: usize) {
    // each pass propagates through a fresh buffer so repeated calls
    // accumulate per-pass gradients instead of compounding them
    let mut grads: Vec<Option<Matrix>> = vec![None; inner.nodes.len()];
    grads[loss_idx] = Some(Matrix::from_vec(1, 1, vec![1.0]));
    for idx in (0..=loss_idx).rev() {
        if !inner.nodes[idx].requires_grad || grads[idx].is_none() {
            continue;
        }
        inner.nodes[idx].visits += 1;
        let gout = grads[idx].clone().unwrap();
        let op = inner.nodes[idx].op.clone();
        propagate(&inner.nodes, &mut grads, idx, &op, &gout);
    }
    for (node, g) in inner.nodes.iter_mut().zip(grads) {
        if let (true, Some(g)) = (node.requires_grad, g) {
            match node.grad.as_mut() {
                Some(pg) => pg.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Matrix>], out_idx: usize, op: &Op, g: &Matrix) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                let da = g.matmul_nt(&nodes[*b].value);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = nodes[*a].value.matmul_tn(g);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::SparseLMul(adj, h) => {
            if nodes[*h].requires_grad {
                // adjacency is symmetric, so Aᵀg = Ag
                let dh = adj.matmul_dense(g);
                accumulate(nodes, grads, *h, dh);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddRowBroadcast(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*b].requires_grad {
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Hadamard(a, b) => {
            if nodes[*a].requires_grad {
                let da = g.zip(&nodes[*b].value, |x, y| x * y);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = g.zip(&nodes[*a].value, |x, y| x * y);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::MulColBroadcast(a, b) => {
            if nodes[*a].requires_grad {
                let col = &nodes[*b].value;
                let mut da = g.clone();
                for r in 0..da.rows {
                    let s = col.data[r];
                    for x in da.row_mut(r) {
                        *x *= s;
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let av = &nodes[*a].value;
                let mut db = Matrix::zeros(g.rows, 1);
                for r in 0..g.rows {
                    db.data[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::MulScalar(a, s) => {
            if nodes[*a].requires_grad {
                let sv = nodes[*s].value.data[0];
                accumulate(nodes, grads, *a, g.scale(sv));
            }
            if nodes[*s].requires_grad {
                let av = &nodes[*a].value;
                let ds = g.data.iter().zip(av.data.iter()).map(|(x, y)| x * y).sum();
                accumulate(nodes, grads, *s, Matrix::from_vec(1, 1, vec![ds]));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Reshape(a) => {
            let (r, c) = (nodes[*a].value.rows, nodes[*a].value.cols);
            accumulate(nodes, grads, *a, Matrix::from_vec(r, c, g.data.clone()));
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let rows = nodes[p].value.rows;
                if nodes[p].requires_grad {
                    let dp = Matrix::from_vec(
                        rows,
                        g.cols,
                        g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                    );
                    accumulate(nodes, grads, p, dp);
                }
                start += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = nodes[p].value.cols;
                if nodes[p].requires_grad {
                    let mut dp = Matrix::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        dp.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(nodes, grads, p, dp);
                }
                offset += cols;
            }
        }
        Op::GatherRows(a, indices) => {
            if nodes[*a].requires_grad {
                let (rows, cols) = (nodes[*a].value.rows, nodes[*a].value.cols);
                let mut da = Matrix::zeros(rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, x) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::ScatterAddRows(a, targets) => {
            if nodes[*a].requires_grad {
                let cols = g.cols;
                let mut da = Matrix::zeros(targets.len(), cols);
                for (r, &t) in targets.iter().enumerate() {
                    da.row_mut(r).copy_from_slice(g.row(t));
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Relu(a) => {
            if nodes[*a].requires_grad {
                let da = g.zip(&nodes[*a].value, |gx, x| if x > 0.0 { gx } else { 0.0 });
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::LeakyRelu(a, slope) => {
            if nodes[*a].requires_grad {
                let s = *slope;
                let da = g.zip(&nodes[*a].value, |gx, x| if x > 0.0 { gx } else { s * gx });
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Tanh(a) => {
            if nodes[*a].requires_grad {
                let da = g.zip(&nodes[out_idx].value, |gx, y| gx * (1.0 - y * y));
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Exp(a) => {
            if nodes[*a].requires_grad {
                let da = g.zip(&nodes[out_idx].value, |gx, y| gx * y);
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Log(a) => {
            if nodes[*a].requires_grad {
                let da = g.zip(&nodes[*a].value, |gx, x| gx / x);
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Sqrt(a) => {
            if nodes[*a].requires_grad {
                let min_in = nodes[*a]
                    .value
                    .data
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    min_in >= 1e-12,
                    "sqrt gradient requested at input {min_in:e} below the 1e-12 contract floor"
                );
                let da = g.zip(&nodes[out_idx].value, |gx, y| gx / (2.0 * y));
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Abs(a) => {
            if nodes[*a].requires_grad {
                let da = g.zip(&nodes[*a].value, |gx, x| gx * sign(x));
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Sum(a) => {
            if nodes[*a].requires_grad {
                let (r, c) = (nodes[*a].value.rows, nodes[*a].value.cols);
                accumulate(nodes, grads, *a, Matrix::filled(r, c, g.data[0]));
            }
        }
        Op::Mean(a) => {
            if nodes[*a].requires_grad {
                let (r, c) = (nodes[*a].value.rows, nodes[*a].value.cols);
                accumulate(nodes, grads, *a, Matrix::filled(r, c, g.data[0] / (r * c) as f64));
            }
        }
        Op::RowSums(a) => {
            if nodes[*a].requires_grad {
                let (r, c) = (nodes[*a].value.rows, nodes[*a].value.cols);
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data[i];
                    for x in da.row_mut(i) {
                        *x = gi;
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::RowSoftmax(a, scale) => {
            if nodes[*a].requires_grad {
                let y = &nodes[out_idx].value;
                let mut da = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..y.cols {
                        da.data[r * y.cols + j] = scale * yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::SegmentSoftmax(a, segments) => {
            if nodes[*a].requires_grad {
                let y = &nodes[out_idx].value;
                let mut da = Matrix::zeros(y.rows, 1);
                for &(s, e) in segments {
                    let dot: f64 = (s..e).map(|i| y.data[i] * g.data[i]).sum();
                    for i in s..e {
                        da.data[i] = y.data[i] * (g.data[i] - dot);
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::RowLogSumExp(a) => {
            if nodes[*a].requires_grad {
                let x = &nodes[*a].value;
                let y = &nodes[out_idx].value;
                let mut da = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let gr = g.data[r];
                    let lse = y.data[r];
                    for j in 0..x.cols {
                        da.data[r * x.cols + j] = gr * (x.data[r * x.cols + j] - lse).exp();
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::L2NormalizeRows(a) => {
            if nodes[*a].requires_grad {
                let x = &nodes[*a].value;
                let y = &nodes[out_idx].value;
                let mut da = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..x.cols {
                        da.data[r * x.cols + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::LayerNorm(x_id, gain_id, bias_id, eps) => {
            let x = nodes[*x_id].value.clone();
            let gain = nodes[*gain_id].value.clone();
            let n = x.cols as f64;
            // recompute per-row statistics
            let mut xhat = Matrix::zeros(x.rows, x.cols);
            let mut inv_std = vec![0.0; x.rows];
            for r in 0..x.rows {
                let row = x.row(r);
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..x.cols {
                    xhat.data[r * x.cols + j] = (row[j] - mu) * inv;
                }
            }
            if nodes[*gain_id].requires_grad {
                let mut dg = Matrix::zeros(1, x.cols);
                for r in 0..x.rows {
                    for j in 0..x.cols {
                        dg.data[j] += g.data[r * x.cols + j] * xhat.data[r * x.cols + j];
                    }
                }
                accumulate(nodes, grads, *gain_id, dg);
            }
            if nodes[*bias_id].requires_grad {
                let mut db = Matrix::zeros(1, x.cols);
                for r in 0..x.rows {
                    for j in 0..x.cols {
                        db.data[j] += g.data[r * x.cols + j];
                    }
                }
                accumulate(nodes, grads, *bias_id, db);
            }
            if nodes[*x_id].requires_grad {
                let mut dx = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..x.cols {
                        let dxhat = g.data[r * x.cols + j] * gain.data[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat.data[r * x.cols + j];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for j in 0..x.cols {
                        let dxhat = g.data[r * x.cols + j] * gain.data[j];
                        dx.data[r * x.cols + j] = inv_std[r]
                            * (dxhat - mean_dxhat - xhat.data[r * x.cols + j] * mean_dxhat_xhat);
                    }
                }
                accumulate(nodes, grads, *x_id, dx);
            }
        }
        Op::Dropout(a, mask) => {
            if nodes[*a].requires_grad {
                let da = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
                );
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::Det4Block(a) => {
            if nodes[*a].requires_grad {
                let x = &nodes[*a].value;
                let blocks = x.rows / 4;
                let mut da = Matrix::zeros(x.rows, 4);
                for b in 0..blocks {
                    let blk = &x.data[b * 16..(b + 1) * 16];
                    let gb = g.data[b];
                    // d det / d g_rc = cofactor(r, c)
                    for r in 0..4 {
                        for c in 0..4 {
                            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                            da.data[b * 16 + r * 4 + c] = gb * sign * minor3(blk, r, c);
                        }
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
        }
        Op::BlockMatMulNT(a, b, k) => {
            let k = *k;
            let blocks = g.rows / k;
            let p = nodes[*a].value.cols;
            if nodes[*a].requires_grad {
                let bv = &nodes[*b].value;
                let mut da = Matrix::zeros(g.rows, p);
                for bi in 0..blocks {
                    for i in 0..k {
                        let drow = &mut da.data[(bi * k + i) * p..(bi * k + i + 1) * p];
                        for j in 0..k {
                            let w = g.data[(bi * k + i) * k + j];
                            let brow = bv.row(bi * k + j);
                            for t in 0..p {
                                drow[t] += w * brow[t];
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let av = &nodes[*a].value;
                let mut db = Matrix::zeros(g.rows, p);
                for bi in 0..blocks {
                    for j in 0..k {
                        let drow = &mut db.data[(bi * k + j) * p..(bi * k + j + 1) * p];
                        for i in 0..k {
                            let w = g.data[(bi * k + i) * k + j];
                            let arow = av.row(bi * k + i);
                            for t in 0..p {
                                drow[t] += w * arow[t];
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::BlockMatMulNN(s, v, k) => {
            let k = *k;
            let blocks = g.rows / k;
            let p = g.cols;
            if nodes[*s].requires_grad {
                let vv = &nodes[*v].value;
                let mut ds = Matrix::zeros(g.rows, k);
                for bi in 0..blocks {
                    for i in 0..k {
                        let grow = g.row(bi * k + i);
                        for j in 0..k {
                            let vrow = vv.row(bi * k + j);
                            let mut acc = 0.0;
                            for t in 0..p {
                                acc += grow[t] * vrow[t];
                            }
                            ds.data[(bi * k + i) * k + j] = acc;
                        }
                    }
                }
                accumulate(nodes, grads, *s, ds);
            }
            if nodes[*v].requires_grad {
                let sv = &nodes[*s].value;
                let mut dv = Matrix::zeros(g.rows, p);
                for bi in 0..blocks {
                    for j in 0..k {
                        let drow = &mut dv.data[(bi * k + j) * p..(bi * k + j + 1) * p];
                        for i in 0..k {
                            let w = sv.data[(bi * k + i) * k + j];
                            let grow = g.row(bi * k + i);
                            for t in 0..p {
                                drow[t] += w * grow[t];
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *v, dv);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
