use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::max_param_rel_err;
use crate::matrix::{Matrix, SparseSym};
use crate::tensor::Tape;

use std::rc::Rc;

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::uniform(rows, cols, -1.0, 1.0, &mut rng)
}

/// Determinant by LU with partial pivoting; independent of the
/// cofactor-expansion path used by `det4`.
fn lu_det(m: &Matrix) -> f64 {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let mut a = m.data.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return 0.0;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            det = -det;
        }
        det *= a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
        }
    }
    det
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let x = tape.constant(rand_matrix(3, 3, 1));
    let id = tape.constant(Matrix::identity(3));
    assert!(id.matmul(&x).value().max_abs_diff(&x.value()) < 1e-15);

    // 2x2 numeric case vs triple-loop oracle
    let a = rand_matrix(2, 2, 2);
    let b = rand_matrix(2, 2, 3);
    let mut want = Matrix::zeros(2, 2);
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                want.data[i * 2 + j] += a.get(i, k) * b.get(k, j);
            }
        }
    }
    let got = tape.constant(a).matmul(&tape.constant(b)).value();
    assert!(got.max_abs_diff(&want) < 1e-14);
}

#[test]
fn row_softmax_examples() {
    let tape = Tape::new();
    let constant = tape.constant(Matrix::filled(1, 4, 3.7));
    let y = constant.row_softmax(1.0).value();
    for v in &y.data {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let x = tape.constant(Matrix::from_vec(1, 2, vec![0.0, 3.0f64.ln()]));
    let y = x.row_softmax(1.0).value();
    assert!((y.data[0] - 0.25).abs() < 1e-12);
    assert!((y.data[1] - 0.75).abs() < 1e-12);

    let r = tape.constant(rand_matrix(5, 7, 4)).row_softmax(2.0).value();
    for i in 0..5 {
        let s: f64 = r.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn det4_examples_and_lu_oracle() {
    let tape = Tape::new();
    let id = tape.constant(Matrix::identity(4));
    assert!((id.det4().scalar_value() - 1.0).abs() < 1e-15);

    let mut d = Matrix::zeros(4, 4);
    for (i, v) in [2.0, 3.0, 4.0, 5.0].iter().enumerate() {
        d.set(i, i, *v);
    }
    assert!((tape.constant(d).det4().scalar_value() - 120.0).abs() < 1e-12);

    for seed in 0..20 {
        let m = rand_matrix(4, 4, 100 + seed);
        let want = lu_det(&m);
        let got = tape.constant(m).det4().scalar_value();
        let denom = want.abs().max(got.abs()).max(1e-10);
        assert!(
            (want - got).abs() / denom < 1e-10,
            "det mismatch: {got} vs {want}"
        );
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let gain = tape.constant(Matrix::filled(1, 2, 1.0));
    let bias = tape.constant(Matrix::zeros(1, 2));

    let constant = tape.constant(Matrix::filled(1, 2, 5.0));
    let y = constant.layer_norm(&gain, &bias, 1e-6).value();
    for v in &y.data {
        assert!(v.abs() < 1e-6);
    }

    let x = tape.constant(Matrix::from_vec(1, 2, vec![1.0, 3.0]));
    let y = x.layer_norm(&gain, &bias, 1e-6).value();
    assert!((y.data[0] + 1.0).abs() < 1e-6);
    assert!((y.data[1] - 1.0).abs() < 1e-6);

    // centered output for gain=1, bias=0
    let gain4 = tape.constant(Matrix::filled(1, 8, 1.0));
    let bias4 = tape.constant(Matrix::zeros(1, 8));
    let r = tape
        .constant(rand_matrix(3, 8, 5))
        .layer_norm(&gain4, &bias4, 1e-6)
        .value();
    for i in 0..3 {
        let mean: f64 = r.row(i).iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn dropout_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::new();
    let x = tape.constant(rand_matrix(4, 4, 6));

    let same = x.dropout(0.0, true, &mut rng);
    assert!(same.value().max_abs_diff(&x.value()) < 1e-15);
    let same = x.dropout(0.5, false, &mut rng);
    assert!(same.value().max_abs_diff(&x.value()) < 1e-15);

    // train-mode expectation over many seeded draws
    let input = Matrix::filled(2, 5, 1.0);
    let mut acc = Matrix::zeros(2, 5);
    let draws = 10_000;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tape::new();
        let x = t.constant(input.clone());
        acc.add_assign(&x.dropout(0.3, true, &mut rng).value());
    }
    for v in &acc.data {
        let mean = v / draws as f64;
        assert!((mean - 1.0).abs() < 0.02, "dropout mean {mean}");
    }
}

#[test]
fn dropout_deterministic_under_seed() {
    let input = rand_matrix(3, 3, 7);
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tape::new();
        t.constant(input.clone()).dropout(0.4, true, &mut rng).value()
    };
    assert!(run(3).max_abs_diff(&run(3)) < 1e-15);
    assert!(run(3).max_abs_diff(&run(4)) > 0.0);
}

#[test]
fn backward_basic_identities() {
    // loss = sum(W) -> grad all ones
    let tape = Tape::new();
    let w = tape.param(rand_matrix(3, 4, 8));
    w.sum().backward();
    assert!(w.grad().unwrap().max_abs_diff(&Matrix::filled(3, 4, 1.0)) < 1e-15);

    // loss = ||W||^2 -> grad 2W
    let tape = Tape::new();
    let wv = rand_matrix(3, 4, 9);
    let w = tape.param(wv.clone());
    w.hadamard(&w).sum().backward();
    assert!(w.grad().unwrap().max_abs_diff(&wv.scale(2.0)) < 1e-14);
}

#[test]
fn repeated_backward_accumulates() {
    let tape = Tape::new();
    let w = tape.param(rand_matrix(2, 2, 10));
    let loss = w.sum();
    loss.backward();
    loss.backward();
    assert!(w.grad().unwrap().max_abs_diff(&Matrix::filled(2, 2, 2.0)) < 1e-15);
}

#[test]
fn reverse_pass_visits_each_node_once() {
    let tape = Tape::new();
    let w = tape.param(rand_matrix(2, 2, 12));
    let loss = w.relu().tanh().hadamard(&w).sum();
    loss.backward();
    for &v in &tape.visit_counts() {
        assert!(v <= 1, "node visited {v} times");
    }
}

#[test]
#[should_panic(expected = "scalar loss")]
fn non_scalar_backward_is_rejected() {
    let tape = Tape::new();
    let w = tape.param(rand_matrix(2, 2, 13));
    w.relu().backward();
}

#[test]
#[should_panic(expected = "contract floor")]
fn sqrt_gradient_at_zero_is_a_contract_error() {
    let tape = Tape::new();
    let w = tape.param(Matrix::from_vec(1, 1, vec![0.0]));
    w.sqrt().sum().backward();
}

#[test]
#[should_panic(expected = "matmul shape mismatch")]
fn matmul_shape_mismatch_panics() {
    let tape = Tape::new();
    let a = tape.constant(rand_matrix(2, 3, 14));
    let b = tape.constant(rand_matrix(2, 3, 15));
    a.matmul(&b);
}

/// Finite-difference sweep over every differentiable primitive.
/// 25 probes per parameter, h = 1e-5, relative error < 1e-5.
#[test]
fn every_primitive_passes_finite_differences() {
    const PROBES: usize = 25;
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-5;

    let mut seed_rng = ChaCha8Rng::seed_from_u64(42);
    let mut check = |name: &str, params: Vec<Matrix>, build: &mut crate::gradcheck::LossBuilder| {
        let err = max_param_rel_err(&params, build, PROBES, H, seed_rng.gen());
        assert!(err < TOL, "{name}: rel err {err}");
    };

    let probe = rand_matrix(4, 3, 20);

    check("matmul", vec![rand_matrix(4, 5, 21), rand_matrix(5, 3, 22)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].matmul(&p[1]).hadamard(&c).sum()
    });
    check("add", vec![rand_matrix(4, 3, 23), rand_matrix(4, 3, 24)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].add(&p[1]).hadamard(&c).sum()
    });
    check("add_row_broadcast", vec![rand_matrix(4, 3, 25), rand_matrix(1, 3, 26)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].add_row_broadcast(&p[1]).hadamard(&c).sum()
    });
    check("sub", vec![rand_matrix(4, 3, 27), rand_matrix(4, 3, 28)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].sub(&p[1]).hadamard(&c).sum()
    });
    check("hadamard", vec![rand_matrix(4, 3, 29), rand_matrix(4, 3, 30)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].hadamard(&p[1]).hadamard(&c).sum()
    });
    check("mul_col_broadcast", vec![rand_matrix(4, 3, 31), rand_matrix(4, 1, 32)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].mul_col_broadcast(&p[1]).hadamard(&c).sum()
    });
    check("mul_scalar_tensor", vec![rand_matrix(4, 3, 33), rand_matrix(1, 1, 34)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].mul_scalar_tensor(&p[1]).hadamard(&c).sum()
    });
    check("scale", vec![rand_matrix(4, 3, 35)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].scale(-1.7).hadamard(&c).sum()
    });
    check("add_scalar", vec![rand_matrix(4, 3, 36)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].add_scalar(0.3).hadamard(&c).sum()
    });
    check("transpose", vec![rand_matrix(4, 3, 37)], &mut |t, p| {
        let c = t.constant(probe.transpose());
        p[0].transpose().hadamard(&c).sum()
    });
    check("reshape", vec![rand_matrix(4, 3, 38)], &mut |t, p| {
        let c = t.constant(rand_matrix(2, 6, 39));
        p[0].reshape(2, 6).hadamard(&c).sum()
    });
    check("concat_rows", vec![rand_matrix(2, 3, 40), rand_matrix(3, 3, 41)], &mut |t, p| {
        let c = t.constant(rand_matrix(5, 3, 42));
        crate::tensor::Tensor::concat_rows(&[p[0].clone(), p[1].clone()])
            .hadamard(&c)
            .sum()
    });
    check("concat_cols", vec![rand_matrix(4, 2, 43), rand_matrix(4, 3, 44)], &mut |t, p| {
        let c = t.constant(rand_matrix(4, 5, 45));
        crate::tensor::Tensor::concat_cols(&[p[0].clone(), p[1].clone()])
            .hadamard(&c)
            .sum()
    });
    check("gather_rows", vec![rand_matrix(5, 3, 46)], &mut |t, p| {
        let c = t.constant(rand_matrix(4, 3, 47));
        p[0].gather_rows(&[0, 2, 2, 4]).hadamard(&c).sum()
    });
    check("scatter_add_rows", vec![rand_matrix(4, 3, 48)], &mut |t, p| {
        let c = t.constant(rand_matrix(3, 3, 49));
        p[0].scatter_add_rows(&[0, 2, 0, 1], 3).hadamard(&c).sum()
    });
    check("relu", vec![rand_matrix(4, 3, 50)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].relu().hadamard(&c).sum()
    });
    check("leaky_relu", vec![rand_matrix(4, 3, 51)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].leaky_relu(0.2).hadamard(&c).sum()
    });
    check("tanh", vec![rand_matrix(4, 3, 52)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].tanh().hadamard(&c).sum()
    });
    check("exp", vec![rand_matrix(4, 3, 53)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].exp().hadamard(&c).sum()
    });
    check("log", vec![rand_matrix(4, 3, 54).map(|x| x.abs() + 0.5)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].log().hadamard(&c).sum()
    });
    check("sqrt", vec![rand_matrix(4, 3, 55).map(|x| x.abs() + 0.5)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].sqrt().hadamard(&c).sum()
    });
    check("abs", vec![rand_matrix(4, 3, 56)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].abs().hadamard(&c).sum()
    });
    check("sum", vec![rand_matrix(4, 3, 57)], &mut |_t, p| p[0].sum());
    check("mean", vec![rand_matrix(4, 3, 58)], &mut |_t, p| p[0].mean());
    check("row_sums", vec![rand_matrix(4, 3, 59)], &mut |t, p| {
        let c = t.constant(rand_matrix(4, 1, 60));
        p[0].row_sums().hadamard(&c).sum()
    });
    check("row_softmax", vec![rand_matrix(4, 3, 61)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].row_softmax(1.3).hadamard(&c).sum()
    });
    check("segment_softmax", vec![rand_matrix(6, 1, 62)], &mut |t, p| {
        let c = t.constant(rand_matrix(6, 1, 63));
        p[0].segment_softmax(&[(0, 2), (2, 5), (5, 6)]).hadamard(&c).sum()
    });
    check("row_logsumexp", vec![rand_matrix(4, 3, 64)], &mut |t, p| {
        let c = t.constant(rand_matrix(4, 1, 65));
        p[0].row_logsumexp().hadamard(&c).sum()
    });
    check("l2_normalize_rows", vec![rand_matrix(4, 3, 66)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].l2_normalize_rows().hadamard(&c).sum()
    });
    check(
        "layer_norm",
        vec![rand_matrix(4, 3, 67), rand_matrix(1, 3, 68), rand_matrix(1, 3, 69)],
        &mut |t, p| {
            let c = t.constant(probe.clone());
            p[0].layer_norm(&p[1], &p[2], 1e-6).hadamard(&c).sum()
        },
    );
    check("dropout", vec![rand_matrix(4, 3, 70)], &mut |t, p| {
        let c = t.constant(probe.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        p[0].dropout(0.3, true, &mut rng).hadamard(&c).sum()
    });
    check("det4", vec![rand_matrix(4, 4, 71)], &mut |_t, p| p[0].det4());
    check("det4_blocks", vec![rand_matrix(8, 4, 72)], &mut |t, p| {
        let c = t.constant(rand_matrix(2, 1, 73));
        p[0].det4_blocks().hadamard(&c).sum()
    });
    check(
        "block_matmul_nt",
        vec![rand_matrix(6, 4, 74), rand_matrix(6, 4, 75)],
        &mut |t, p| {
            let c = t.constant(rand_matrix(6, 3, 76));
            p[0].block_matmul_nt(&p[1], 3).hadamard(&c).sum()
        },
    );
    check(
        "block_matmul_nn",
        vec![rand_matrix(6, 3, 77), rand_matrix(6, 4, 78)],
        &mut |t, p| {
            let c = t.constant(rand_matrix(6, 4, 79));
            p[0].block_matmul_nn(&p[1], 3).hadamard(&c).sum()
        },
    );
    let adj = Rc::new(SparseSym::from_triplets(
        4,
        vec![
            (0, 0, 0.5),
            (1, 1, 0.5),
            (2, 2, 1.0),
            (3, 3, 1.0),
            (0, 1, 0.25),
            (1, 0, 0.25),
        ],
    ));
    check("sparse_lmul", vec![rand_matrix(4, 3, 80)], &mut |t, p| {
        let c = t.constant(probe.clone());
        p[0].sparse_lmul(&adj).hadamard(&c).sum()
    });
}

#[test]
fn block_matmuls_match_per_block_dense() {
    let a = rand_matrix(8, 5, 90);
    let b = rand_matrix(8, 5, 91);
    let tape = Tape::new();
    let nt = tape
        .constant(a.clone())
        .block_matmul_nt(&tape.constant(b.clone()), 4)
        .value();
    for blk in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let want: f64 = (0..5)
                    .map(|t| a.get(blk * 4 + i, t) * b.get(blk * 4 + j, t))
                    .sum();
                assert!((nt.get(blk * 4 + i, j) - want).abs() < 1e-12);
            }
        }
    }
}
