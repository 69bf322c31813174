//! Runtime self-checks behind the `check` subcommand: the oracle,
//! identity, and gradient invariants that must hold on every machine
//! the binary runs on.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{diffuse, gamma, DiffusionConfig};
use crate::gradcheck::max_param_rel_err;
use crate::kgdata::{build_adjacency, dense_normalized_adjacency, generate_synthetic, MultiModalKG, SynthSpec};
use crate::matrix::{singular_values, Matrix, SparseSym};
use crate::objective::{gram_loss, gram_volume, infonce_loss, GramBatch, LossConfig};
use crate::tensor::Tape;

use super::config::{FusionConfig, TrainConfig};
use super::{train, PreparedData, Variant};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

/// Run all self-checks; the process should exit nonzero iff any fail.
pub fn run_self_checks() -> Vec<CheckResult> {
    vec![
        check_gram_volume_oracle(),
        check_hadamard_bound(),
        check_gradient_suite(),
        check_diffusion_identities(),
        check_adjacency(),
        check_loss_fixtures(),
    ]
}

/// √|det(mᵀm)| against the product of singular values on 1,000 random
/// 16×4 matrices.
fn check_gram_volume_oracle() -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let tape = Tape::new();
    let mut max_rel: f64 = 0.0;
    for _ in 0..1000 {
        let m = Matrix::uniform(16, 4, -1.0, 1.0, &mut rng);
        let eps = 1e-8;
        let vol = gram_volume(&tape.constant(m.clone()), eps).scalar_value();
        let sv: f64 = singular_values(&m).iter().product();
        let rel = ((vol * vol - eps) - sv * sv).abs() / (sv * sv).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    let elapsed = start.elapsed().as_secs_f64();
    result(
        "gram volume vs SVD oracle",
        max_rel < 1e-8 && elapsed < 10.0,
        format!("max rel err {max_rel:.3e}, {elapsed:.2}s"),
    )
}

/// √ε ≤ Vol ≤ √(1+ε) for 10,000 column-normalized stacks.
fn check_hadamard_bound() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let tape = Tape::new();
    let eps: f64 = 1e-8;
    let (lo, hi) = (eps.sqrt(), (1.0 + eps).sqrt());
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let cols = Matrix::uniform(4, 8, -1.0, 1.0, &mut rng).l2_normalize_rows();
        let v = gram_volume(&tape.constant(cols.transpose()), eps).scalar_value();
        if v < lo - 1e-15 || v > hi + 1e-15 {
            violations += 1;
        }
    }
    result(
        "Hadamard volume bound",
        violations == 0,
        format!("{violations} violations in 10000 stacks"),
    )
}

/// Full-objective finite differences on a 12-entity noisy synthetic
/// batch, over every parameter.
fn check_gradient_suite() -> CheckResult {
    let spec = SynthSpec {
        entities: 12,
        relations: 3,
        triple_density: 2.0,
        attr_dim: 10,
        attr_active: 3,
        visual_dim: 6,
        edge_drop: 0.1,
        feature_noise_std: 0.05,
        duplicate_fraction: 0.0,
        train_ratio: 0.5,
    };
    let (kg1, kg2, seeds) = generate_synthetic(&spec, 103).unwrap();
    let data = PreparedData::new(kg1, kg2, seeds).unwrap();
    let cfg = TrainConfig {
        hidden_dim: 8,
        fusion: FusionConfig {
            heads: 2,
            ffn_dim: 16,
            ..Default::default()
        },
        diffusion: DiffusionConfig {
            k: 2,
            dropout: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    // init seed chosen away from leaky-relu / |det| kinks, where central
    // differences would report a spurious mismatch
    let mut rng = ChaCha8Rng::seed_from_u64(204);
    let template = super::ModelParams::init(&data.kg1, &data.kg2, &cfg, &mut rng);
    let names: Vec<String> = template.entries.iter().map(|(n, _)| n.clone()).collect();
    let mats: Vec<Matrix> = template.entries.iter().map(|(_, m)| m.clone()).collect();
    let pairs = data.seeds.train_pairs();
    let lefts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let rights: Vec<usize> = pairs.iter().map(|p| p.1).collect();

    let err = max_param_rel_err(
        &mats,
        &mut |_tape, ps| {
            let tensors: BTreeMap<String, crate::tensor::Tensor> = names
                .iter()
                .cloned()
                .zip(ps.iter().cloned())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = super::forward(&tensors, &data, &cfg, Variant::Full, false, &mut rng);
            super::batch_loss(&out, &lefts, &rights, &cfg.loss, true).total
        },
        4,
        1e-5,
        105,
    );
    result(
        "full-objective gradient suite",
        err < 1e-4,
        format!("max rel err {err:.3e} over {} parameters", names.len()),
    )
}

/// Â = I invariance, the 3-node-path polynomial oracle, and the
/// closed-form normalizer at the default coefficients.
fn check_diffusion_identities() -> CheckResult {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let identity = crate::kgdata::NormalizedAdjacency {
        dimension: 4,
        matrix: std::rc::Rc::new(SparseSym::identity(4)),
    };
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let cfg = DiffusionConfig {
            alpha: rng.gen_range(0.0..2.0),
            beta: rng.gen_range(0.0..1.5),
            k: 1 + i % 5,
            dropout: 0.0,
        };
        let h = Matrix::uniform(4, 3, -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let out = diffuse(&tape.constant(h.clone()), &identity, &cfg, false, &mut rng);
        worst = worst.max(out.value().max_abs_diff(&h));
    }
    let identity_ok = worst < 1e-12;

    let kg = MultiModalKG {
        entity_count: 3,
        relation_count: 1,
        triples: vec![(0, 0, 1), (1, 0, 2)],
        attr_features: Matrix::zeros(3, 0),
        rel_features: Matrix::zeros(3, 0),
        visual_features: Matrix::zeros(3, 0),
        visual_present: vec![false; 3],
    };
    let adj = build_adjacency(&kg);
    let cfg = DiffusionConfig {
        alpha: 0.4,
        beta: 0.6,
        k: 2,
        dropout: 0.0,
    };
    let h = Matrix::uniform(3, 5, -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let got = diffuse(&tape.constant(h.clone()), &adj, &cfg, false, &mut rng).value();
    let a = adj.matrix.to_dense();
    let poly = a
        .matmul(&a)
        .scale(cfg.beta * cfg.beta)
        .add(&a.scale(cfg.alpha * cfg.beta))
        .add(&Matrix::identity(3).scale(cfg.alpha))
        .scale(1.0 / gamma(&cfg));
    let path_err = got.max_abs_diff(&poly.matmul(&h));

    // direct summation: 0.9⁴ + 0.1·(1 + 0.9 + 0.81 + 0.729) = 1 exactly
    let g = gamma(&DiffusionConfig {
        alpha: 0.1,
        beta: 0.9,
        k: 4,
        dropout: 0.0,
    });
    let gamma_ok = (g - 1.0).abs() < 1e-12;

    result(
        "diffusion identities",
        identity_ok && path_err < 1e-10 && gamma_ok,
        format!("identity err {worst:.1e}, path err {path_err:.1e}, gamma(0.1,0.9,4) = {g}"),
    )
}

/// Sparse Â against dense D^{-1/2}(A+I)D^{-1/2} on 50 random graphs.
fn check_adjacency() -> CheckResult {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=100);
        let m = rng.gen_range(0..3 * n);
        let triples: Vec<_> = (0..m)
            .map(|_| (rng.gen_range(0..n), 0, rng.gen_range(0..n)))
            .collect();
        let kg = MultiModalKG {
            entity_count: n,
            relation_count: 1,
            triples,
            attr_features: Matrix::zeros(n, 0),
            rel_features: Matrix::zeros(n, 0),
            visual_features: Matrix::zeros(n, 0),
            visual_present: vec![false; n],
        };
        let sparse = build_adjacency(&kg).matrix.to_dense();
        worst = worst.max(sparse.max_abs_diff(&dense_normalized_adjacency(&kg)));
    }
    result(
        "normalized adjacency vs dense oracle",
        worst < 1e-12,
        format!("max entry err {worst:.3e} over 50 graphs"),
    )
}

/// Closed-form loss fixtures plus the λ = 0 ≡ InfoNCE-only equivalence.
fn check_loss_fixtures() -> CheckResult {
    // uniform volumes: every candidate identical ⇒ loss = ln K
    let tape = Tape::new();
    let d = 6;
    let n2 = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let row = Matrix::uniform(1, d, -1.0, 1.0, &mut rng);
    let tile = {
        let mut m = Matrix::zeros(n2, d);
        for r in 0..n2 {
            m.row_mut(r).copy_from_slice(row.row(0));
        }
        m
    };
    let batch = GramBatch {
        src_struct: tape.param(Matrix::uniform(2, d, -1.0, 1.0, &mut rng)),
        tgt_vis: tape.param(tile.clone()),
        tgt_attr: tape.param(tile.clone()),
        tgt_rel: tape.param(tile),
        topk_idx: vec![vec![0, 1, 2], vec![2, 3, 4]],
        target: vec![1, 3],
    };
    let gram = gram_loss(&batch, &LossConfig::default()).scalar_value();
    let gram_err = (gram - 3f64.ln()).abs();

    // uniform-similarity InfoNCE, both denominator conventions
    let mut flat = Matrix::zeros(2, 3);
    for r in 0..2 {
        flat.set(r, 0, 1.0);
    }
    let src = tape.param(flat.clone());
    let tgt = tape.param(flat);
    let include = infonce_loss(&src, &tgt, &LossConfig::default()).scalar_value();
    let exclude = infonce_loss(
        &src,
        &tgt,
        &LossConfig {
            include_positive: false,
            ..LossConfig::default()
        },
    )
    .scalar_value();
    let infonce_err = (include - 2f64.ln()).abs().max(exclude.abs());

    // λ = 0 training matches the Gram-free variant bit-for-bit
    let (kg1, kg2, seeds) = generate_synthetic(
        &SynthSpec {
            entities: 16,
            visual_dim: 6,
            attr_dim: 12,
            attr_active: 3,
            ..Default::default()
        },
        109,
    )
    .unwrap();
    let data = PreparedData::new(kg1, kg2, seeds).unwrap();
    let cfg = TrainConfig {
        hidden_dim: 6,
        epochs: 3,
        fusion: FusionConfig {
            heads: 2,
            ffn_dim: 8,
            ..Default::default()
        },
        loss: LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        },
        ..Default::default()
    };
    let a = train(&data, &cfg, Variant::Full).unwrap();
    let cfg_b = TrainConfig {
        loss: LossConfig::default(),
        ..cfg
    };
    let b = train(&data, &cfg_b, Variant::NoGram).unwrap();
    let bitexact = a.params.to_bytes() == b.params.to_bytes()
        && a.loss_history == b.loss_history;

    result(
        "loss sanity fixtures",
        gram_err < 1e-12 && infonce_err < 1e-12 && bitexact,
        format!(
            "uniform gram err {gram_err:.1e}, infonce err {infonce_err:.1e}, lambda=0 bit-exact: {bitexact}"
        ),
    )
}
