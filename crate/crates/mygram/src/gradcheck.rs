//! Central finite-difference validation of recorded gradients.
//!
//! The checks here never consult the reverse pass for the numeric
//! side: they re-evaluate the forward closure at perturbed inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::tensor::{Tape, Tensor};

/// Build a scalar loss from leaf tensors registered for `params`.
pub type LossBuilder<'a> = dyn FnMut(&Tape, &[Tensor]) -> Tensor + 'a;

fn eval_loss(params: &[Matrix], build: &mut LossBuilder) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.param(p.clone())).collect();
    build(&tape, &leaves).scalar_value()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-10 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Maximum relative error between analytic and central-difference
/// directional derivatives, probing each parameter separately with
/// `probes` random directions. `h` is the central-difference step.
pub fn max_param_rel_err(
    params: &[Matrix],
    build: &mut LossBuilder,
    probes: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&tape, &leaves);
    loss.backward();
    let grads: Vec<Matrix> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.grad().unwrap_or_else(|| {
                panic!("parameter {i} did not receive a gradient")
            })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for _ in 0..probes {
            let dir: Vec<f64> = (0..p.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic: f64 = grads[pi]
                .data
                .iter()
                .zip(dir.iter())
                .map(|(g, d)| g * d)
                .sum();

            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            for (j, d) in dir.iter().enumerate() {
                plus[pi].data[j] += h * d;
                minus[pi].data[j] -= h * d;
            }
            let numeric = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * h);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
