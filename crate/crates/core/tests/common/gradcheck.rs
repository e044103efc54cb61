//! Central finite differences against the analytic backward pass.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use setcomp_core::model::{init_params, row_loss, row_loss_and_grad, Dims, DropoutMasks, ModelParams, NormMode, Tensors};
use setcomp_core::task::Token;

pub const H: f64 = 1e-6;

pub fn random_model(rng: &mut ChaCha8Rng, norm: NormMode) -> ModelParams {
    let v = rng.random_range(3..=6);
    let d = rng.random_range(v - 1..=8);
    let d_k = rng.random_range(1..=d);
    let d_v = rng.random_range(v - 1..=d);
    let mut p = init_params(Dims::new(v, d, d_k, d_v).unwrap(), norm, 1e-6, rng).unwrap();
    // Scale up so attention is far from uniform and every path carries signal.
    p.tensors.map_inplace(|x| *x *= 25.0);
    p.tensors.gains.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
    p
}

pub fn random_row(rng: &mut ChaCha8Rng, v: usize) -> Vec<Token> {
    let mut all: Vec<Token> = (0..v as Token).collect();
    all.shuffle(rng);
    all.truncate(rng.random_range(2..=v));
    all
}

/// Relative error of every analytic partial derivative against a central
/// difference of the loss, with the given masks re-injected each time.
pub fn max_relative_error(params: &ModelParams, row: &[Token], masks: &DropoutMasks) -> f64 {
    let mut grads = Tensors::zeros(&params.dims);
    row_loss_and_grad(params, row, masks.clone(), 1.0, &mut grads).unwrap();
    let mut worst = 0.0f64;
    for i in 0..params.tensors.len() {
        let mut plus = params.clone();
        *plus.tensors.get_mut(i) += H;
        let mut minus = params.clone();
        *minus.tensors.get_mut(i) -= H;
        let fd = (row_loss(&plus, row, masks.clone()).unwrap() - row_loss(&minus, row, masks.clone()).unwrap())
            / (2.0 * H);
        let an = grads.get(i);
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

