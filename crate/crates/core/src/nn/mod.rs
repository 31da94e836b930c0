//! Small differentiable models: teacher/student classifiers, the hint
//! projector and the meta-weight network.

mod classifier;
mod metanet;
mod params;

pub use classifier::{ClassifierSpec, ConvSpec, Prediction, PredictionValues};
pub use metanet::{MetaNet, MetaNetConfig, DEFAULT_META_HIDDEN};
pub use params::ModelParams;

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::Result;

/// Uniform `±1/sqrt(fan_in)` initialization.
pub(crate) fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// `x @ w + b`, with the `[1, out]` bias repeated over the rows of `x`.
pub(crate) fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    x.matmul(w)?.add(b.gather_rows(&vec![0; rows])?)
}

/// Linear map from student features to teacher features for the hint loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ProjectorSpec {
    pub fn init_params(&self, rng: &mut impl Rng) -> ModelParams {
        let mut p = ModelParams::new();
        p.push("weight", uniform_init(rng, &[self.input_dim, self.output_dim], self.input_dim));
        p.push("bias", uniform_init(rng, &[1, self.output_dim], self.input_dim));
        p
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], features: Var<'t>) -> Result<Var<'t>> {
        affine(features, params[0], params[1])
    }
}
