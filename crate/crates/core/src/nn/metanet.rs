use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{affine, uniform_init, ModelParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::ensemble::WeightPair;
use crate::error::{Error, Result};
use crate::losses::check_distributions;

pub const DEFAULT_META_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaNetConfig {
    pub class_count: usize,
    pub hidden: usize,
    /// Half-width `l` of the weight range `[1 - l, 1 + l]`.
    pub range: f64,
}

impl MetaNetConfig {
    pub fn new(class_count: usize, range: f64) -> Self {
        Self {
            class_count,
            hidden: DEFAULT_META_HIDDEN,
            range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.range) {
            return Err(Error::config("meta_net.range", "must lie in [0, 1]"));
        }
        if self.hidden == 0 {
            return Err(Error::config("meta_net.hidden", "must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("meta_net.class_count", "need at least two classes"));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.range
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.range
    }
}

/// Two-layer MLP mapping `[p_S ‖ p_T]` to per-sample `(β, γ)` in `[1 - l, 1 + l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub config: MetaNetConfig,
}

impl MetaNet {
    pub fn new(config: MetaNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Output layer starts at zero so every sample begins at `(1, 1)`.
    pub fn init_params(&self, rng: &mut impl Rng) -> ModelParams {
        let input = 2 * self.config.class_count;
        let h = self.config.hidden;
        let mut p = ModelParams::new();
        p.push("hidden.weight", uniform_init(rng, &[input, h], input));
        p.push("hidden.bias", uniform_init(rng, &[1, h], input));
        p.push("out.weight", Tensor::zeros(&[h, 2]));
        p.push("out.bias", Tensor::zeros(&[1, 2]));
        p
    }

    /// Returns `(β, γ)` as `[batch, 1]` columns, differentiable w.r.t. `params`.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        student_probs: Var<'t>,
        teacher_probs: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = student_probs.tape();
        let input = tape.concat(&[student_probs, teacher_probs])?;
        if input.shape()[1] != 2 * self.config.class_count {
            return Err(Error::ShapeMismatch {
                op: "meta_forward",
                lhs: input.shape(),
                rhs: vec![0, 2 * self.config.class_count],
            });
        }
        let hidden = affine(input, params[0], params[1])?.relu()?;
        let z = affine(hidden, params[2], params[3])?;
        let l = self.config.range;
        let weights = z.sigmoid()?.scale(2.0 * l)?.add_scalar(1.0 - l)?;
        Ok((weights.slice_cols(0, 1)?, weights.slice_cols(1, 2)?))
    }

    /// Per-sample weights for probability rows `p_S` and `p_T`.
    pub fn weights(
        &self,
        params: &ModelParams,
        student_probs: &Tensor,
        teacher_probs: &Tensor,
    ) -> Result<Vec<WeightPair>> {
        check_distributions(student_probs, "student probabilities")?;
        check_distributions(teacher_probs, "teacher probabilities")?;
        let tape = Tape::new();
        let vars = params.bind_constant(&tape);
        let (beta, gamma) = self.forward(
            &vars,
            tape.constant(student_probs.clone()),
            tape.constant(teacher_probs.clone()),
        )?;
        Ok(beta
            .value()
            .data()
            .iter()
            .zip(gamma.value().data())
            .map(|(&beta, &gamma)| WeightPair { beta, gamma })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use crate::rng::stream;

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_init_gives_unit_weights() {
        let net = MetaNet::new(MetaNetConfig::new(3, 0.5)).unwrap();
        let params = net.init_params(&mut stream(0, "meta"));
        let ps = probs(&[vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]]);
        let pt = probs(&[vec![0.6, 0.2, 0.2], vec![0.1, 0.1, 0.8]]);
        for w in net.weights(&params, &ps, &pt).unwrap() {
            assert_eq!(w, WeightPair { beta: 1.0, gamma: 1.0 });
        }
    }

    #[test]
    fn swapping_inputs_changes_output() {
        let net = MetaNet::new(MetaNetConfig::new(2, 0.5)).unwrap();
        let mut params = net.init_params(&mut stream(1, "meta"));
        *params.get_mut("out.weight").unwrap() = uniform_init(&mut stream(2, "out"), &[64, 2], 4);
        let a = probs(&[vec![0.9, 0.1]]);
        let b = probs(&[vec![0.3, 0.7]]);
        let ab = net.weights(&params, &a, &b).unwrap()[0];
        let ba = net.weights(&params, &b, &a).unwrap()[0];
        assert_ne!(ab, ba);
    }

    #[test]
    fn rejects_non_distribution_input() {
        let net = MetaNet::new(MetaNetConfig::new(2, 0.5)).unwrap();
        let params = net.init_params(&mut stream(0, "meta"));
        let bad = probs(&[vec![0.5, 0.6]]);
        let ok = probs(&[vec![0.5, 0.5]]);
        assert!(matches!(
            net.weights(&params, &bad, &ok),
            Err(Error::InvalidDistribution(_))
        ));
    }
}
