use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{affine, uniform_init, ModelParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Stack of 3x3, stride-2, padding-1 convolutions applied before the MLP head.
///
/// The first layer reads channel-major (`C, H, W`) images; later layers and
/// the flattened output use a channel-last layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: Vec<usize>,
}

const KERNEL: usize = 3;

fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl ConvSpec {
    /// `(channels, height, width)` after every layer, input first.
    fn geometry(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![(self.channels, self.height, self.width)];
        for &f in &self.filters {
            let (_, h, w) = *dims.last().unwrap();
            dims.push((f, conv_out(h), conv_out(w)));
        }
        dims
    }

    fn flat_output(&self) -> usize {
        let (c, h, w) = *self.geometry().last().unwrap();
        c * h * w
    }

    /// im2col index map for one layer over a batch of `n` samples.
    fn patch_map(&self, layer: usize, n: usize) -> (Vec<Option<usize>>, usize) {
        let geo = self.geometry();
        let (c, h, w) = geo[layer];
        let (_, oh, ow) = geo[layer + 1];
        let channel_major = layer == 0;
        let in_size = c * h * w;
        let cols = c * KERNEL * KERNEL;
        let mut map = Vec::with_capacity(n * oh * ow * cols);
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    map.push(None);
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let offset = if channel_major {
                                    ci * h * w + iy * w + ix
                                } else {
                                    (iy * w + ix) * c + ci
                                };
                                map.push(Some(s * in_size + offset));
                            }
                        }
                    }
                }
            }
        }
        (map, cols)
    }
}

/// Architecture of a teacher or student classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    /// Index of the hidden layer whose activation is exposed as the feature.
    pub feature_tap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
}

/// Tape-recorded output of a classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'t> {
    pub logits: Var<'t>,
    pub probs: Var<'t>,
    pub feature: Var<'t>,
}

/// Plain values of a [`Prediction`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionValues {
    pub logits: Tensor,
    pub probs: Tensor,
    pub feature: Tensor,
}

impl Prediction<'_> {
    pub fn values(&self) -> PredictionValues {
        PredictionValues {
            logits: self.logits.value(),
            probs: self.probs.value(),
            feature: self.feature.value(),
        }
    }
}

impl ClassifierSpec {
    pub fn mlp(input_dim: usize, hidden_dims: &[usize], class_count: usize, feature_tap: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            class_count,
            feature_tap,
            conv: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "layer widths must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count", "need at least two classes"));
        }
        if self.feature_tap >= self.hidden_dims.len() {
            return Err(Error::config(
                "feature_tap",
                format!(
                    "tap {} but only {} hidden layers",
                    self.feature_tap,
                    self.hidden_dims.len()
                ),
            ));
        }
        if let Some(conv) = &self.conv {
            if conv.channels * conv.height * conv.width != self.input_dim {
                return Err(Error::config("conv", "image geometry does not match input_dim"));
            }
            if conv.filters.contains(&0) {
                return Err(Error::config("conv.filters", "filter counts must be positive"));
            }
        }
        Ok(())
    }

    /// Width of the tapped hidden layer.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims[self.feature_tap]
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ModelParams {
        let mut p = ModelParams::new();
        let mut width = self.input_dim;
        if let Some(conv) = &self.conv {
            let geo = conv.geometry();
            for (i, &f) in conv.filters.iter().enumerate() {
                let fan_in = geo[i].0 * KERNEL * KERNEL;
                p.push(format!("conv{i}.weight"), uniform_init(rng, &[fan_in, f], fan_in));
                p.push(format!("conv{i}.bias"), uniform_init(rng, &[1, f], fan_in));
            }
            width = conv.flat_output();
        }
        let dims = self.hidden_dims.iter().chain(std::iter::once(&self.class_count));
        for (i, &out) in dims.enumerate() {
            p.push(format!("layer{i}.weight"), uniform_init(rng, &[width, out], width));
            p.push(format!("layer{i}.bias"), uniform_init(rng, &[1, out], width));
            width = out;
        }
        p
    }

    /// Sets the output layer to zero, which makes every prediction uniform.
    pub fn zero_output_layer(&self, params: &mut ModelParams) {
        let last = self.hidden_dims.len();
        for name in [format!("layer{last}.weight"), format!("layer{last}.bias")] {
            if let Some(t) = params.get_mut(&name) {
                let shape = t.shape().to_vec();
                *t = Tensor::zeros(&shape);
            }
        }
    }

    /// Forward pass over a `[batch, input_dim]` matrix.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Prediction<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "classifier_forward",
                lhs: shape,
                rhs: vec![0, self.input_dim],
            });
        }
        let batch = shape[0];
        let mut h = x;
        let mut next = 0;
        if let Some(conv) = &self.conv {
            let geo = conv.geometry();
            for (i, &f) in conv.filters.iter().enumerate() {
                let (map, cols) = conv.patch_map(i, batch);
                let (_, oh, ow) = geo[i + 1];
                let patches = h.gather(map, &[batch * oh * ow, cols])?;
                let out = affine(patches, params[next], params[next + 1])?.relu()?;
                h = out.reshape(&[batch, oh * ow * f])?;
                next += 2;
            }
        }
        let mut feature = None;
        for i in 0..self.hidden_dims.len() {
            h = affine(h, params[next], params[next + 1])?.relu()?;
            next += 2;
            if i == self.feature_tap {
                feature = Some(h);
            }
        }
        let logits = affine(h, params[next], params[next + 1])?;
        let probs = logits.softmax()?;
        Ok(Prediction {
            logits,
            probs,
            feature: feature.expect("validated feature tap"),
        })
    }

    /// Forward pass on plain values, without keeping a tape.
    pub fn predict(&self, params: &ModelParams, x: &Tensor) -> Result<PredictionValues> {
        let tape = Tape::new();
        let vars = params.bind_constant(&tape);
        let x = tape.constant(x.clone());
        Ok(self.forward(&vars, x)?.values())
    }

    /// Fraction of rows whose argmax matches the label.
    pub fn accuracy(&self, params: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(params, x)?;
        let correct = pred
            .probs
            .argmax_rows()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::stream;

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "test.batch");
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_uniform_probabilities() {
        let spec = ClassifierSpec::mlp(4, &[5], 4, 0);
        let mut params = spec.init_params(&mut stream(1, "init"));
        spec.zero_output_layer(&mut params);
        let pred = spec.predict(&params, &batch(3, 4, 2)).unwrap();
        for p in pred.probs.data() {
            assert_eq!(*p, 0.25);
        }
    }

    #[test]
    fn rows_are_normalized_and_feature_is_tapped() {
        let spec = ClassifierSpec::mlp(3, &[6, 5], 3, 0);
        let params = spec.init_params(&mut stream(2, "init"));
        let pred = spec.predict(&params, &batch(7, 3, 3)).unwrap();
        assert_eq!(pred.probs.shape(), &[7, 3]);
        assert_eq!(pred.feature.shape(), &[7, 6]);
        for r in 0..7 {
            let s: f64 = pred.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(pred.probs.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ClassifierSpec::mlp(3, &[4], 2, 0);
        let run = || {
            let params = spec.init_params(&mut stream(5, "init"));
            spec.predict(&params, &batch(2, 3, 6)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let spec = ClassifierSpec::mlp(3, &[4], 2, 0);
        let params = spec.init_params(&mut stream(5, "init"));
        assert!(matches!(
            spec.predict(&params, &batch(2, 4, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn validation_catches_bad_tap_and_classes() {
        assert!(ClassifierSpec::mlp(3, &[4], 2, 1).validate().is_err());
        assert!(ClassifierSpec::mlp(3, &[4], 1, 0).validate().is_err());
        assert!(ClassifierSpec::mlp(3, &[4], 2, 0).validate().is_ok());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let spec = ClassifierSpec::mlp(3, &[4, 3], 3, 1);
        let params = spec.init_params(&mut stream(9, "init"));
        let x = batch(5, 3, 10);
        let weights = batch(5, 3, 11);
        let report = finite_diff_check(
            |tape, p| {
                let pred = spec.forward(p, tape.constant(x.clone()))?;
                let w = tape.constant(weights.clone());
                pred.probs.log()?.mul(w)?.sum()?.add(pred.feature.square()?.mean()?)
            },
            &params.tensors().cloned().collect::<Vec<_>>(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn small_cnn_shapes_and_gradients() {
        let spec = ClassifierSpec {
            input_dim: 2 * 5 * 5,
            hidden_dims: vec![4],
            class_count: 3,
            feature_tap: 0,
            conv: Some(ConvSpec {
                channels: 2,
                height: 5,
                width: 5,
                filters: vec![3, 2],
            }),
        };
        spec.validate().unwrap();
        let params = spec.init_params(&mut stream(3, "init"));
        assert_eq!(params.get("conv0.weight").unwrap().shape(), &[18, 3]);
        assert_eq!(params.get("layer0.weight").unwrap().shape(), &[2 * 2 * 2, 4]);
        let x = batch(2, 50, 4);
        let pred = spec.predict(&params, &x).unwrap();
        assert_eq!(pred.probs.shape(), &[2, 3]);
        let report = finite_diff_check(
            |tape, p| {
                let pred = spec.forward(p, tape.constant(x.clone()))?;
                pred.logits.square()?.sum()
            },
            &params.tensors().cloned().collect::<Vec<_>>(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}
