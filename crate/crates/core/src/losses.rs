//! Cross-entropy, the soft-label KL term, the feature hint term, their
//! per-sample weighted combination, and the meta loss on the error subset.
//!
//! Per-sample terms are `[batch, 1]` columns; every batch reduction is a mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Prediction, ProjectorSpec};

/// Tolerance on `Σ p = 1` for inputs that must be distributions.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Target used by the meta loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaTarget {
    /// Squared error of the true-class probability against 1.
    #[default]
    TrueClass,
    /// Mean squared error of the full distribution against the one-hot label.
    OneHot,
}

pub(crate) fn check_distributions(t: &Tensor, what: &str) -> Result<()> {
    let (rows, _) = t.matrix_dims();
    for r in 0..rows {
        let row = t.row(r);
        if row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidDistribution(format!("{what}: row {r} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("{what}: row {r} sums to {sum}")));
        }
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        data[r * classes + label] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Rows of `softmax(log p / τ)`; `τ = 1` returns the input unchanged.
pub fn temper(probs: &Tensor, temperature: f64) -> Tensor {
    if temperature == 1.0 {
        return probs.clone();
    }
    let (rows, cols) = probs.matrix_dims();
    let mut out = Vec::with_capacity(probs.numel());
    for r in 0..rows {
        let logits: Vec<f64> = probs.row(r).iter().map(|&p| clamped_ln(p) / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(vec![rows, cols], out).expect("finite tempered distribution")
}

/// `-log p[label]` per row, from logits.
pub fn cross_entropy_per_sample<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len(), 0],
        });
    }
    let mask = logits.tape().constant(one_hot(labels, shape[1])?);
    logits.softmax()?.log()?.mul(mask)?.row_sum()?.scale(-1.0)
}

/// `Σ_c p_T^τ(c) · log(p_T^τ(c) / p_S^τ(c))` per row. Gradient flows to the
/// student only.
pub fn kd_vanilla_per_sample<'t>(
    teacher_probs: &Tensor,
    student_probs: Var<'t>,
    temperature: f64,
) -> Result<Var<'t>> {
    if temperature <= 0.0 {
        return Err(Error::contract("temperature must be positive"));
    }
    if teacher_probs.shape() != student_probs.shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "kd_vanilla",
            lhs: teacher_probs.shape().to_vec(),
            rhs: student_probs.shape(),
        });
    }
    let tape = student_probs.tape();
    let teacher = temper(teacher_probs, temperature);
    let teacher_log = Tensor::new(
        teacher.shape().to_vec(),
        teacher.data().iter().map(|&p| clamped_ln(p)).collect(),
    )?;
    let student = if temperature == 1.0 {
        student_probs
    } else {
        student_probs.log()?.scale(1.0 / temperature)?.softmax()?
    };
    tape.constant(teacher_log)
        .sub(student.log()?)?
        .mul(tape.constant(teacher))?
        .row_sum()
}

/// Mean squared error between projected student features and teacher features, per row.
pub fn hint_loss_per_sample<'t>(
    student_feature: Var<'t>,
    teacher_feature: &Tensor,
    projector: &ProjectorSpec,
    projector_params: &[Var<'t>],
) -> Result<Var<'t>> {
    let projected = projector.forward(projector_params, student_feature)?;
    if projected.shape().as_slice() != teacher_feature.shape() {
        return Err(Error::ShapeMismatch {
            op: "hint_loss",
            lhs: projected.shape(),
            rhs: teacher_feature.shape().to_vec(),
        });
    }
    projected
        .sub(student_feature.tape().constant(teacher_feature.clone()))?
        .square()?
        .row_mean()
}

/// Frozen teacher outputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub probs: Tensor,
    pub feature: Tensor,
}

/// Unweighted per-sample loss columns for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub ce: Var<'t>,
    pub kd_van: Var<'t>,
    pub kd_aux: Var<'t>,
}

/// Batch means of each term, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd_van: f64,
    pub kd_aux: f64,
    pub total: f64,
}

fn column_mean(v: &Var<'_>) -> f64 {
    let t = v.value();
    t.data().iter().sum::<f64>() / t.numel() as f64
}

impl<'t> LossTerms<'t> {
    pub fn compute(
        student: &Prediction<'t>,
        teacher: &TeacherOutputs,
        labels: &[usize],
        projector: &ProjectorSpec,
        projector_params: &[Var<'t>],
        temperature: f64,
    ) -> Result<Self> {
        Ok(Self {
            ce: cross_entropy_per_sample(student.logits, labels)?,
            kd_van: kd_vanilla_per_sample(&teacher.probs, student.probs, temperature)?,
            kd_aux: hint_loss_per_sample(student.feature, &teacher.feature, projector, projector_params)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ce.shape()[0]
    }

    fn breakdown(&self, total: &Var<'t>) -> LossBreakdown {
        LossBreakdown {
            ce: column_mean(&self.ce),
            kd_van: column_mean(&self.kd_van),
            kd_aux: column_mean(&self.kd_aux),
            total: total.item(),
        }
    }

    /// `mean(ce + β·kd_van + γ·kd_aux)` with `[batch, 1]` weight columns.
    pub fn combined(&self, beta: Var<'t>, gamma: Var<'t>) -> Result<(Var<'t>, LossBreakdown)> {
        let n = self.batch_size();
        for w in [&beta, &gamma] {
            if w.shape() != [n, 1] {
                return Err(Error::ShapeMismatch {
                    op: "combined_loss",
                    lhs: w.shape(),
                    rhs: vec![n, 1],
                });
            }
        }
        let total = self
            .ce
            .add(beta.mul(self.kd_van)?)?
            .add(gamma.mul(self.kd_aux)?)?
            .mean()?;
        Ok((total, self.breakdown(&total)))
    }

    /// Conventional fixed-coefficient loss `mean(ce + kd_van + kd_aux)`.
    pub fn static_total(&self) -> Result<(Var<'t>, LossBreakdown)> {
        let total = self.ce.add(self.kd_van)?.add(self.kd_aux)?.mean()?;
        Ok((total, self.breakdown(&total)))
    }
}

/// Meta loss over the error subset; `None` when the subset is empty.
pub fn meta_loss<'t>(probs: Var<'t>, labels: &[usize], target: MetaTarget) -> Result<Option<Var<'t>>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "meta_loss",
            lhs: shape,
            rhs: vec![labels.len(), 0],
        });
    }
    let mask = probs.tape().constant(one_hot(labels, shape[1])?);
    let loss = match target {
        MetaTarget::TrueClass => probs.mul(mask)?.row_sum()?.add_scalar(-1.0)?.square()?.mean()?,
        MetaTarget::OneHot => probs.sub(mask)?.square()?.row_mean()?.mean()?,
    };
    Ok(Some(loss))
}

/// Cross-entropy of a single logit vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec())?);
    Ok(cross_entropy_per_sample(z, &[label])?.item())
}

/// Soft-label divergence between two probability vectors.
pub fn kd_vanilla(teacher: &[f64], student: &[f64], temperature: f64) -> Result<f64> {
    let pt = Tensor::new(vec![1, teacher.len()], teacher.to_vec())?;
    let ps = Tensor::new(vec![1, student.len()], student.to_vec())?;
    check_distributions(&pt, "teacher probabilities")?;
    check_distributions(&ps, "student probabilities")?;
    let tape = Tape::new();
    Ok(kd_vanilla_per_sample(&pt, tape.constant(ps), temperature)?.item())
}

/// Meta loss from plain probability rows.
pub fn meta_loss_value(probs: &Tensor, labels: &[usize], target: MetaTarget) -> Result<Option<f64>> {
    let tape = Tape::new();
    Ok(meta_loss(tape.constant(probs.clone()), labels, target)?.map(|v| v.item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::nn::{ClassifierSpec, ModelParams};
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn cross_entropy_values() {
        let uniform = cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        // logits of p = [0.9, 0.1]
        let ce = cross_entropy(&[0.9f64.ln(), 0.1f64.ln()], 1).unwrap();
        assert!((ce - std::f64::consts::LN_10).abs() < 1e-12, "{ce}");
        let perfect = cross_entropy(&[0.0, 800.0], 1).unwrap();
        assert_eq!(perfect, 0.0);
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn kd_vanilla_values() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(kd_vanilla(&p, &p, 1.0).unwrap(), 0.0);
        assert_eq!(kd_vanilla(&p, &p, 4.0).unwrap(), 0.0);
        let v = kd_vanilla(&[1.0, 0.0], &[0.5, 0.5], 1.0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            kd_vanilla(&[0.7, 0.7], &[0.5, 0.5], 1.0),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn hint_loss_offset_is_squared() {
        let tape = Tape::new();
        let proj = ProjectorSpec { input_dim: 2, output_dim: 3 };
        let mut params = ModelParams::new();
        params.push("weight", Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0]]).unwrap());
        params.push("bias", Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap());
        let p = params.bind(&tape);
        let fs = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        let projected = proj.forward(&p, fs).unwrap().value();
        let exact = hint_loss_per_sample(fs, &projected, &proj, &p).unwrap().value();
        assert_eq!(exact.data(), &[0.0, 0.0]);
        let delta = 0.25;
        let shifted = Tensor::new(
            projected.shape().to_vec(),
            projected.data().iter().map(|v| v + delta).collect(),
        )
        .unwrap();
        let off = hint_loss_per_sample(fs, &shifted, &proj, &p).unwrap().value();
        for v in off.data() {
            assert!((v - delta * delta).abs() < 1e-15);
        }
    }

    #[test]
    fn meta_loss_values() {
        let probs = Tensor::from_rows(&[vec![0.7, 0.3]]).unwrap();
        let v = meta_loss_value(&probs, &[1], MetaTarget::TrueClass).unwrap().unwrap();
        assert!((v - 0.49).abs() < 1e-15);
        let perfect = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(meta_loss_value(&perfect, &[1, 0], MetaTarget::TrueClass).unwrap(), Some(0.0));
        assert_eq!(meta_loss_value(&perfect, &[1, 0], MetaTarget::OneHot).unwrap(), Some(0.0));
        let empty = Tape::new();
        let p = empty.constant(Tensor::zeros(&[1, 2]));
        assert!(meta_loss(p, &[], MetaTarget::TrueClass).unwrap().is_none());
        // one-hot target: ((0.7-0)^2 + (0.3-1)^2) / 2
        let v = meta_loss_value(&probs, &[1], MetaTarget::OneHot).unwrap().unwrap();
        assert!((v - 0.49).abs() < 1e-15);
    }

    fn toy_terms<'t>(
        tape: &'t Tape,
        params: &[Var<'t>],
        proj_params: &[Var<'t>],
    ) -> LossTerms<'t> {
        let spec = ClassifierSpec::mlp(3, &[4], 2, 0);
        let proj = ProjectorSpec { input_dim: 4, output_dim: 2 };
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.3, -0.7], vec![-0.2, 0.8, 0.1]]).unwrap());
        let pred = spec.forward(params, x).unwrap();
        let teacher = TeacherOutputs {
            probs: Tensor::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap(),
            feature: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.2, 0.4], vec![0.0, 0.9]]).unwrap(),
        };
        LossTerms::compute(&pred, &teacher, &[0, 1, 1], &proj, proj_params, 1.0).unwrap()
    }

    fn toy_params() -> (ModelParams, ModelParams) {
        let spec = ClassifierSpec::mlp(3, &[4], 2, 0);
        let proj = ProjectorSpec { input_dim: 4, output_dim: 2 };
        (spec.init_params(&mut stream(4, "s")), proj.init_params(&mut stream(4, "p")))
    }

    #[test]
    fn unit_weights_equal_static_loss_bitwise() {
        let (s, p) = toy_params();
        let tape = Tape::new();
        let terms = toy_terms(&tape, &s.bind(&tape), &p.bind(&tape));
        let ones = tape.constant(Tensor::ones(&[3, 1]));
        let (weighted, wb) = terms.combined(ones, ones).unwrap();
        let (reference, rb) = terms.static_total().unwrap();
        assert_eq!(weighted.item().to_bits(), reference.item().to_bits());
        assert_eq!(wb, rb);
    }

    #[test]
    fn zero_weights_leave_cross_entropy() {
        let (s, p) = toy_params();
        let tape = Tape::new();
        let terms = toy_terms(&tape, &s.bind(&tape), &p.bind(&tape));
        let zeros = tape.constant(Tensor::zeros(&[3, 1]));
        let (_, b) = terms.combined(zeros, zeros).unwrap();
        assert!((b.total - b.ce).abs() < 1e-15);
    }

    #[test]
    fn doubling_one_gamma_adds_its_hint_share() {
        let (s, p) = toy_params();
        let tape = Tape::new();
        let terms = toy_terms(&tape, &s.bind(&tape), &p.bind(&tape));
        let beta = tape.constant(Tensor::new(vec![3, 1], vec![0.9, 1.2, 1.0]).unwrap());
        let gamma = Tensor::new(vec![3, 1], vec![1.1, 0.7, 1.3]).unwrap();
        let mut doubled = gamma.clone();
        doubled.data_mut()[1] *= 2.0;
        let (_, base) = terms.combined(beta, tape.constant(gamma.clone())).unwrap();
        let (_, up) = terms.combined(beta, tape.constant(doubled)).unwrap();
        let aux1 = terms.kd_aux.value().data()[1];
        let expected = gamma.data()[1] * aux1 / 3.0;
        assert!(((up.total - base.total) - expected).abs() < 1e-14);
    }

    #[test]
    fn misaligned_weights_are_rejected() {
        let (s, p) = toy_params();
        let tape = Tape::new();
        let terms = toy_terms(&tape, &s.bind(&tape), &p.bind(&tape));
        let short = tape.constant(Tensor::ones(&[2, 1]));
        assert!(terms.combined(short, short).is_err());
        let scalar = tape.constant(Tensor::ones(&[1, 1]));
        assert!(terms.combined(scalar, scalar).is_err());
    }

    #[test]
    fn weighted_loss_gradients_match_finite_differences() {
        let (s, p) = toy_params();
        let mut all: Vec<Tensor> = s.tensors().cloned().collect();
        all.extend(p.tensors().cloned());
        let ns = s.len();
        let mut rng = stream(8, "w");
        let beta = Tensor::new(vec![3, 1], (0..3).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let gamma = Tensor::new(vec![3, 1], (0..3).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let terms = toy_terms(tape, &v[..ns], &v[ns..]);
                let (total, _) = terms.combined(tape.constant(beta.clone()), tape.constant(gamma.clone()))?;
                Ok(total)
            },
            &all,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}
