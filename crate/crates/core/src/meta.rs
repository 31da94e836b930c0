//! Inner loop (pseudo update, error subset, hypergradient, meta-net step) and
//! the outer student step under each weighting mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::ensemble::{entropy, uncertainty_weights, EnsembleConfig, WeightPair, WeightStore};
use crate::error::{Error, Result};
use crate::losses::{meta_loss, LossBreakdown, LossTerms, MetaTarget, TeacherOutputs};
use crate::nn::{ClassifierSpec, MetaNet, ModelParams, ProjectorSpec};
use crate::optim::{Adam, AdamConfig, Sgd};

/// How per-sample loss weights are produced for the outer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Fixed `(1, 1)`.
    Static,
    /// `1 - l + 2l·u` from normalized prediction entropy, no meta network.
    UnDy,
    /// Meta network without ensembling.
    Mwn,
    /// Meta network with uncertainty-gated ensembling.
    #[default]
    Hkd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Static, Mode::UnDy, Mode::Mwn, Mode::Hkd];

    pub fn uses_meta_net(self) -> bool {
        matches!(self, Mode::Mwn | Mode::Hkd)
    }

    pub fn uses_ensemble(self) -> bool {
        self == Mode::Hkd
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::UnDy => "un-dy",
            Mode::Mwn => "mwn",
            Mode::Hkd => "hkd",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`; expected static, un-dy, mwn or hkd")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerLoopConfig {
    /// Iterations between meta-net updates.
    pub interval: usize,
    pub optimizer: AdamConfig,
    /// Pseudo-update learning rate; the student's current rate when unset.
    pub pseudo_lr: Option<f64>,
    pub target: MetaTarget,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            optimizer: AdamConfig::default(),
            pseudo_lr: None,
            target: MetaTarget::TrueClass,
        }
    }
}

impl InnerLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("meta.interval", "must be at least 1"));
        }
        if let Some(lr) = self.pseudo_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("meta.pseudo_lr", "must be positive"));
            }
        }
        self.optimizer.validate("meta.optimizer")
    }

    /// Meta step runs before the outer step of iteration `i` when this holds.
    pub fn is_meta_iteration(&self, iteration: usize) -> bool {
        iteration > 0 && iteration.is_multiple_of(self.interval)
    }
}

/// One training batch with its cached teacher outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub teacher: TeacherOutputs,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Architectures shared by the inner and outer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSetup {
    pub student: ClassifierSpec,
    pub projector: ProjectorSpec,
    pub meta_net: MetaNet,
    pub temperature: f64,
}

/// Student parameters after one differentiable SGD step.
#[derive(Clone, Debug)]
pub struct PseudoStudent<'t> {
    pub params: Vec<Var<'t>>,
    pub lr: f64,
}

impl DistillSetup {
    fn terms<'t>(
        &self,
        student: &[Var<'t>],
        projector: &[Var<'t>],
        batch: &TrainBatch,
    ) -> Result<(LossTerms<'t>, Var<'t>)> {
        let tape = projector
            .first()
            .map(|v| v.tape())
            .ok_or_else(|| Error::contract("projector has no parameters"))?;
        let pred = self.student.forward(student, tape.constant(batch.x.clone()))?;
        let terms = LossTerms::compute(
            &pred,
            &batch.teacher,
            &batch.labels,
            &self.projector,
            projector,
            self.temperature,
        )?;
        Ok((terms, pred.probs))
    }

    /// `θ_p = θ - lr·∇θ L` with raw meta-net weights, recorded so that `θ_p`
    /// stays differentiable in `meta`. `student` must be leaves of the tape.
    pub fn pseudo_update<'t>(
        &self,
        student: &[Var<'t>],
        projector: &[Var<'t>],
        meta: &[Var<'t>],
        batch: &TrainBatch,
        lr: f64,
    ) -> Result<PseudoStudent<'t>> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::contract("pseudo-update learning rate must be non-negative"));
        }
        let (terms, probs) = self.terms(student, projector, batch)?;
        let tape = probs.tape();
        let (beta, gamma) =
            self.meta_net
                .forward(meta, probs.detach(), tape.constant(batch.teacher.probs.clone()))?;
        let (loss, _) = terms.combined(beta, gamma)?;
        let grads = tape.grad(loss, student, true)?;
        let params = student
            .iter()
            .zip(grads)
            .map(|(&theta, g)| theta.sub(g.scale(lr)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(PseudoStudent { params, lr })
    }

    #[allow(clippy::too_many_arguments)]
    /// Meta loss of the pseudo student on its misclassified meta samples, as a
    /// function of `meta`. Returns the loss (if the subset is non-empty) and the subset.
    pub fn meta_objective<'t>(
        &self,
        tape: &'t Tape,
        student: &ModelParams,
        projector: &ModelParams,
        meta: &[Var<'t>],
        batch: &TrainBatch,
        meta_set: &MetaBatch,
        lr: f64,
        target: MetaTarget,
    ) -> Result<(Option<Var<'t>>, Vec<usize>)> {
        let s = student.bind(tape);
        let p = projector.bind_constant(tape);
        let pseudo = self.pseudo_update(&s, &p, meta, batch, lr)?;
        let pred = self
            .student
            .forward(&pseudo.params, tape.constant(meta_set.x.clone()))?;
        let subset = select_error_subset(&pred.probs.value(), &meta_set.labels);
        if subset.is_empty() {
            return Ok((None, subset));
        }
        let labels: Vec<usize> = subset.iter().map(|&i| meta_set.labels[i]).collect();
        let loss = meta_loss(pred.probs.gather_rows(&subset)?, &labels, target)?;
        Ok((loss, subset))
    }

    /// Hypergradient of the meta loss w.r.t. every meta-net tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn hypergradient(
        &self,
        student: &ModelParams,
        projector: &ModelParams,
        meta: &ModelParams,
        batch: &TrainBatch,
        meta_set: &MetaBatch,
        lr: f64,
        target: MetaTarget,
    ) -> Result<Hypergradient> {
        let tape = Tape::new();
        let m = meta.bind(&tape);
        let (loss, subset) =
            self.meta_objective(&tape, student, projector, &m, batch, meta_set, lr, target)?;
        let Some(loss) = loss else {
            return Ok(Hypergradient {
                loss: None,
                grads: Vec::new(),
                subset_size: 0,
            });
        };
        let grads = tape.grad_values(loss, &m)?;
        Ok(Hypergradient {
            loss: Some(loss.item()),
            grads,
            subset_size: subset.len(),
        })
    }

    /// One inner-loop update of the meta network. Student and projector are read only.
    #[allow(clippy::too_many_arguments)]
    pub fn meta_step(
        &self,
        meta: &mut MetaState,
        student: &ModelParams,
        projector: &ModelParams,
        batch: &TrainBatch,
        meta_set: &MetaBatch,
        lr: f64,
        target: MetaTarget,
    ) -> Result<MetaStepOutcome> {
        let h = self.hypergradient(student, projector, &meta.params, batch, meta_set, lr, target)?;
        match h.loss {
            None => {
                log::debug!("meta step skipped: pseudo student has no errors on the meta set");
                Ok(MetaStepOutcome {
                    loss: None,
                    subset_size: 0,
                })
            }
            Some(loss) => {
                meta.optimizer.step(&mut meta.params, &h.grads)?;
                Ok(MetaStepOutcome {
                    loss: Some(loss),
                    subset_size: h.subset_size,
                })
            }
        }
    }

    /// Per-sample weights for the outer step under `mode`, before the update.
    pub fn batch_weights(
        &self,
        mode: Mode,
        meta: &ModelParams,
        student_probs: &Tensor,
        batch: &TrainBatch,
        ensemble: &mut Ensembling<'_>,
    ) -> Result<BatchWeights> {
        let n = batch.len();
        let cfg = ensemble.config;
        let uncertainties: Vec<f64> = (0..n)
            .map(|r| entropy(student_probs.row(r), cfg.normalize_entropy))
            .collect();
        let weights = match mode {
            Mode::Static => vec![WeightPair::UNIT; n],
            Mode::UnDy => (0..n)
                .map(|r| {
                    uncertainty_weights(entropy(student_probs.row(r), true), self.meta_net.config.range)
                })
                .collect(),
            Mode::Mwn => self.meta_net.weights(meta, student_probs, &batch.teacher.probs)?,
            Mode::Hkd => {
                let fresh = self.meta_net.weights(meta, student_probs, &batch.teacher.probs)?;
                let mut out = Vec::with_capacity(n);
                for (r, w) in fresh.into_iter().enumerate() {
                    let id = batch.ids[r];
                    out.push(ensemble.store.ensemble(id, w, uncertainties[r], ensemble.step, cfg)?);
                }
                out
            }
        };
        let low = uncertainties.iter().filter(|&&u| u < cfg.threshold).count();
        Ok(BatchWeights {
            weights,
            frac_low_uncertainty: if n == 0 { 0.0 } else { low as f64 / n as f64 },
        })
    }

    /// One SGD step on student and projector with mode-specific weights.
    pub fn outer_step(
        &self,
        mode: Mode,
        state: &mut StudentState,
        meta: &ModelParams,
        batch: &TrainBatch,
        ensemble: &mut Ensembling<'_>,
        sgd: &OuterSgd,
    ) -> Result<OuterStepOutcome> {
        let tape = Tape::new();
        let s = state.student.bind(&tape);
        let p = state.projector.bind(&tape);
        let (terms, probs) = self.terms(&s, &p, batch)?;
        let bw = self.batch_weights(mode, meta, &probs.value(), batch, ensemble)?;
        let n = batch.len();
        let beta = Tensor::new(vec![n, 1], bw.weights.iter().map(|w| w.beta).collect())?;
        let gamma = Tensor::new(vec![n, 1], bw.weights.iter().map(|w| w.gamma).collect())?;
        let (loss, breakdown) = terms.combined(tape.constant(beta), tape.constant(gamma))?;
        let mut wrt = s.clone();
        wrt.extend_from_slice(&p);
        let mut grads = tape.grad_values(loss, &wrt)?;
        let proj_grads = grads.split_off(s.len());
        state
            .student_opt
            .step(&mut state.student, &grads, sgd.lr, sgd.momentum, sgd.weight_decay)?;
        state
            .projector_opt
            .step(&mut state.projector, &proj_grads, sgd.lr, sgd.momentum, sgd.weight_decay)?;
        Ok(OuterStepOutcome {
            breakdown,
            weights: bw.weights,
            frac_low_uncertainty: bw.frac_low_uncertainty,
        })
    }
}

/// Meta-set rows and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Indices of rows whose argmax differs from the label; ties go to the lowest class.
pub fn select_error_subset(probs: &Tensor, labels: &[usize]) -> Vec<usize> {
    probs
        .argmax_rows()
        .into_iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (pred, &label))| *pred != label)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    pub loss: Option<f64>,
    pub grads: Vec<Tensor>,
    pub subset_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaStepOutcome {
    pub loss: Option<f64>,
    pub subset_size: usize,
}

/// Meta-net parameters and their optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub params: ModelParams,
    pub optimizer: Adam,
}

impl MetaState {
    pub fn new(params: ModelParams, config: AdamConfig) -> Self {
        let optimizer = Adam::new(&params, config);
        Self { params, optimizer }
    }
}

/// Student and projector parameters with their momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub student: ModelParams,
    pub projector: ModelParams,
    pub student_opt: Sgd,
    pub projector_opt: Sgd,
}

impl StudentState {
    pub fn new(student: ModelParams, projector: ModelParams) -> Self {
        Self {
            student_opt: Sgd::new(&student),
            projector_opt: Sgd::new(&projector),
            student,
            projector,
        }
    }
}

/// Hyperparameters of one outer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Store, configuration and visit step used by the ensembler.
pub struct Ensembling<'a> {
    pub store: &'a mut WeightStore,
    pub config: &'a EnsembleConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchWeights {
    pub weights: Vec<WeightPair>,
    pub frac_low_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterStepOutcome {
    pub breakdown: LossBreakdown,
    pub weights: Vec<WeightPair>,
    pub frac_low_uncertainty: f64,
}
