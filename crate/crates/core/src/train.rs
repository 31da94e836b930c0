//! Teacher pre-training and distillation runs, with per-epoch checkpoints.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Splits};
use crate::data::{epoch_batches, Dataset};
use crate::ensemble::{WeightPair, WeightStore};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_per_sample, TeacherOutputs};
use crate::meta::{DistillSetup, Ensembling, MetaBatch, MetaState, OuterSgd, StudentState, TrainBatch};
use crate::metrics::{epoch_curves, mean_std, read_csv, write_csv, CurveRow, MetricsRow, CURVES_HEADER, METRICS_HEADER};
use crate::nn::{ClassifierSpec, MetaNet, ModelParams, ProjectorSpec};
use crate::optim::Sgd;
use crate::rng::stream;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.csv";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "weights.csv";
pub const EPOCH_CURVES_FILE: &str = "weights_epoch.csv";

/// Hooks called on the training thread.
pub trait Observer {
    fn iteration(&mut self, _iteration: usize, _state: &StudentState) {}
    /// Per-sample weights applied in the outer step of `iteration`.
    fn weights(&mut self, _iteration: usize, _weights: &[WeightPair]) {}
}

/// Optional output directory, cancellation flag and observer for a run.
#[derive(Default)]
pub struct Control<'a> {
    pub out_dir: Option<PathBuf>,
    pub cancel: Option<&'a AtomicBool>,
    pub observer: Option<&'a mut dyn Observer>,
}

impl Control<'_> {
    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.load(Ordering::SeqCst))
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }
}

fn spec_text(spec: &ClassifierSpec) -> String {
    toml::to_string(spec).expect("spec serializes")
}

/// Frozen, pre-trained teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub spec: ClassifierSpec,
    pub params: ModelParams,
}

impl Teacher {
    pub fn outputs(&self, x: &Tensor) -> Result<TeacherOutputs> {
        let pred = self.spec.predict(&self.params, x)?;
        Ok(TeacherOutputs {
            probs: pred.probs,
            feature: pred.feature,
        })
    }

    pub fn checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "teacher");
        ck.set_meta("spec", spec_text(&self.spec));
        ck.set_meta("seed", seed);
        ck.set_meta("version", VERSION);
        ck.set_meta("epoch", epoch);
        ck.put("teacher", &self.params);
        ck
    }

    /// Loads a teacher checkpoint and checks it against the configured architecture.
    pub fn load(path: &Path, expected: &ClassifierSpec) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta("kind")? != "teacher" {
            return Err(Error::CheckpointMismatch(format!("{} is not a teacher checkpoint", path.display())));
        }
        let stored: ClassifierSpec = toml::from_str(ck.meta("spec")?)
            .map_err(|e| Error::CheckpointMismatch(format!("unreadable teacher spec: {e}")))?;
        if &stored != expected {
            return Err(Error::CheckpointMismatch(format!(
                "teacher architecture {stored:?} does not match the configured {expected:?}"
            )));
        }
        let mut params = expected.init_params(&mut stream(0, "shape-only"));
        ck.restore_into("teacher", &mut params)?;
        Ok(Self {
            spec: stored,
            params,
        })
    }
}

/// Architecture and parameters of a teacher or student checkpoint.
pub fn load_classifier(path: &Path) -> Result<(ClassifierSpec, ModelParams)> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.meta("kind")?;
    if kind != "teacher" && kind != "student" {
        return Err(Error::CheckpointMismatch(format!("{} holds no classifier (kind `{kind}`)", path.display())));
    }
    let spec: ClassifierSpec = toml::from_str(ck.meta("spec")?)
        .map_err(|e| Error::CheckpointMismatch(format!("unreadable spec: {e}")))?;
    spec.validate()?;
    let mut params = spec.init_params(&mut stream(0, "shape-only"));
    ck.restore_into(kind, &mut params)?;
    Ok((spec, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRun {
    pub teacher: Teacher,
    pub metrics: Vec<MetricsRow>,
    pub eval_accuracy: f64,
}

pub fn teacher_spec(cfg: &RunConfig, data: &Dataset) -> Result<ClassifierSpec> {
    cfg.teacher.model().spec(data.sample_shape(), data.class_count(), "teacher")
}

pub fn student_spec(cfg: &RunConfig, data: &Dataset) -> Result<ClassifierSpec> {
    cfg.student.spec(data.sample_shape(), data.class_count(), "student")
}

fn batch_x(data: &Dataset, idx: &[usize], cfg: &RunConfig, epoch: usize) -> Tensor {
    let mut x = data.features().select_rows(idx);
    let ids: Vec<u64> = idx.iter().map(|&i| data.ids()[i]).collect();
    cfg.data
        .augment
        .apply(&mut x, &ids, data.sample_shape(), cfg.seed, epoch);
    x
}

/// Cross-entropy training of the teacher on the training and meta samples.
pub fn train_teacher(cfg: &RunConfig, splits: &Splits, control: &mut Control<'_>) -> Result<TeacherRun> {
    let data = splits.full_train()?;
    let spec = teacher_spec(cfg, &data)?;
    let mut teacher = Teacher {
        params: spec.init_params(&mut stream(cfg.seed, "teacher.init")),
        spec,
    };
    let opt_cfg = &cfg.teacher.optimizer;
    let mut opt = Sgd::new(&teacher.params);
    let mut metrics = Vec::new();
    let mut eval_accuracy = teacher.spec.accuracy(&teacher.params, splits.eval.features(), splits.eval.labels())?;
    let mut iteration = 0;
    let save = |teacher: &Teacher, metrics: &[MetricsRow], epoch: usize| -> Result<()> {
        if let Some(p) = control.path(TEACHER_CHECKPOINT) {
            teacher.checkpoint(cfg.seed, epoch).save(&p)?;
            write_csv(&control.path(TEACHER_METRICS).unwrap(), METRICS_HEADER, metrics)?;
        }
        Ok(())
    };
    save(&teacher, &metrics, 0)?;
    for epoch in 0..cfg.teacher_epochs() {
        let lr = opt_cfg.lr_at(epoch);
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            if control.cancelled() {
                save(&teacher, &metrics, epoch)?;
                return Err(Error::Interrupted);
            }
            let x = batch_x(&data, &idx, cfg, epoch);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let tape = Tape::new();
            let vars = teacher.params.bind(&tape);
            let pred = teacher.spec.forward(&vars, tape.constant(x))?;
            let loss = cross_entropy_per_sample(pred.logits, &labels)?.mean()?;
            let grads = tape.grad_values(loss, &vars)?;
            opt.step(&mut teacher.params, &grads, lr, opt_cfg.momentum, opt_cfg.weight_decay)?;
            let ce = loss.item();
            metrics.push(MetricsRow {
                iteration,
                epoch,
                ce,
                kd_van: 0.0,
                kd_aux: 0.0,
                total: ce,
                beta_mean: None,
                gamma_mean: None,
                meta_loss: None,
                error_subset_size: None,
                eval_acc: None,
            });
            iteration += 1;
        }
        eval_accuracy = teacher.spec.accuracy(&teacher.params, splits.eval.features(), splits.eval.labels())?;
        if let Some(last) = metrics.last_mut() {
            last.eval_acc = Some(eval_accuracy);
        }
        log::info!("teacher epoch {epoch}: eval accuracy {eval_accuracy:.4}");
        save(&teacher, &metrics, epoch + 1)?;
    }
    Ok(TeacherRun {
        teacher,
        metrics,
        eval_accuracy,
    })
}

/// Final state and logs of a distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillRun {
    pub setup: DistillSetup,
    pub state: StudentState,
    pub meta: MetaState,
    pub store: WeightStore,
    pub metrics: Vec<MetricsRow>,
    pub curves: Vec<CurveRow>,
    pub eval_accuracy: f64,
    pub best_eval_accuracy: f64,
}

/// Builds the setup and initial states exactly as [`distill`] does.
pub fn init_distill(
    cfg: &RunConfig,
    splits: &Splits,
    teacher: &Teacher,
) -> Result<(DistillSetup, StudentState, MetaState)> {
    let student = student_spec(cfg, &splits.train)?;
    if teacher.spec.class_count != student.class_count || teacher.spec.input_dim != student.input_dim {
        return Err(Error::CheckpointMismatch("teacher and student disagree on input or classes".into()));
    }
    let projector = ProjectorSpec {
        input_dim: student.feature_dim(),
        output_dim: teacher.spec.feature_dim(),
    };
    let meta_net = MetaNet::new(cfg.meta.net(student.class_count))?;
    let s = student.init_params(&mut stream(cfg.seed, "student.init"));
    let p = projector.init_params(&mut stream(cfg.seed, "projector.init"));
    let m = meta_net.init_params(&mut stream(cfg.seed, "metanet.init"));
    let setup = DistillSetup {
        student,
        projector,
        meta_net,
        temperature: cfg.temperature,
    };
    Ok((setup, StudentState::new(s, p), MetaState::new(m, cfg.meta.optimizer.clone())))
}

fn student_checkpoint(
    cfg: &RunConfig,
    run: &DistillRun,
    epoch: usize,
    iteration: usize,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "student");
    ck.set_meta("mode", cfg.mode);
    ck.set_meta("seed", cfg.seed);
    ck.set_meta("version", VERSION);
    ck.set_meta("epoch", epoch);
    ck.set_meta("iteration", iteration);
    ck.set_meta("spec", spec_text(&run.setup.student));
    // the output location is not part of the run's identity
    let mut snapshot = cfg.clone();
    snapshot.out_dir = None;
    ck.set_meta("config", snapshot.to_toml());
    ck.set_meta("meta_steps", run.meta.optimizer.steps());
    ck.put("student", &run.state.student);
    ck.put("projector", &run.state.projector);
    ck.put("metanet", &run.meta.params);
    let named = |params: &ModelParams, values: &[Tensor]| {
        let mut out = ModelParams::new();
        for ((name, _), v) in params.iter().zip(values) {
            out.push(name, v.clone());
        }
        out
    };
    ck.put("momentum.student", &named(&run.state.student, run.state.student_opt.velocity()));
    ck.put("momentum.projector", &named(&run.state.projector, run.state.projector_opt.velocity()));
    let (m1, m2) = run.meta.optimizer.moments();
    ck.put("adam.first", &named(&run.meta.params, m1));
    ck.put("adam.second", &named(&run.meta.params, m2));
    ck.store = run.store.clone();
    ck
}

fn write_logs(control: &Control<'_>, run: &DistillRun) -> Result<()> {
    if let Some(p) = control.path(METRICS_FILE) {
        write_csv(&p, METRICS_HEADER, &run.metrics)?;
        write_csv(&control.path(CURVES_FILE).unwrap(), CURVES_HEADER, &run.curves)?;
        write_csv(&control.path(EPOCH_CURVES_FILE).unwrap(), CURVES_HEADER, &epoch_curves(&run.curves))?;
    }
    Ok(())
}

/// Distills `teacher` into a fresh student under `cfg.mode`.
///
/// The meta step runs before the outer step of every iteration selected by
/// the inner-loop interval. A numerical failure leaves the last epoch's
/// checkpoint on disk; an interruption writes the current state first.
pub fn distill(cfg: &RunConfig, splits: &Splits, teacher: &Teacher, control: &mut Control<'_>) -> Result<DistillRun> {
    let (setup, state, meta) = init_distill(cfg, splits, teacher)?;
    let train = &splits.train;
    let cached = if cfg.data.augment.is_none() {
        Some(teacher.outputs(train.features())?)
    } else {
        None
    };
    let meta_batch = MetaBatch {
        x: splits.meta.features().clone(),
        labels: splits.meta.labels().to_vec(),
    };
    let inner = cfg.meta.inner();
    let mut run = DistillRun {
        setup,
        state,
        meta,
        store: WeightStore::new(),
        metrics: Vec::new(),
        curves: Vec::new(),
        eval_accuracy: 0.0,
        best_eval_accuracy: f64::NEG_INFINITY,
    };
    run.eval_accuracy = run
        .setup
        .student
        .accuracy(&run.state.student, splits.eval.features(), splits.eval.labels())?;
    let mut iteration = 0;
    let result = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            let lr = cfg.optimizer.lr_at(epoch);
            let sgd = OuterSgd {
                lr,
                momentum: cfg.optimizer.momentum,
                weight_decay: cfg.optimizer.weight_decay,
            };
            for idx in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
                if control.cancelled() {
                    if let Some(p) = control.path(STUDENT_CHECKPOINT) {
                        student_checkpoint(cfg, &run, epoch, iteration).save(&p)?;
                    }
                    return Err(Error::Interrupted);
                }
                let x = batch_x(train, &idx, cfg, epoch);
                let teacher_out = match &cached {
                    Some(t) => TeacherOutputs {
                        probs: t.probs.select_rows(&idx),
                        feature: t.feature.select_rows(&idx),
                    },
                    None => teacher.outputs(&x)?,
                };
                let batch = TrainBatch {
                    x,
                    labels: idx.iter().map(|&i| train.labels()[i]).collect(),
                    ids: idx.iter().map(|&i| train.ids()[i]).collect(),
                    teacher: teacher_out,
                };
                let mut meta_outcome = None;
                if cfg.mode.uses_meta_net() && inner.is_meta_iteration(iteration) {
                    if meta_batch.labels.is_empty() {
                        log::debug!("meta step skipped at iteration {iteration}: empty meta set");
                    } else {
                        let pseudo_lr = inner.pseudo_lr.unwrap_or(lr);
                        meta_outcome = Some(run.setup.meta_step(
                            &mut run.meta,
                            &run.state.student,
                            &run.state.projector,
                            &batch,
                            &meta_batch,
                            pseudo_lr,
                            inner.target,
                        )?);
                    }
                }
                let mut ens = Ensembling {
                    store: &mut run.store,
                    config: &cfg.ensemble,
                    step: epoch as u64,
                };
                let out = run
                    .setup
                    .outer_step(cfg.mode, &mut run.state, &run.meta.params, &batch, &mut ens, &sgd)?;
                let curve = CurveRow::from_batch(epoch, iteration, &out.weights, out.frac_low_uncertainty);
                let b = out.breakdown;
                run.metrics.push(MetricsRow {
                    iteration,
                    epoch,
                    ce: b.ce,
                    kd_van: b.kd_van,
                    kd_aux: b.kd_aux,
                    total: b.total,
                    beta_mean: Some(curve.beta_mean),
                    gamma_mean: Some(curve.gamma_mean),
                    meta_loss: meta_outcome.and_then(|m| m.loss),
                    error_subset_size: meta_outcome.map(|m| m.subset_size),
                    eval_acc: None,
                });
                run.curves.push(curve);
                if let Some(obs) = control.observer.as_deref_mut() {
                    obs.weights(iteration, &out.weights);
                    obs.iteration(iteration, &run.state);
                }
                iteration += 1;
            }
            let acc = run
                .setup
                .student
                .accuracy(&run.state.student, splits.eval.features(), splits.eval.labels())?;
            run.eval_accuracy = acc;
            if let Some(last) = run.metrics.last_mut() {
                last.eval_acc = Some(acc);
            }
            log::info!("{} epoch {epoch}: eval accuracy {acc:.4}", cfg.mode);
            if let Some(p) = control.path(STUDENT_CHECKPOINT) {
                let ck = student_checkpoint(cfg, &run, epoch + 1, iteration);
                ck.save(&p)?;
                if acc > run.best_eval_accuracy {
                    ck.save(&control.path(BEST_CHECKPOINT).unwrap())?;
                }
            }
            run.best_eval_accuracy = run.best_eval_accuracy.max(acc);
        }
        Ok(())
    })();
    if run.best_eval_accuracy == f64::NEG_INFINITY {
        run.best_eval_accuracy = run.eval_accuracy;
    }
    let logged = write_logs(control, &run);
    result?;
    logged?;
    if cfg.epochs == 0 {
        if let Some(p) = control.path(STUDENT_CHECKPOINT) {
            student_checkpoint(cfg, &run, 0, 0).save(&p)?;
        }
    }
    Ok(run)
}

/// Iteration-level and epoch-averaged weight curves of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveExport {
    pub iterations: Vec<CurveRow>,
    pub epochs: Vec<CurveRow>,
}

impl CurveExport {
    /// Population std across epochs of the epoch-mean beta and gamma.
    pub fn epochwise_std(&self) -> (f64, f64) {
        let (_, b) = mean_std(self.epochs.iter().map(|r| r.beta_mean));
        let (_, g) = mean_std(self.epochs.iter().map(|r| r.gamma_mean));
        (b, g)
    }
}

/// Reads the iteration-level weight log in `dir` and rewrites the epoch summary.
pub fn export_curves(dir: &Path) -> Result<CurveExport> {
    let path = dir.join(CURVES_FILE);
    if !path.is_file() {
        let msg = format!(
            "no weight log found; a run directory holds {METRICS_FILE}, {CURVES_FILE}, {EPOCH_CURVES_FILE} and {STUDENT_CHECKPOINT}"
        );
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, msg)));
    }
    let iterations: Vec<CurveRow> = read_csv(&path, CURVES_HEADER)?;
    let epochs = epoch_curves(&iterations);
    write_csv(&dir.join(EPOCH_CURVES_FILE), CURVES_HEADER, &epochs)?;
    Ok(CurveExport { iterations, epochs })
}

/// Shorthand for runs without output files or hooks.
pub fn distill_in_memory(cfg: &RunConfig, splits: &Splits, teacher: &Teacher) -> Result<DistillRun> {
    distill(cfg, splits, teacher, &mut Control::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::Mode;

    fn tiny(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::from_toml_str(
            r#"
            epochs = 2
            batch_size = 16
            [data]
            classes = 3
            dim = 4
            train_per_class = 20
            eval_per_class = 10
            meta_per_class = 3
            separation = 2.0
            [teacher]
            hidden = [12, 12]
            feature_tap = 1
            epochs = 3
            [student]
            hidden = [4]
            [meta]
            interval = 2
            hidden = 8
            "#,
        )
        .unwrap();
        cfg.mode = mode;
        cfg
    }

    #[test]
    fn zero_epochs_returns_initial_student() {
        let mut cfg = tiny(Mode::Hkd);
        let splits = cfg.data.load(cfg.seed).unwrap();
        let t = train_teacher(&cfg, &splits, &mut Control::default()).unwrap();
        cfg.epochs = 0;
        let run = distill_in_memory(&cfg, &splits, &t.teacher).unwrap();
        let (_, init, _) = init_distill(&cfg, &splits, &t.teacher).unwrap();
        assert_eq!(run.state, init);
        assert!(run.metrics.is_empty());
    }

    #[test]
    fn every_mode_runs_and_logs() {
        let cfg = tiny(Mode::Static);
        let splits = cfg.data.load(cfg.seed).unwrap();
        let t = train_teacher(&cfg, &splits, &mut Control::default()).unwrap();
        for mode in Mode::ALL {
            let mut c = cfg.clone();
            c.mode = mode;
            let run = distill_in_memory(&c, &splits, &t.teacher).unwrap();
            // 51 training samples in batches of 16
            assert_eq!(run.metrics.len(), 8);
            assert!(run.metrics[3].eval_acc.is_some() && run.metrics[2].eval_acc.is_none());
            let metas = run.metrics.iter().filter(|m| m.error_subset_size.is_some()).count();
            assert_eq!(metas, if mode.uses_meta_net() { 3 } else { 0 });
            assert!(run.curves.iter().all(|c| (0.5..=1.5).contains(&c.beta_mean)));
            assert_eq!(run.store.is_empty(), mode != Mode::Hkd);
        }
    }

    #[test]
    fn cancellation_writes_checkpoint() {
        let cfg = tiny(Mode::Hkd);
        let splits = cfg.data.load(cfg.seed).unwrap();
        let t = train_teacher(&cfg, &splits, &mut Control::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let flag = AtomicBool::new(true);
        let mut control = Control {
            out_dir: Some(dir.path().to_path_buf()),
            cancel: Some(&flag),
            observer: None,
        };
        assert!(matches!(distill(&cfg, &splits, &t.teacher, &mut control), Err(Error::Interrupted)));
        assert!(dir.path().join(STUDENT_CHECKPOINT).exists());
        assert!(dir.path().join(METRICS_FILE).exists());
    }

    #[test]
    fn teacher_checkpoint_round_trip_and_mismatch() {
        let cfg = tiny(Mode::Hkd);
        let splits = cfg.data.load(cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut control = Control {
            out_dir: Some(dir.path().to_path_buf()),
            ..Control::default()
        };
        let t = train_teacher(&cfg, &splits, &mut control).unwrap();
        let path = dir.path().join(TEACHER_CHECKPOINT);
        let loaded = Teacher::load(&path, &t.teacher.spec).unwrap();
        assert_eq!(loaded, t.teacher);
        let mut other = t.teacher.spec.clone();
        other.hidden_dims[0] += 1;
        assert!(matches!(Teacher::load(&path, &other), Err(Error::CheckpointMismatch(_))));
    }
}
