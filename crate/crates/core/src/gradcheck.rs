//! Finite-difference suite over every tape op, the losses, the models and
//! the hypergradient.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_diff_check, hessian_vector_check, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{cross_entropy_per_sample, hint_loss_per_sample, kd_vanilla_per_sample, LossTerms, MetaTarget, TeacherOutputs};
use crate::meta::{DistillSetup, MetaBatch, TrainBatch};
use crate::nn::{ClassifierSpec, ConvSpec, MetaNet, MetaNetConfig, ProjectorSpec};
use crate::rng::stream;

pub const FIRST_ORDER_TOLERANCE: f64 = 1e-5;
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-4;
pub const HYPERGRADIENT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const FIRST_STEP: f64 = 1e-5;
const SECOND_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    FirstOrder,
    SecondOrder,
    Hypergradient,
}

impl CheckKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::FirstOrder => FIRST_ORDER_TOLERANCE,
            CheckKind::SecondOrder => SECOND_ORDER_TOLERANCE,
            CheckKind::Hypergradient => HYPERGRADIENT_TOLERANCE,
        }
    }

    fn label(self) -> &'static str {
        match self {
            CheckKind::FirstOrder => "grad",
            CheckKind::SecondOrder => "hvp",
            CheckKind::Hypergradient => "hypergrad",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    /// Worst relative error over all seeds.
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.kind.tolerance()
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<10} {:<22} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "ok" } else { "FAIL" },
            self.kind.label(),
            self.name,
            self.max_relative_error,
            self.kind.tolerance()
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Magnitude at least 0.2, away from kinks at zero.
    AwayFromZero,
}

type OpFn = Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Domain)>,
    op: OpFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], op: OpFn) -> Case {
    Case {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        op,
    }
}

fn random(shape: &[usize], domain: Domain, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            match domain {
                Domain::Any => z,
                Domain::Positive => 0.3 + z.abs(),
                Domain::AwayFromZero => z.signum() * (0.2 + z.abs()),
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite sample")
}

fn op_cases() -> Vec<Case> {
    use Domain::*;
    let m34: &[usize] = &[3, 4];
    vec![
        case("add", &[(m34, Any), (m34, Any)], Box::new(|v| v[0].add(v[1]))),
        case("sub", &[(m34, Any), (m34, Any)], Box::new(|v| v[0].sub(v[1]))),
        case("mul", &[(m34, Any), (m34, Any)], Box::new(|v| v[0].mul(v[1]))),
        case("mul_scalar", &[(m34, Any), (&[1, 1], Any)], Box::new(|v| v[0].mul(v[1]))),
        case("matmul", &[(m34, Any), (&[4, 2], Any)], Box::new(|v| v[0].matmul(v[1]))),
        case("transpose", &[(m34, Any)], Box::new(|v| v[0].transpose())),
        case("relu", &[(m34, AwayFromZero)], Box::new(|v| v[0].relu())),
        case("sigmoid", &[(m34, Any)], Box::new(|v| v[0].sigmoid())),
        case("softmax", &[(m34, Any)], Box::new(|v| v[0].softmax())),
        case("clamp_min", &[(m34, AwayFromZero)], Box::new(|v| v[0].clamp_min(0.0))),
        case("ln", &[(m34, Positive)], Box::new(|v| v[0].ln())),
        case("log", &[(m34, Positive)], Box::new(|v| v[0].log())),
        case("recip", &[(m34, Positive)], Box::new(|v| v[0].recip())),
        case("exp", &[(m34, Any)], Box::new(|v| v[0].exp())),
        case("square", &[(m34, Any)], Box::new(|v| v[0].square())),
        case("scale", &[(m34, Any)], Box::new(|v| v[0].scale(-1.7))),
        case("add_scalar", &[(m34, Any)], Box::new(|v| v[0].add_scalar(0.3))),
        case("sum", &[(m34, Any)], Box::new(|v| v[0].sum())),
        case("mean", &[(m34, Any)], Box::new(|v| v[0].mean())),
        case("reshape", &[(m34, Any)], Box::new(|v| v[0].reshape(&[2, 6]))),
        case("row_sum", &[(m34, Any)], Box::new(|v| v[0].row_sum())),
        case("row_mean", &[(m34, Any)], Box::new(|v| v[0].row_mean())),
        case("gather_rows", &[(m34, Any)], Box::new(|v| v[0].gather_rows(&[2, 0, 2, 1]))),
        case("scatter_rows", &[(m34, Any)], Box::new(|v| v[0].scatter_rows(&[4, 1, 4], 5))),
        case(
            "gather",
            &[(m34, Any)],
            Box::new(|v| v[0].gather(vec![Some(5), None, Some(0), Some(5), Some(11), None], &[2, 3])),
        ),
        case(
            "scatter_add",
            &[(&[2, 3], Any)],
            Box::new(|v| v[0].scatter_add(vec![Some(1), Some(1), None, Some(0), Some(3), Some(1)], &[2, 2])),
        ),
        case(
            "concat",
            &[(&[3, 2], Any), (&[3, 3], Any)],
            Box::new(|v| v[0].tape().concat(&[v[0], v[1]])),
        ),
        case("slice_cols", &[(m34, Any)], Box::new(|v| v[0].slice_cols(1, 3))),
    ]
}

fn model_cases() -> Vec<Case> {
    use Domain::*;
    let mlp = ClassifierSpec::mlp(4, &[5, 3], 3, 0);
    let conv = ClassifierSpec {
        input_dim: 2 * 5 * 4,
        hidden_dims: vec![6],
        class_count: 3,
        feature_tap: 0,
        conv: Some(ConvSpec {
            channels: 2,
            height: 5,
            width: 4,
            filters: vec![3, 2],
        }),
    };
    let proj = ProjectorSpec { input_dim: 5, output_dim: 3 };
    let meta = MetaNet::new(MetaNetConfig { class_count: 3, hidden: 6, range: 0.5 }).expect("valid meta net");
    let shapes = |spec: &ClassifierSpec| -> Vec<Vec<usize>> {
        spec.init_params(&mut stream(0, "shapes")).tensors().map(|t| t.shape().to_vec()).collect()
    };
    let with_shapes = |lead: Vec<(Vec<usize>, Domain)>, params: Vec<Vec<usize>>| -> Vec<(Vec<usize>, Domain)> {
        lead.into_iter().chain(params.into_iter().map(|s| (s, Any))).collect()
    };
    let labels = [0usize, 2, 1, 2];
    let mut out = vec![
        case(
            "cross_entropy",
            &[(&[4, 3], Any)],
            Box::new(move |v| cross_entropy_per_sample(v[0], &labels)),
        ),
        case(
            "kd_vanilla",
            &[(&[4, 3], Any)],
            Box::new(|v| {
                let pt = Tensor::from_rows(&[
                    vec![0.7, 0.2, 0.1],
                    vec![0.1, 0.1, 0.8],
                    vec![0.3, 0.4, 0.3],
                    vec![0.05, 0.05, 0.9],
                ])?;
                kd_vanilla_per_sample(&pt, v[0].softmax()?, 1.0)
            }),
        ),
        case(
            "kd_vanilla_tempered",
            &[(&[4, 3], Any)],
            Box::new(|v| {
                let pt = Tensor::from_rows(&[
                    vec![0.7, 0.2, 0.1],
                    vec![0.1, 0.1, 0.8],
                    vec![0.3, 0.4, 0.3],
                    vec![0.05, 0.05, 0.9],
                ])?;
                kd_vanilla_per_sample(&pt, v[0].softmax()?, 2.5)
            }),
        ),
        case(
            "hint_loss",
            &[(&[4, 5], Any), (&[5, 3], Any), (&[1, 3], Any)],
            Box::new(move |v| {
                let ft = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
                hint_loss_per_sample(v[0], &ft, &proj, &v[1..])
            }),
        ),
    ];
    let m = mlp.clone();
    out.push(Case {
        name: "mlp_classifier",
        inputs: with_shapes(vec![(vec![4, 4], Any)], shapes(&mlp)),
        op: Box::new(move |v| {
            let p = m.forward(&v[1..], v[0])?;
            let t = v[0].tape();
            t.concat(&[p.logits, p.probs, p.feature])
        }),
    });
    let c = conv.clone();
    out.push(Case {
        name: "conv_classifier",
        inputs: with_shapes(vec![(vec![2, 40], Any)], shapes(&conv)),
        op: Box::new(move |v| {
            let p = c.forward(&v[1..], v[0])?;
            v[0].tape().concat(&[p.logits, p.feature])
        }),
    });
    let mn = meta.clone();
    out.push(Case {
        name: "meta_net",
        inputs: vec![
            (vec![4, 3], Any),
            (vec![4, 3], Any),
            (vec![6, 6], Any),
            (vec![1, 6], Any),
            (vec![6, 2], Any),
            (vec![1, 2], Any),
        ],
        op: Box::new(move |v| {
            let (b, g) = mn.forward(&v[2..], v[0].softmax()?, v[1].softmax()?)?;
            v[0].tape().concat(&[b, g])
        }),
    });
    let student = mlp.clone();
    out.push(Case {
        name: "combined_loss",
        inputs: with_shapes(
            vec![(vec![4, 1], Positive), (vec![4, 1], Positive), (vec![5, 3], Any), (vec![1, 3], Any)],
            shapes(&mlp),
        ),
        op: Box::new(move |v| {
            let t = v[0].tape();
            let x = t.constant(Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 * 0.61).cos()).collect())?);
            let pred = student.forward(&v[4..], x)?;
            let teacher = TeacherOutputs {
                probs: Tensor::from_rows(&[
                    vec![0.6, 0.3, 0.1],
                    vec![0.2, 0.2, 0.6],
                    vec![0.1, 0.8, 0.1],
                    vec![0.3, 0.3, 0.4],
                ])?,
                feature: Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.29).sin()).collect())?,
            };
            let terms = LossTerms::compute(&pred, &teacher, &labels, &proj, &v[2..4], 1.0)?;
            let (total, _) = terms.combined(v[0], v[1])?;
            Ok(total)
        }),
    });
    out
}

fn corrupted<'t>(out: Var<'t>, params: &[Var<'t>], corrupt: bool) -> Result<Var<'t>> {
    if !corrupt {
        return Ok(out);
    }
    // value unchanged, gradient of the first input shifted by 0.1
    let zero = params[0].sub(params[0].detach())?.sum()?.scale(0.1)?;
    out.add(zero)
}

fn run_case(c: &Case, seed: u64, corrupt: bool) -> Result<(GradCheckReport, GradCheckReport)> {
    let mut rng = stream(seed, c.name);
    let inputs: Vec<Tensor> = c.inputs.iter().map(|(s, d)| random(s, *d, &mut rng)).collect();
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        (c.op)(&vars)?.shape()
    };
    let w = random(&out_shape, Domain::Any, &mut rng);
    let w2 = random(&out_shape, Domain::Any, &mut rng);
    let direction: Vec<Tensor> = inputs.iter().map(|t| random(t.shape(), Domain::Any, &mut rng)).collect();
    let first = finite_diff_check(
        |tape, v| {
            let y = (c.op)(v)?;
            corrupted(y.mul(tape.constant(w.clone()))?.sum()?, v, corrupt)
        },
        &inputs,
        FIRST_STEP,
    )?;
    let second = hessian_vector_check(
        |tape, v| {
            let y = (c.op)(v)?;
            let f = y.square()?.mul(tape.constant(w2.clone()))?.sum()?;
            f.add(y.mul(tape.constant(w.clone()))?.sum()?)
        },
        &inputs,
        &direction,
        SECOND_STEP,
    )?;
    Ok((first, second))
}

/// Toy distillation problem for the hypergradient check; 95 meta-net parameters.
pub fn hypergradient_toy(seed: u64) -> (DistillSetup, crate::nn::ModelParams, crate::nn::ModelParams, crate::nn::ModelParams, TrainBatch, MetaBatch) {
    let classes = 3;
    let student = ClassifierSpec::mlp(4, &[5], classes, 0);
    let projector = ProjectorSpec { input_dim: 5, output_dim: 3 };
    let meta_net = MetaNet::new(MetaNetConfig { class_count: classes, hidden: 8, range: 0.5 }).expect("valid meta net");
    let setup = DistillSetup { student, projector, meta_net, temperature: 1.0 };
    let mut rng = stream(seed, "hypergradient");
    let s = setup.student.init_params(&mut rng);
    let p = setup.projector.init_params(&mut rng);
    let mut m = setup.meta_net.init_params(&mut rng);
    for name in ["out.weight", "out.bias"] {
        for v in m.get_mut(name).expect("meta output layer").data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let x = random(&[8, 4], Domain::Any, &mut rng);
    let logits = random(&[8, classes], Domain::Any, &mut rng);
    let probs = {
        let t = Tape::new();
        t.constant(logits).softmax().expect("finite").value()
    };
    let feature = random(&[8, 3], Domain::Any, &mut rng);
    let batch = TrainBatch {
        x,
        labels: (0..8).map(|i| i % classes).collect(),
        ids: (0..8).collect(),
        teacher: TeacherOutputs { probs, feature },
    };
    let meta_set = MetaBatch {
        x: random(&[9, 4], Domain::Any, &mut rng),
        labels: (0..9).map(|i| i % classes).collect(),
    };
    (setup, s, p, m, batch, meta_set)
}

fn hypergradient_check(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let (setup, s, p, m, batch, meta_set) = hypergradient_toy(seed);
    let params: Vec<Tensor> = m.tensors().cloned().collect();
    finite_diff_check(
        |tape, v| {
            let (loss, _) = setup.meta_objective(tape, &s, &p, v, &batch, &meta_set, 0.5, MetaTarget::TrueClass)?;
            corrupted(loss.unwrap_or_else(|| tape.scalar(0.0)), v, corrupt)
        },
        &params,
        FIRST_STEP,
    )
}

/// Runs every check over `seeds`. `corrupt` names a check whose analytic
/// gradient is deliberately shifted, as a negative control.
pub fn run_suite(seeds: &[u64], corrupt: Option<&str>) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for c in op_cases().iter().chain(model_cases().iter()) {
        let bad = corrupt == Some(c.name);
        let (mut first, mut second) = (0.0f64, 0.0f64);
        for &seed in seeds {
            let (f, s) = run_case(c, seed, bad)?;
            first = first.max(f.max_relative_error);
            second = second.max(s.max_relative_error);
        }
        report.results.push(CheckResult {
            name: c.name.to_string(),
            kind: CheckKind::FirstOrder,
            max_relative_error: first,
        });
        report.results.push(CheckResult {
            name: c.name.to_string(),
            kind: CheckKind::SecondOrder,
            max_relative_error: second,
        });
    }
    let bad = corrupt == Some("hypergradient");
    let mut worst = 0.0f64;
    for &seed in seeds {
        worst = worst.max(hypergradient_check(seed, bad)?.max_relative_error);
    }
    report.results.push(CheckResult {
        name: "hypergradient".to_string(),
        kind: CheckKind::Hypergradient,
        max_relative_error: worst,
    });
    Ok(report)
}

/// Names accepted by the corruption hook.
pub fn check_names() -> Vec<&'static str> {
    op_cases()
        .iter()
        .chain(model_cases().iter())
        .map(|c| c.name)
        .chain(std::iter::once("hypergradient"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let report = run_suite(&[7], None).unwrap();
        for r in &report.results {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn corruption_is_detected_and_named() {
        let report = run_suite(&[0], Some("softmax")).unwrap();
        let failed: Vec<_> = report.failures().map(|r| (r.name.as_str(), r.kind)).collect();
        assert_eq!(failed, vec![("softmax", CheckKind::FirstOrder)]);
    }
}
