use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};
use hkd::config::RunConfig;
use hkd::gradcheck::{check_names, run_suite, DEFAULT_SEEDS};
use hkd::meta::Mode;
use hkd::train::{self, Control, Teacher, TEACHER_CHECKPOINT, VERSION};
use hkd::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_CHECK: u8 = 5;
const EXIT_INTERRUPTED: u8 = 130;

static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "hkd", version, about = "Knowledge distillation with meta-learned per-sample hint weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Teacher checkpoint for `distill` (default: <out>/teacher.ckpt).
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    /// Run directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// static | un-dy | mwn | hkd; overrides the config.
    #[arg(long, global = true)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher with cross-entropy only.
    TrainTeacher,
    /// Distill the teacher into a student under the selected mode.
    Distill,
    /// Summarize the weight curves of a run directory.
    ExportCurves {
        /// Run directory (default: --out).
        dir: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Shift the analytic gradient of one check, as a negative control.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::CheckpointMismatch(_)
        | Error::InsufficientSamples { .. }
        | Error::LabelOutOfRange { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        Error::Interrupted => EXIT_INTERRUPTED,
        Error::NonFinite { .. }
        | Error::InvalidDistribution(_)
        | Error::ShapeMismatch { .. }
        | Error::Contract(_) => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HKD_LOG", "info")).init();
    let cli = Cli::parse();
    if let Err(e) = ctrlc::set_handler(|| CANCEL.store(true, Ordering::SeqCst)) {
        log::warn!("Ctrl-C handler not installed: {e}");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

/// Effective config plus the text to snapshot into the run directory.
fn load_config(cli: &Cli) -> Result<(RunConfig, String), Error> {
    let (mut cfg, text) = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let cfg = RunConfig::default();
            let text = cfg.to_toml();
            (cfg, text)
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn prepare_run_dir(cfg: &RunConfig, text: &str, command: &str) -> Result<PathBuf, Error> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config { field: "out_dir".into(), message: "set `out_dir` or pass --out".into() })?;
    let io = |p: &Path, e| Error::Io { path: p.to_path_buf(), source: e };
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let snapshot = dir.join(format!("{command}.config.toml"));
    std::fs::write(&snapshot, text).map_err(|e| io(&snapshot, e))?;
    let args: Vec<String> = std::env::args().collect();
    let info = format!(
        "command = {command}\nseed = {}\nmode = {}\nversion = {VERSION}\nargs = {}\n",
        cfg.seed,
        cfg.mode,
        args.join(" ")
    );
    let run_txt = dir.join(format!("{command}.run.txt"));
    std::fs::write(&run_txt, info).map_err(|e| io(&run_txt, e))?;
    Ok(dir)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::TrainTeacher => {
            let (cfg, text) = load_config(cli)?;
            let dir = prepare_run_dir(&cfg, &text, "train-teacher")?;
            let splits = cfg.data.load(cfg.seed)?;
            let mut control = Control { out_dir: Some(dir.clone()), cancel: Some(&CANCEL), observer: None };
            let run = train::train_teacher(&cfg, &splits, &mut control)?;
            println!("teacher eval accuracy {:.4}; checkpoint {}", run.eval_accuracy, dir.join(TEACHER_CHECKPOINT).display());
        }
        Command::Distill => {
            let (cfg, text) = load_config(cli)?;
            let dir = prepare_run_dir(&cfg, &text, "distill")?;
            let splits = cfg.data.load(cfg.seed)?;
            let teacher_path = cli.teacher.clone().unwrap_or_else(|| dir.join(TEACHER_CHECKPOINT));
            let spec = train::teacher_spec(&cfg, &splits.train)?;
            let teacher = Teacher::load(&teacher_path, &spec)?;
            let mut control = Control { out_dir: Some(dir), cancel: Some(&CANCEL), observer: None };
            let run = train::distill(&cfg, &splits, &teacher, &mut control)?;
            println!(
                "{} eval accuracy {:.4} (best {:.4})",
                cfg.mode, run.eval_accuracy, run.best_eval_accuracy
            );
        }
        Command::ExportCurves { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).ok_or_else(|| Error::Config {
                field: "dir".into(),
                message: "pass a run directory".into(),
            })?;
            let export = train::export_curves(&dir)?;
            println!("epoch,beta_mean,beta_std,gamma_mean,gamma_std,frac_low_uncertainty");
            for r in &export.epochs {
                println!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.4}",
                    r.epoch, r.beta_mean, r.beta_std, r.gamma_mean, r.gamma_std, r.frac_low_uncertainty
                );
            }
            let (b, g) = export.epochwise_std();
            println!(
                "{} iterations, {} epochs; std across epochs: beta {b:.3e}, gamma {g:.3e}",
                export.iterations.len(),
                export.epochs.len()
            );
        }
        Command::Gradcheck { corrupt } => {
            if let Some(name) = corrupt {
                if !check_names().contains(&name.as_str()) {
                    return Err(Error::Config { field: "corrupt".into(), message: format!("unknown check `{name}`") }.into());
                }
            }
            let seeds: Vec<u64> = match cli.seed {
                Some(s) => (0..DEFAULT_SEEDS.len() as u64).map(|i| s.wrapping_add(i)).collect(),
                None => DEFAULT_SEEDS.to_vec(),
            };
            let report = run_suite(&seeds, corrupt.as_deref())?;
            for r in &report.results {
                println!("{r}");
            }
            let failed: Vec<String> = report.failures().map(|r| r.name.clone()).collect();
            if !failed.is_empty() {
                return Err(Failure::Check(format!("gradient check failed for: {}", failed.join(", "))));
            }
            println!("all {} checks passed", report.results.len());
        }
    }
    Ok(())
}
