//! Command-line entry point behind the `amd` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::amd::Fault;
use crate::attention::attention_map;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, reliability_diagram, write_reliability_csv};
use crate::nn::Model;
use crate::tensor::Tape;
use crate::train::{distill_student, repeat_runs, train_teacher, RunRecord};
use crate::verify::run_verify;
pub use config::{resolve, ConfigSources, RunConfig, DATA_ROOT_ENV};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "amd", version, about = "Angular-margin attention distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher from scratch; writes <out>/teacher/.
    TrainTeacher(RunArgs),
    /// Train students against a saved teacher; writes <out>/student-<method>/.
    Distill(RunArgs),
    /// Accuracy, ECE, NLL and a reliability table for one checkpoint.
    Eval(RunArgs),
    /// Check the library against scalar reference implementations.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.seed=7`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::UnknownTap(_)
        | Error::Pairing(_)
        | Error::OddSpatial { .. } => EXIT_CONFIG,
        Error::Io { .. }
        | Error::DataLength { .. }
        | Error::Data(_)
        | Error::Format(_)
        | Error::Json(_)
        | Error::LabelOutOfRange { .. } => EXIT_DATA,
        Error::NonFinite { .. }
        | Error::NonFiniteGradient { .. }
        | Error::Divergence { .. }
        | Error::DegenerateAttention { .. }
        | Error::LogDomain { .. }
        | Error::DivisionByZero => EXIT_NUMERIC,
        _ => 1,
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::TrainTeacher(a) => load(a).and_then(|(cfg, out)| cmd_train_teacher(&cfg, &out)),
        Command::Distill(a) => load(a).and_then(|(cfg, out)| cmd_distill(&cfg, &out)),
        Command::Eval(a) => load(a).and_then(|(cfg, out)| cmd_eval(&cfg, &out)),
        Command::Verify(a) => return cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn main() -> ExitCode {
    main_with(Cli::parse())
}

fn load(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let cfg = resolve(&ConfigSources {
        file: args.config.clone(),
        data_root_env: std::env::var(DATA_ROOT_ENV).ok(),
        overrides: args.set.clone(),
        seed: args.seed,
    })?;
    Ok((cfg, args.out.clone()))
}

fn print_record(record: &RunRecord) {
    for e in &record.epochs {
        println!(
            "{} epoch {:>3}  lr {:.4}  loss {:.4}  train {:.3}  test {:.3}  {:.1}s",
            record.label, e.epoch, e.lr, e.losses.total, e.train_acc, e.test_acc, e.wall_time_s
        );
    }
}

pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = out.join("teacher");
    config::write_resolved(cfg, &dir)?;
    let (train, test) = cfg.data.load()?;
    let spec = cfg.teacher.spec(&cfg.data);
    let run = train_teacher(&spec, &train, &test, &cfg.train, Some(&dir))?;
    print_record(&run.record);
    println!(
        "teacher {} best test accuracy {:.4}; checkpoints in {}",
        spec.name(),
        run.record.best_test_acc(),
        dir.display()
    );
    Ok(())
}

pub fn teacher_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.distill
        .teacher_checkpoint
        .clone()
        .unwrap_or_else(|| out.join("teacher").join(cfg.distill.teacher_select.dir_name()))
}

/// Runs `train.repeats` seeds starting at `train.seed`, one directory each.
pub fn cmd_distill(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dcfg = cfg.distill.config();
    let dir = out.join(format!("student-{}", dcfg.method.name()));
    let teacher_dir = teacher_path(cfg, out);
    let (teacher, _) = Model::<f32>::load_checkpoint(&teacher_dir)?;
    config::write_resolved(cfg, &dir)?;
    let (train, test) = cfg.data.load()?;
    let spec = cfg.student.spec(&cfg.data);
    let (summary, _) = repeat_runs(cfg.train.repeats, cfg.train.seed, |seed| {
        let tcfg = crate::train::TrainConfig { seed, ..cfg.train.clone() };
        let run_dir = dir.join(format!("seed-{seed}"));
        let run = distill_student(&teacher, &spec, &dcfg, &train, &test, &tcfg, Some(&run_dir))?;
        print_record(&run.record);
        Ok(run.record)
    })?;
    let path = dir.join("repeats.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(path, e))?;
    println!(
        "{} over {} seeds: mean best accuracy {:.4} ± {:.4}",
        dcfg.method.name(),
        summary.seeds.len(),
        summary.mean,
        summary.std
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("teacher").join("best"));
    let (model, _) = Model::<f32>::load_checkpoint(&ckpt)?;
    let (_, test) = cfg.data.load()?;
    let dir = out.join("eval");
    config::write_resolved(cfg, &dir)?;
    let report = evaluate(&model, &test, cfg.eval.bins, cfg.train.eval_batch_size)?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(path, e))?;
    write_reliability_csv(dir.join("reliability.csv"), &reliability_diagram(&report))?;
    if cfg.eval.dump_attention {
        dump_attention(&model, &test, cfg, &dir.join("attention"))?;
    }
    println!(
        "{}: accuracy {:.4}  ECE {:.2}%  NLL {:.4}  ({} samples, {} bins)",
        ckpt.display(),
        report.accuracy,
        report.ece_percent,
        report.nll,
        report.n,
        cfg.eval.bins
    );
    Ok(())
}

/// One `<tap>.amdt` file of shape `[n, 1, h, w]` per tap.
fn dump_attention(model: &Model<f32>, test: &crate::data::Dataset, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = cfg.eval.dump_samples.min(test.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = test.gather(&idx)?;
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x);
    let fwd = model.forward_frozen(&mut tape, xv)?;
    for tap in &fwd.taps {
        let f = attention_map(&mut tape, tap.activation, cfg.distill.amd.d)?;
        tape.value(f)?.save(dir.join(format!("{}.amdt", tap.layer)))?;
    }
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> ExitCode {
    let fault = match args.fault.as_deref() {
        None | Some("none") => Fault::None,
        Some("flip-student-g") => Fault::FlipStudentG,
        Some(other) => {
            eprintln!("error: unknown fault `{other}`");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let report = run_verify(fault);
    print!("{}", report.table());
    if report.passed() {
        println!("all checks passed");
        ExitCode::SUCCESS
    } else {
        println!("verification FAILED");
        ExitCode::from(EXIT_VERIFY)
    }
}
