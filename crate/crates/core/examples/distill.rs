//! Trains a teacher once with the desk preset, then a student with each
//! distillation method from the same initialization, and prints the best
//! test accuracies.
//!
//! Usage: `distill [seeds]`

use std::path::PathBuf;

use amd_distill::cli::{resolve, ConfigSources};
use amd_distill::train::{distill_student, train_teacher, DistillConfig, Method, TrainConfig};

fn main() -> amd_distill::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(1, |s| s.parse().expect("integer seed count"));
    let preset = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets/desk_synth.cfg");
    let cfg = resolve(&ConfigSources {
        file: Some(preset),
        ..ConfigSources::default()
    })?;
    let (train, test) = cfg.data.load()?;

    let teacher = train_teacher(&cfg.teacher.spec(&cfg.data), &train, &test, &cfg.train, None)?;
    println!("teacher best {:.3}", teacher.record.best_test_acc());

    for seed in 0..seeds {
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let mut line = format!("seed {seed}");
        for method in [Method::Scratch, Method::Kd, Method::AmdG, Method::AmdGl] {
            let dcfg = DistillConfig {
                method,
                ..cfg.distill.config()
            };
            let run = distill_student(&teacher.eskd, &cfg.student.spec(&cfg.data), &dcfg, &train, &test, &tcfg, None)?;
            line.push_str(&format!("  {} {:.3}", method.name(), run.record.best_test_acc()));
        }
        println!("{line}");
    }
    Ok(())
}
