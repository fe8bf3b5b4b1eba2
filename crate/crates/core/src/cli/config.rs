//! Run configuration: a TOML file with sections, then dotted overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amd::AmdConfig;
use crate::data::{load_cifar10, synth_splits, Dataset, MixupConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::{Family, ModelSpec, TapActivation};
use crate::kd::LossWeights;
use crate::train::{DistillConfig, Method, TrainConfig};

/// Environment variable that replaces `data.root`.
pub const DATA_ROOT_ENV: &str = "AMD_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub root: PathBuf,
    /// Keep only the first `n` training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synth: SynthSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Cifar10,
            root: PathBuf::from("data/cifar-10-batches-bin"),
            train_limit: None,
            test_limit: None,
            synth: SynthSpec::default(),
        }
    }
}

impl DataSection {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Synth => synth_splits(&self.synth)?,
            DataSource::Cifar10 => load_cifar10(&self.root)?,
        };
        let train = self.train_limit.map_or(train.clone(), |n| train.take(n));
        let test = self.test_limit.map_or(test.clone(), |n| test.take(n));
        Ok((train, test))
    }

    /// `(input shape, classes)` of the configured source.
    pub fn geometry(&self) -> ([usize; 3], usize) {
        match self.source {
            DataSource::Synth => {
                let s = &self.synth;
                ([s.channels, s.size, s.size], s.classes)
            }
            DataSource::Cifar10 => ([3, 32, 32], 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub tap_activation: TapActivation,
}

impl ModelSection {
    fn wrn(depth: usize, width: usize) -> Self {
        ModelSection {
            family: Family::Wrn,
            depth,
            width,
            tap_activation: TapActivation::PostRelu,
        }
    }

    pub fn spec(&self, data: &DataSection) -> ModelSpec {
        let (input, classes) = data.geometry();
        ModelSpec {
            tap_activation: self.tap_activation,
            ..ModelSpec::new(self.family, self.depth, self.width, classes, input)
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::wrn(16, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSelect {
    #[default]
    Eskd,
    Best,
    Last,
}

impl TeacherSelect {
    pub fn dir_name(self) -> &'static str {
        match self {
            TeacherSelect::Eskd => "eskd",
            TeacherSelect::Best => "best",
            TeacherSelect::Last => "last",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub method: Method,
    /// Explicit teacher checkpoint; otherwise `<out>/teacher/<teacher_select>`.
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_select: TeacherSelect,
    pub weights: LossWeights,
    pub amd: AmdConfig,
    pub mixup: MixupConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            method: d.method,
            teacher_checkpoint: None,
            teacher_select: TeacherSelect::default(),
            weights: d.weights,
            amd: d.amd,
            mixup: d.mixup,
        }
    }
}

impl DistillSection {
    pub fn config(&self) -> DistillConfig {
        DistillConfig {
            method: self.method,
            weights: self.weights.clone(),
            amd: self.amd.clone(),
            mixup: self.mixup.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bins: usize,
    /// Checkpoint to evaluate; otherwise `<out>/teacher/best`.
    pub checkpoint: Option<PathBuf>,
    /// Write per-tap attention maps of the first test batch.
    pub dump_attention: bool,
    pub dump_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bins: crate::metrics::DEFAULT_BINS,
            checkpoint: None,
            dump_attention: false,
            dump_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub train: TrainConfig,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            teacher: ModelSection::wrn(16, 3),
            student: ModelSection::wrn(16, 1),
            train: TrainConfig::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.config().validate()?;
        if self.data.source == DataSource::Synth {
            self.data.synth.validate()?;
        }
        if self.eval.bins == 0 {
            return Err(Error::Config("eval.bins must be positive".into()));
        }
        self.teacher.spec(&self.data).validate()?;
        self.student.spec(&self.data).validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Config sources in increasing precedence.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub data_root_env: Option<String>,
    /// `key.path=value` strings.
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
}

/// Defaults, then the file, then the data-root variable, then `--set`
/// overrides, then `--seed`.
pub fn resolve(src: &ConfigSources) -> Result<RunConfig> {
    let mut table = match &src.file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(root) = &src.data_root_env {
        set_path(&mut table, "data.root", toml::Value::String(root.clone()))?;
    }
    for kv in &src.overrides {
        apply_override(&mut table, kv)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if let Some(seed) = src.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // Anything that is not a TOML literal is taken as a bare string.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_path(table, key, value)
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.resolved.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_str(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, text).unwrap();
        resolve(&ConfigSources {
            file: Some(path),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
            ..ConfigSources::default()
        })
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = resolve_str("[train]\nepoch = 3\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(resolve_str("", &["distill.amd.gama=1"]).is_err());
    }

    #[test]
    fn overrides_take_precedence_over_file() {
        let cfg = resolve_str(
            "[train]\nseed = 3\nepochs = 4\nmilestones = [2]\n",
            &["train.seed=7", "distill.method=kd", "data.root=/x/y"],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.distill.method, crate::train::Method::Kd);
        assert_eq!(cfg.data.root, PathBuf::from("/x/y"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
