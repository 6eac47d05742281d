//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use auxcount_core::groundtruth::LevelNorm;
use auxcount_core::losses::LossConfig;
use auxcount_core::model::{ModelConfig, Preset};
use auxcount_core::nn::AdamConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON Lines manifest; relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    /// Gaussian spread of each annotated object, in pixels.
    pub sigma: f64,
    pub flip_p: f64,
    pub level_norm: LevelNorm,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: PathBuf::from("data/manifest.jsonl"), sigma: 4.0, flip_p: 0.5, level_norm: LevelNorm::PerCrop }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps, if set.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    pub bn_momentum: f64,
    /// Writes `last.ckpt` every this many epochs (and always after the final one).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            lr_min: 0.0,
            schedule: Schedule::Cosine,
            epochs: 50,
            batch_size: 8,
            max_iterations: None,
            seed: 0,
            bn_momentum: 0.1,
            checkpoint_every: 1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ablation variant; when set it overrides `model.ablation` and the loss switches.
    pub preset: Option<Preset>,
    pub output_dir: PathBuf,
    /// Checkpoint whose `trunk.*` parameters initialize the trunk.
    pub pretrained_path: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            output_dir: PathBuf::from("runs/default"),
            pretrained_path: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// The large-scale profile: batch 96, 400 epochs.
    pub fn paper_scale() -> Self {
        let mut c = RunConfig::default();
        c.optim.batch_size = 96;
        c.optim.epochs = 400;
        c
    }

    /// Parses TOML text, applies overrides, resolves the preset and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        config.resolve()?;
        Ok(config)
    }

    /// Loads a config file; relative data and output paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.data.manifest);
        rebase(&mut config.output_dir);
        if let Some(p) = config.pretrained_path.as_mut() {
            rebase(p);
        }
        Ok(config)
    }

    pub fn resolve(&mut self) -> Result<()> {
        if let Some(p) = self.preset {
            p.apply(&mut self.model, &mut self.loss);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            bail!("optim.lr must be positive, got {}", o.lr);
        }
        if !(o.lr_min >= 0.0 && o.lr_min <= o.lr) {
            bail!("optim.lr_min must lie in [0, lr], got {}", o.lr_min);
        }
        if o.epochs == 0 || o.batch_size == 0 {
            bail!("optim.epochs and optim.batch_size must be at least 1");
        }
        if !(self.data.sigma > 0.0) || !(0.0..=1.0).contains(&self.data.flip_p) {
            bail!("data.sigma must be positive and data.flip_p in [0, 1]");
        }
        self.model.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override `{assignment}` is not key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key `{key}`");
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{part}` is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Rejects compute devices other than the CPU (`AUXCOUNT_DEVICE`).
pub fn check_device() -> Result<()> {
    match std::env::var("AUXCOUNT_DEVICE") {
        Ok(d) if !d.trim().eq_ignore_ascii_case("cpu") && !d.trim().is_empty() => {
            bail!("AUXCOUNT_DEVICE={d} is not available; only `cpu` is supported")
        }
        _ => Ok(()),
    }
}
