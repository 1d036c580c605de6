use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use adalab_core::adalabel::AdaLabelConfig;
use adalab_core::decode::DecodeConfig;
use adalab_core::model::ModelConfig;
use adalab_core::train::TrainConfig;
use adalab_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training corpus; required.
    pub train: Option<PathBuf>,
    /// Held-out corpus for early stopping; the training corpus when absent.
    pub valid: Option<PathBuf>,
    pub min_freq: u64,
    pub max_vocab: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bin_width: f64,
    pub rare_edges: Vec<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            min_freq: 1,
            max_vocab: None,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bin_width: 0.05,
            rare_edges: vec![0, 100, 1000, 10_000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adalabel: AdaLabelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
    /// Seeds initialization, batching and sampling; copied into
    /// `train.seed` and `decode.seed` on resolution.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            adalabel: AdaLabelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            metrics: MetricsConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if out.file_name().is_some() => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

impl ExperimentConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = std::fs::canonicalize(&base).unwrap_or(base);
        cfg.data.train = cfg.data.train.map(|p| absolutize(&base, &p));
        cfg.data.valid = cfg.data.valid.map(|p| absolutize(&base, &p));
        cfg.output_dir = absolutize(&base, &cfg.output_dir);
        Ok(cfg)
    }

    /// Applies the top-level seed and checks every section.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.decode.seed = self.seed;
        self.adalabel.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if !(self.metrics.bin_width > 0.0 && self.metrics.bin_width <= 1.0) {
            return Err(Error::config("metrics.bin_width", "must lie in (0, 1]"));
        }
        if self.metrics.rare_edges.len() < 2 || self.metrics.rare_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("metrics.rare_edges", "need at least two strictly increasing edges"));
        }
        match &self.data.train {
            None => return Err(Error::config("data.train", "a training corpus path is required")),
            Some(p) if !p.is_file() => {
                return Err(Error::config("data.train", format!("{} does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(p) = &self.data.valid {
            if !p.is_file() {
                return Err(Error::config("data.valid", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
