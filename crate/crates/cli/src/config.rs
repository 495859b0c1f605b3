//! Resolved run configuration.
//!
//! Precedence is built-in defaults, then a config file, then command-line
//! overrides. The config file is TOML, or the `run.json` manifest of an
//! earlier run, whose resolved config is reused as is.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dpenet_core::analysis::FlopConvention;
use dpenet_core::data::SynthRainConfig;
use dpenet_core::networks::NetworkConfig;
use dpenet_core::training::TrainConfig;
use dpenet_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    #[default]
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(bits: u8) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training pairs: a `rain/` + `norain/` directory or a pair manifest.
    pub train: Option<PathBuf>,
    /// Evaluation pairs, same layout.
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub height: usize,
    pub width: usize,
    pub flop_convention: FlopConvention,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            height: 256,
            width: 256,
            flop_convention: FlopConvention::default(),
        }
    }
}

/// Size of a generated synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            count: 8,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    /// Forces 64-bit arithmetic and synchronous data loading.
    pub deterministic: bool,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthRainConfig,
    pub synth_dataset: SynthDatasetConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    /// Reads a TOML config or a run manifest. Relative dataset paths in a
    /// TOML file are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            return Ok(manifest.config);
        }
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.eval].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies deterministic mode and makes dataset paths absolute.
    pub fn finalize(&mut self) -> Result<()> {
        if self.deterministic {
            self.precision = Precision::F64;
            self.training.prefetch = 0;
        }
        for p in [&mut self.data.train, &mut self.data.eval].into_iter().flatten() {
            *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.synth.validate()?;
        let a = &self.analysis;
        if a.height == 0 || a.width == 0 {
            return Err(Error::config("analysis", "height and width must be >= 1"));
        }
        let s = &self.synth_dataset;
        if s.count == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::config("synth_dataset", "count, height and width must be >= 1"));
        }
        Ok(())
    }

    pub fn train_data(&self) -> Result<&Path> {
        existing("data.train", self.data.train.as_deref())
    }

    /// The evaluation set, or the training set when none is configured.
    pub fn eval_data(&self) -> Result<&Path> {
        match &self.data.eval {
            Some(p) => existing("data.eval", Some(p)),
            None => existing("data.eval", self.data.train.as_deref()),
        }
    }
}

fn existing<'a>(field: &str, path: Option<&'a Path>) -> Result<&'a Path> {
    match path {
        None => Err(Error::config(field, "no dataset given (use --data or the [data] table)")),
        Some(p) if !p.exists() => Err(Error::config(field, format!("{} does not exist", p.display()))),
        Some(p) => Ok(p),
    }
}
