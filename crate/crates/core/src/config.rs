//! Run configuration: one strict JSON document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::AdapterConfig;
use crate::losses::LossConfig;
use crate::opa::OpaConfig;
use crate::retrieval::EvalConfig;
use crate::synth::GenConfig;
use crate::train::TrainConfig;
use crate::vit::EncoderConfig;

/// Stage directories. Unset entries default to a subdirectory of `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub opa: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub data: GenConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub opa: OpaConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// 64 px desk-scale setup used for end-to-end runs on one CPU.
    pub fn desk() -> Self {
        let mut c = RunConfig {
            encoder: EncoderConfig::desk(),
            ..Default::default()
        };
        c.adapter.d = 4;
        c.opa.output_size = 72;
        c.train.resize = 72;
        c.train.crop = 64;
        c.train.lr0 = 1e-2;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replaces the run seed everywhere it is copied.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.adapter.validate(&self.encoder)?;
        self.opa.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.encoder)?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config(
                "eval.ks must be a non-empty list of positive K".into(),
            ));
        }
        Ok(())
    }
}
