//! Run configuration documents (TOML).
//!
//! ```toml
//! stage = "vdn"
//!
//! [paths]
//! data = "runs/desk"          # synth output dir, manifest.tsv, or dataset root
//! out = "runs/vdn.ckpt"
//! blur_ckpt = "runs/blur.ckpt"
//! pinv_ckpt = "runs/pinv.ckpt"
//!
//! [model]
//! scale = "tiny"
//! ablation = "full"
//!
//! [train]
//! epochs = 2
//!
//! [loss]
//! lambda_vae = 0.05
//!
//! [synth]
//! velocity = 1
//! ```
//!
//! Every section is optional and falls back to the documented defaults.
//! `[blur]`, `[pinv]` and `[vdn]` replace the architecture chosen by `[model]`
//! wholesale when present.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blur::BlurModelConfig;
use crate::data::{Layout, SynthSpec};
use crate::engine::{ModelConfigs, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::pinv::PinvModelConfig;
use crate::types::LossWeights;
use crate::vdn::{Ablation, VdnConfig};

pub const CACHE_ENV: &str = "VDPI_CACHE";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    /// Layout of `data` when it is a raw dataset root rather than a manifest.
    pub layout: Option<Layout>,
    pub out: Option<PathBuf>,
    pub blur_ckpt: Option<PathBuf>,
    pub pinv_ckpt: Option<PathBuf>,
    pub vdn_ckpt: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Intermediate artifacts; `VDPI_CACHE` is used when unset.
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Tiny,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scale: Scale,
    pub channels: usize,
    pub frames: usize,
    pub ablation: Ablation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            scale: Scale::Tiny,
            channels: 3,
            frames: 5,
            ablation: Ablation::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub stage: Stage,
    pub paths: Paths,
    pub model: ModelSection,
    /// `stage` and `loss` live at the top level; setting them here is rejected.
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub synth: SynthSpec,
    pub blur: Option<BlurModelConfig>,
    pub pinv: Option<PinvModelConfig>,
    pub vdn: Option<VdnConfig>,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            stage: Stage::Blur,
            paths: Paths::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            synth: SynthSpec::default(),
            blur: None,
            pinv: None,
            vdn: None,
        }
    }
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(t)) = raw.get("train") {
            for key in ["stage", "loss"] {
                if t.contains_key(key) {
                    return Err(Error::Config(format!("`train.{key}` is not allowed; set `{key}` at the top level")));
                }
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::try_from(self).expect("config serializes");
        if let Some(toml::Value::Table(train)) = t.get_mut("train") {
            train.remove("stage");
            train.remove("loss");
        }
        toml::to_string_pretty(&t).expect("config serializes")
    }

    /// Copies the top-level stage and loss into `train`.
    fn sync(&mut self) {
        self.train.stage = self.stage;
        self.train.loss = self.loss;
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.sync();
    }

    /// Overrides the ablation everywhere, including an explicit `[vdn]` table.
    pub fn set_ablation(&mut self, a: Ablation) {
        self.model.ablation = a;
        if let Some(v) = &mut self.vdn {
            v.flags = a.flags();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        self.models()?;
        Ok(())
    }

    pub fn models(&self) -> Result<ModelConfigs> {
        let m = &self.model;
        if m.channels == 0 || m.frames == 0 || m.frames % 2 == 0 {
            return Err(Error::Config(format!(
                "model needs ≥ 1 channel and an odd frame count, got {} / {}",
                m.channels, m.frames
            )));
        }
        let mut out = match m.scale {
            Scale::Tiny => ModelConfigs::tiny(m.channels, m.frames, m.ablation),
            Scale::Paper => ModelConfigs::paper(m.channels, m.frames, m.ablation),
        };
        if let Some(b) = &self.blur {
            out.blur = b.clone();
            out.pinv = PinvModelConfig::matching(b);
        }
        if let Some(p) = &self.pinv {
            out.pinv = p.clone();
        }
        if let Some(v) = &self.vdn {
            out.vdn = v.clone();
        }
        out.blur.validate()?;
        out.pinv.validate()?;
        out.vdn.validate()?;
        Ok(out)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.stage = self.stage;
        t.loss = self.loss;
        t
    }

    /// Serialized form stored in checkpoint metadata and hashed for provenance.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.paths.cache.clone().or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }
}
