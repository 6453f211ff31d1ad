//! Binary checkpoints: `b"VDPI"`, u32 version, u64 metadata length, JSON
//! metadata, then every array as little-endian f32 in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Stage, TrainConfig};
use crate::blur::{BlurModel, BlurModelConfig};
use crate::error::{Error, Result};
use crate::pinv::{PinvModel, PinvModelConfig};
use crate::tensor::{ParamStore, Tensor};
use crate::vdn::{VdnConfig, VdnModel};

pub const MAGIC: &[u8; 4] = b"VDPI";
pub const FORMAT_VERSION: u32 = 1;
pub const OPTIMIZER_NOTE: &str = "optimizer moments are not stored; resuming restarts them";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Blur(BlurModelConfig),
    Pinv(PinvModelConfig),
    Vdn(VdnConfig),
}

impl ModelSpec {
    pub fn stage(&self) -> Stage {
        match self {
            Self::Blur(_) => Stage::Blur,
            Self::Pinv(_) => Stage::Pinv,
            Self::Vdn(_) => Stage::Vdn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Checksum of a frozen prerequisite as seen by the dependent stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenRef {
    pub stage: Stage,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    pub step: u64,
    pub total_steps: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// SHA-256 of the run configuration that produced this checkpoint.
    pub config_hash: String,
    pub run_config: Option<serde_json::Value>,
    pub frozen: Vec<FrozenRef>,
    pub weights_checksum: String,
    pub optimizer: String,
    pub last_loss: Option<f64>,
    pub arrays: Vec<ArrayInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<Tensor<f32>>,
}

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    /// Snapshot of `store`; the array index is filled in here.
    pub fn from_store(mut meta: CheckpointMeta, store: &ParamStore<f32>) -> Self {
        meta.arrays = store
            .iter()
            .map(|(n, t)| ArrayInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        meta.weights_checksum = store.checksum();
        meta.format_version = FORMAT_VERSION;
        Self {
            meta,
            arrays: store.iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| format(e.to_string()))?;
        let floats: usize = self.arrays.iter().map(|a| a.len()).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for a in &self.arrays {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(format("missing VDPI magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| format("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(body).map_err(|e| format(format!("metadata: {e}")))?;
        let mut at = 16 + len;
        let mut arrays = Vec::with_capacity(meta.arrays.len());
        for info in &meta.arrays {
            let n: usize = info.shape.iter().product();
            let raw = bytes
                .get(at..at + 4 * n)
                .ok_or_else(|| format(format!("truncated array {}", info.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push(Tensor::from_vec(&info.shape, data)?);
            at += 4 * n;
        }
        if at != bytes.len() {
            return Err(format(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies every array into a freshly built store, checking names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.arrays.len() {
            return Err(format(format!(
                "checkpoint has {} arrays, model expects {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for (info, a) in self.meta.arrays.iter().zip(&self.arrays) {
            let id = store
                .id(&info.name)
                .ok_or_else(|| format(format!("unexpected array {}", info.name)))?;
            if store.get(id).shape() != a.shape() {
                return Err(format(format!(
                    "array {} has shape {:?}, model expects {:?}",
                    info.name,
                    a.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = a.clone();
        }
        Ok(())
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.meta.stage != stage || self.meta.model.stage() != stage {
            return Err(Error::Config(format!(
                "expected a {stage} checkpoint, got {}",
                self.meta.stage
            )));
        }
        Ok(())
    }

    pub fn blur_model(&self) -> Result<(BlurModel, ParamStore<f32>)> {
        self.expect(Stage::Blur)?;
        let ModelSpec::Blur(cfg) = &self.meta.model else { unreachable!("stage checked") };
        let (m, mut s) = BlurModel::build(cfg.clone(), 0)?;
        self.restore_into(&mut s)?;
        Ok((m, s))
    }

    pub fn pinv_model(&self) -> Result<(PinvModel, ParamStore<f32>)> {
        self.expect(Stage::Pinv)?;
        let ModelSpec::Pinv(cfg) = &self.meta.model else { unreachable!("stage checked") };
        let (m, mut s) = PinvModel::build(cfg.clone(), 0)?;
        self.restore_into(&mut s)?;
        Ok((m, s))
    }

    pub fn vdn_model(&self) -> Result<(VdnModel, ParamStore<f32>)> {
        self.expect(Stage::Vdn)?;
        let ModelSpec::Vdn(cfg) = &self.meta.model else { unreachable!("stage checked") };
        let (m, mut s) = VdnModel::build(cfg.clone(), 0)?;
        self.restore_into(&mut s)?;
        Ok((m, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vdn::Ablation;

    fn blur_ckpt() -> (Checkpoint, ParamStore<f32>) {
        let cfg = BlurModelConfig::tiny(3, 3);
        let (_, store) = BlurModel::build(cfg.clone(), 5).unwrap();
        let meta = CheckpointMeta {
            format_version: 0,
            stage: Stage::Blur,
            step: 12,
            total_steps: 20,
            model: ModelSpec::Blur(cfg),
            train: TrainConfig::default(),
            config_hash: "abc".into(),
            run_config: None,
            frozen: Vec::new(),
            weights_checksum: String::new(),
            optimizer: OPTIMIZER_NOTE.into(),
            last_loss: Some(0.5),
            arrays: Vec::new(),
        };
        (Checkpoint::from_store(meta, &store), store)
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let (c, store) = blur_ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let (_, loaded) = back.blur_model().unwrap();
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            let (ba, bb): (Vec<u32>, Vec<u32>) =
                (a.data().iter().map(|v| v.to_bits()).collect(), b.data().iter().map(|v| v.to_bits()).collect());
            assert_eq!(ba, bb);
        }
        assert_eq!(loaded.checksum(), c.meta.weights_checksum);
    }

    #[test]
    fn bad_headers_rejected() {
        let (c, _) = blur_ckpt();
        let mut b = c.to_bytes().unwrap();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(m)) if m.contains("version")));
        let mut b = c.to_bytes().unwrap();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let b = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn stage_mismatch_rejected() {
        let (c, _) = blur_ckpt();
        assert!(matches!(c.vdn_model(), Err(Error::Config(_))));
        let (_, vs) = VdnModel::build(VdnConfig::tiny(3, 3, Ablation::Baseline), 0).unwrap();
        let mut s = vs.clone();
        assert!(c.restore_into(&mut s).is_err());
    }
}
