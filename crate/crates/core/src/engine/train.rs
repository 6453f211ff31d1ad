use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, CheckpointMeta, FrozenRef, ModelSpec, OPTIMIZER_NOTE};
use super::{cosine_lr, Stage, TrainConfig};
use crate::blur::{BlurModel, BlurModelConfig};
use crate::data::{Batch, PairedDataset, Prefetcher, SamplerConfig};
use crate::error::{Error, Result};
use crate::pinv::{inverse_loss, penrose_chain, PinvModel, PinvModelConfig};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::vdn::{loss_total, Ablation, Mode, VdnConfig, VdnModel};

/// Architectures for all three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigs {
    pub blur: BlurModelConfig,
    pub pinv: PinvModelConfig,
    pub vdn: VdnConfig,
}

impl ModelConfigs {
    pub fn tiny(channels: usize, frames: usize, ablation: Ablation) -> Self {
        let blur = BlurModelConfig::tiny(channels, frames);
        Self {
            pinv: PinvModelConfig::matching(&blur),
            blur,
            vdn: VdnConfig::tiny(channels, frames, ablation),
        }
    }

    pub fn paper(channels: usize, frames: usize, ablation: Ablation) -> Self {
        let blur = BlurModelConfig::paper(channels, frames);
        Self {
            pinv: PinvModelConfig::matching(&blur),
            blur,
            vdn: VdnConfig::paper(channels, frames, ablation),
        }
    }
}

/// Frozen checkpoints a stage depends on.
#[derive(Clone, Copy, Debug, Default)]
pub struct Prerequisites<'a> {
    pub blur: Option<&'a Checkpoint>,
    pub pinv: Option<&'a Checkpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Individual terms (vdn stage).
    pub parts: Vec<(&'static str, f64)>,
}

/// Frozen blur + pinv pair producing `H⁺y`.
#[derive(Clone, Debug)]
pub(crate) struct PinvPath {
    pub blur: BlurModel,
    pub blur_store: ParamStore<f32>,
    pub pinv: PinvModel,
    pub pinv_store: ParamStore<f32>,
}

impl PinvPath {
    pub fn load(blur: &Checkpoint, pinv: &Checkpoint) -> Result<Self> {
        let (b, bs) = blur.blur_model()?;
        let (p, ps) = pinv.pinv_model()?;
        if p.cfg.feature_channels != b.cfg.feature_channels {
            return Err(Error::Config("pinv checkpoint does not match the blur checkpoint's features".into()));
        }
        Ok(Self {
            blur: b,
            blur_store: bs,
            pinv: p,
            pinv_store: ps,
        })
    }

    pub fn apply(&self, y: &Tensor<f32>) -> Result<Tensor<f32>> {
        pinv_of_clip(&self.blur, &self.blur_store, &self.pinv, &self.pinv_store, y)
    }
}

/// `H⁺y` for a stacked clip `[N, T·C, H, W]`, both operators estimated from `y`.
pub fn pinv_of_clip(
    blur: &BlurModel,
    bs: &ParamStore<f32>,
    pinv: &PinvModel,
    ps: &ParamStore<f32>,
    y: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let yv = g.input(y.clone());
    let stack = blur.estimate_blur(&mut g, bs, yv)?;
    let pstack = pinv.estimate_pinv(&mut g, ps, &stack)?;
    let out = pinv.pinv_of_any(&mut g, ps, yv, &pstack)?;
    Ok(g.value(out).clone())
}

enum State {
    Blur {
        model: BlurModel,
        store: ParamStore<f32>,
    },
    Pinv {
        blur: BlurModel,
        blur_store: ParamStore<f32>,
        model: PinvModel,
        store: ParamStore<f32>,
    },
    Vdn {
        path: Option<PinvPath>,
        model: VdnModel,
        store: ParamStore<f32>,
    },
}

fn prerequisite(c: Option<&Checkpoint>, stage: Stage, for_stage: Stage) -> Result<&Checkpoint> {
    c.ok_or_else(|| Error::Prerequisite(format!("the {for_stage} stage needs a trained {stage} checkpoint")))
}

fn verified(c: &Checkpoint, store: &ParamStore<f32>) -> Result<FrozenRef> {
    let sum = store.checksum();
    if sum != c.meta.weights_checksum {
        return Err(Error::Format(format!("{} checkpoint checksum mismatch", c.meta.stage)));
    }
    Ok(FrozenRef {
        stage: c.meta.stage,
        checksum: sum,
    })
}

pub fn config_hash(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One stage's optimiser loop, steppable batch by batch.
pub struct Trainer {
    pub cfg: TrainConfig,
    state: State,
    opt: Adam<f32>,
    step: u64,
    total: u64,
    frozen: Vec<FrozenRef>,
    run_config: Option<serde_json::Value>,
    last_loss: Option<f64>,
}

impl Trainer {
    pub fn new(
        cfg: &TrainConfig,
        models: &ModelConfigs,
        prereq: Prerequisites,
        resume: Option<&Checkpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut frozen = Vec::new();
        let mut state = match cfg.stage {
            Stage::Blur => {
                let (model, store) = BlurModel::build(models.blur.clone(), seed)?;
                State::Blur { model, store }
            }
            Stage::Pinv => {
                let bc = prerequisite(prereq.blur, Stage::Blur, Stage::Pinv)?;
                let (blur, blur_store) = bc.blur_model()?;
                frozen.push(verified(bc, &blur_store)?);
                if models.pinv.feature_channels != blur.cfg.feature_channels {
                    return Err(Error::Config(format!(
                        "pinv feature channels {:?} differ from the blur checkpoint's {:?}",
                        models.pinv.feature_channels, blur.cfg.feature_channels
                    )));
                }
                let (model, store) = PinvModel::build(models.pinv.clone(), seed)?;
                State::Pinv {
                    blur,
                    blur_store,
                    model,
                    store,
                }
            }
            Stage::Vdn => {
                let path = if models.vdn.flags.needs_pinv() {
                    let bc = prerequisite(prereq.blur, Stage::Blur, Stage::Vdn)?;
                    let pc = prerequisite(prereq.pinv, Stage::Pinv, Stage::Vdn)?;
                    let path = PinvPath::load(bc, pc)?;
                    frozen.push(verified(bc, &path.blur_store)?);
                    frozen.push(verified(pc, &path.pinv_store)?);
                    if path.blur.cfg.frames != models.vdn.frames || path.blur.cfg.channels != models.vdn.channels {
                        return Err(Error::Config("vdn clip shape differs from the blur checkpoint's".into()));
                    }
                    Some(path)
                } else {
                    None
                };
                let (model, store) = VdnModel::build(models.vdn.clone(), seed)?;
                State::Vdn { path, model, store }
            }
        };
        let mut step = 0;
        if let Some(r) = resume {
            if r.meta.stage != cfg.stage {
                return Err(Error::Config(format!("cannot resume a {} stage from a {} checkpoint", cfg.stage, r.meta.stage)));
            }
            let expected = match &state {
                State::Blur { model, .. } => ModelSpec::Blur(model.cfg.clone()),
                State::Pinv { model, .. } => ModelSpec::Pinv(model.cfg.clone()),
                State::Vdn { model, .. } => ModelSpec::Vdn(model.cfg.clone()),
            };
            if r.meta.model != expected {
                return Err(Error::Config("resume checkpoint was trained with a different architecture".into()));
            }
            r.restore_into(Self::store_mut(&mut state))?;
            step = r.meta.step;
        }
        let total = cfg.total_steps();
        if step > total {
            return Err(Error::Config(format!("resume step {step} is past the schedule end {total}")));
        }
        let opt = Adam::new(
            Self::store_of(&state),
            AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: 1e-8,
                clip_norm: cfg.effective_clip(),
            },
        );
        Ok(Self {
            cfg: cfg.clone(),
            state,
            opt,
            step,
            total,
            frozen,
            run_config: None,
            last_loss: None,
        })
    }

    /// Records the run configuration whose hash is stamped into checkpoints.
    pub fn with_run_config(mut self, v: serde_json::Value) -> Self {
        self.run_config = Some(v);
        self
    }

    fn store_of(s: &State) -> &ParamStore<f32> {
        match s {
            State::Blur { store, .. } | State::Pinv { store, .. } | State::Vdn { store, .. } => store,
        }
    }

    fn store_mut(s: &mut State) -> &mut ParamStore<f32> {
        match s {
            State::Blur { store, .. } | State::Pinv { store, .. } | State::Vdn { store, .. } => store,
        }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        Self::store_of(&self.state)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    /// Temporal window length the stage trains on.
    pub fn frames(&self) -> usize {
        match &self.state {
            State::Blur { model, .. } => model.cfg.frames,
            State::Pinv { blur, .. } => blur.cfg.frames,
            State::Vdn { model, .. } => model.cfg.frames,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.cfg.batch_size,
            frames: self.frames(),
            augment: self.cfg.augment.clone(),
            seed: self.cfg.seed,
            workers: self.cfg.workers,
            queue_depth: 4,
        }
    }

    /// One optimiser update on `batch`, at the schedule's current learning rate.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let lr = cosine_lr(self.step.min(self.total), self.total, self.cfg.lr_start, self.cfg.lr_end)?;
        let eps = self.cfg.loss.charbonnier_eps;
        let weights = self.cfg.loss;
        let step = self.step;
        let (c, centre) = {
            let frames = self.frames();
            let c = batch.x.shape()[1];
            (c, frames / 2 * c)
        };
        let mut g = Graph::new();
        let mut parts = Vec::new();
        let (loss, grads, store) = match &mut self.state {
            State::Blur { model, store } => {
                g.train(store);
                let y = g.input(batch.y.clone());
                let x = g.input(batch.x.clone());
                let yc = g.slice_channels(y, centre, c)?;
                let (loss, _) = model.loss(&mut g, store, y, yc, x, eps)?;
                (loss, g.backward(loss)?, store)
            }
            State::Pinv {
                blur,
                blur_store,
                model,
                store,
            } => {
                g.train(store);
                let y = g.input(batch.y.clone());
                let x = g.input(batch.x.clone());
                let chain = penrose_chain(&mut g, (blur, blur_store), (model, store), y, x)?;
                let loss = inverse_loss(&mut g, &chain.hx, &chain.hhphx, eps)?;
                parts.push(("identity_residual", chain.identity_residual(&g)));
                (loss, g.backward(loss)?, store)
            }
            State::Vdn { path, model, store } => {
                let pinv_y = path.as_ref().map(|p| p.apply(&batch.y)).transpose()?;
                g.train(store);
                let y = g.input(batch.y.clone());
                let x = g.input(batch.x.clone());
                let pv = pinv_y.map(|t| g.input(t));
                let (n, _, h, w) = batch.y.dims4()?;
                let noise_seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step;
                let noise = model.latent_noise(n, h, w, noise_seed);
                let out = model.forward_restore(&mut g, store, y, pv, Mode::Train, Some(&noise))?;
                let yc = g.slice_channels(y, centre, c)?;
                let lp = model.losses(&mut g, store, &out, yc, x, eps)?;
                for (name, v) in [("l1", Some(lp.l1)), ("l2", lp.l2), ("l3", lp.l3), ("l4", lp.l4)] {
                    if let Some(v) = v {
                        parts.push((name, g.value(v).data()[0] as f64));
                    }
                }
                let loss = loss_total(&mut g, &lp, &weights)?;
                (loss, g.backward(loss)?, store)
            }
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {value} at lr {lr:.3e}; terms {parts:?}; batch sum {}", batch.y.sum()),
            });
        }
        let grad_norm = self.opt.step(store, &grads, lr);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {grad_norm} with loss {value}"),
            });
        }
        self.step += 1;
        self.last_loss = Some(value);
        Ok(StepStats {
            step,
            lr,
            loss: value,
            grad_norm,
            parts,
        })
    }

    /// Trains until step `until` (capped at the schedule end) with prefetched batches.
    pub fn run(&mut self, data: Arc<PairedDataset>, until: Option<u64>, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        let end = until.unwrap_or(self.total).min(self.total);
        if self.step >= end {
            return Ok(());
        }
        let mut pf = Prefetcher::new(data, self.sampler_config(), self.step, end);
        while let Some((_, batch)) = pf.next_batch() {
            let stats = self.train_step(&batch?)?;
            if self.cfg.log_every > 0 && (stats.step % self.cfg.log_every as u64 == 0 || self.step == end) {
                log::info!(
                    "{} step {}/{} lr {:.3e} loss {:.6} |g| {:.3e}",
                    self.cfg.stage,
                    stats.step,
                    self.total,
                    stats.lr,
                    stats.loss,
                    stats.grad_norm
                );
            }
            on_step(&stats);
        }
        Ok(())
    }

    /// Fails when any frozen prerequisite changed while training.
    pub fn verify_frozen(&self) -> Result<()> {
        let now: Vec<String> = match &self.state {
            State::Blur { .. } => Vec::new(),
            State::Pinv { blur_store, .. } => vec![blur_store.checksum()],
            State::Vdn { path, .. } => path
                .iter()
                .flat_map(|p| [p.blur_store.checksum(), p.pinv_store.checksum()])
                .collect(),
        };
        for (f, n) in self.frozen.iter().zip(&now) {
            if &f.checksum != n {
                return Err(Error::contract(format!("frozen {} weights changed during training", f.stage)));
            }
        }
        Ok(())
    }

    /// `‖Hx − HH⁺Hx‖ / ‖Hx‖` on a batch (pinv stage only).
    pub fn identity_residual(&self, batch: &Batch) -> Result<f64> {
        let State::Pinv {
            blur,
            blur_store,
            model,
            store,
        } = &self.state
        else {
            return Err(Error::contract("identity residual is only defined for the pinv stage"));
        };
        let mut g = Graph::new();
        let y = g.input(batch.y.clone());
        let x = g.input(batch.x.clone());
        let chain = penrose_chain(&mut g, (blur, blur_store), (model, store), y, x)?;
        Ok(chain.identity_residual(&g))
    }

    /// Eval-mode restoration of a batch (vdn stage only), `[N, C, H, W]`.
    pub fn restore(&self, y: &Tensor<f32>) -> Result<Tensor<f32>> {
        let State::Vdn { path, model, store } = &self.state else {
            return Err(Error::contract("restoration needs the vdn stage"));
        };
        let pinv_y = path.as_ref().map(|p| p.apply(y)).transpose()?;
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let pv = pinv_y.map(|t| g.input(t));
        let out = model.forward_restore(&mut g, store, yv, pv, Mode::Eval, None)?;
        Ok(g.value(out.x_star).clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let model = match &self.state {
            State::Blur { model, .. } => ModelSpec::Blur(model.cfg.clone()),
            State::Pinv { model, .. } => ModelSpec::Pinv(model.cfg.clone()),
            State::Vdn { model, .. } => ModelSpec::Vdn(model.cfg.clone()),
        };
        let run_config = self
            .run_config
            .clone()
            .unwrap_or_else(|| serde_json::json!({ "train": self.cfg, "model": model }));
        let meta = CheckpointMeta {
            format_version: 0,
            stage: self.cfg.stage,
            step: self.step,
            total_steps: self.total,
            model,
            train: self.cfg.clone(),
            config_hash: config_hash(&run_config),
            run_config: Some(run_config),
            frozen: self.frozen.clone(),
            weights_checksum: String::new(),
            optimizer: OPTIMIZER_NOTE.into(),
            last_loss: self.last_loss,
            arrays: Vec::new(),
        };
        Checkpoint::from_store(meta, self.store())
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepStats>,
}

/// Runs a stage to the end of its schedule (or `until`) and returns the final checkpoint.
pub fn train_stage(
    cfg: &TrainConfig,
    models: &ModelConfigs,
    data: Arc<PairedDataset>,
    prereq: Prerequisites,
    resume: Option<&Checkpoint>,
    until: Option<u64>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg, models, prereq, resume)?;
    let mut log = Vec::new();
    t.run(data, until, |s| log.push(s.clone()))?;
    t.verify_frozen()?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, AugmentConfig, SynthSpec};

    fn data() -> Arc<PairedDataset> {
        let spec = SynthSpec {
            clips: 3,
            test_clips: 0,
            image_size: [32, 32],
            high_rate_frames_per_blur: 5,
            clip_length: 3,
            ..Default::default()
        };
        Arc::new(PairedDataset::from_synth(&synth_generate(&spec).unwrap()))
    }

    fn cfg(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            batch_size: 2,
            epochs: 1,
            iters_per_epoch: 4,
            augment: AugmentConfig {
                crop: Some(16),
                ..Default::default()
            },
            log_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn missing_prerequisites_are_reported() {
        let m = ModelConfigs::tiny(3, 3, Ablation::Full);
        let e = Trainer::new(&cfg(Stage::Pinv), &m, Prerequisites::default(), None).err().unwrap();
        assert!(matches!(&e, Error::Prerequisite(s) if s.contains("blur")));
        let e = Trainer::new(&cfg(Stage::Vdn), &m, Prerequisites::default(), None).err().unwrap();
        assert!(matches!(e, Error::Prerequisite(_)));
        let base = ModelConfigs::tiny(3, 3, Ablation::Baseline);
        assert!(Trainer::new(&cfg(Stage::Vdn), &base, Prerequisites::default(), None).is_ok());
    }

    #[test]
    fn staged_run_freezes_and_resumes() {
        let m = ModelConfigs::tiny(3, 3, Ablation::WOutput);
        let ds = data();
        let blur = train_stage(&cfg(Stage::Blur), &m, ds.clone(), Prerequisites::default(), None, None).unwrap();
        assert_eq!(blur.log.len(), 4);
        assert_eq!(blur.checkpoint.meta.step, 4);
        let pre = Prerequisites {
            blur: Some(&blur.checkpoint),
            pinv: None,
        };
        let pinv = train_stage(&cfg(Stage::Pinv), &m, ds.clone(), pre, None, None).unwrap();
        assert_eq!(pinv.checkpoint.meta.frozen[0].checksum, blur.checkpoint.meta.weights_checksum);
        let pre = Prerequisites {
            blur: Some(&blur.checkpoint),
            pinv: Some(&pinv.checkpoint),
        };

        let full = train_stage(&cfg(Stage::Vdn), &m, ds.clone(), pre, None, None).unwrap();
        let half = train_stage(&cfg(Stage::Vdn), &m, ds.clone(), pre, None, Some(2)).unwrap();
        assert_eq!(half.checkpoint.meta.step, 2);
        let bytes = half.checkpoint.to_bytes().unwrap();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
        let resumed = Trainer::new(&cfg(Stage::Vdn), &m, pre, Some(&reloaded)).unwrap();
        assert_eq!(resumed.store().checksum(), half.checkpoint.meta.weights_checksum);
        assert_eq!(resumed.step(), 2);
        let rest = train_stage(&cfg(Stage::Vdn), &m, ds, pre, Some(&reloaded), None).unwrap();
        assert_eq!(rest.log.iter().map(|s| s.step).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(full.log[..2], half.log[..]);
        assert!(full.log.iter().all(|s| s.parts.iter().any(|(n, _)| *n == "l1")));
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let m = ModelConfigs::tiny(3, 3, Ablation::Baseline);
        let run = || train_stage(&cfg(Stage::Blur), &m, data(), Prerequisites::default(), None, None).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    }
}
