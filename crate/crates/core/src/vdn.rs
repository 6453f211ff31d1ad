//! Variational deblurring network: restorer b_θ, latent encoder e_φ,
//! reconstruction decoder d_ψ and the training-only degradation head h_ρ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{Builder, Conv, Down, EncoderDecoder, EncoderDecoderConfig, NafBlock, NafBlockConfig, TapConfig, Up};
use crate::blur::{apply_h, blur_loss, ApplyHOutput, ApplyHWeights, FeatureStack};
use crate::error::{Error, Result};
use crate::pyramid::{decompose, LEVELS};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::types::{charbonnier_loss, LossWeights};

/// Which optional paths are wired in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_pinv_input: bool,
    pub use_pinv_output: bool,
    pub use_vae: bool,
    pub use_h_rho: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    WInput,
    WOutput,
    WVdn,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Baseline, Self::WInput, Self::WOutput, Self::WVdn, Self::Full];

    pub fn flags(self) -> AblationFlags {
        let rank = self as u8;
        AblationFlags {
            use_pinv_input: rank >= 1,
            use_pinv_output: rank >= 2,
            use_vae: rank >= 3,
            use_h_rho: rank >= 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::WInput => "w/ input",
            Self::WOutput => "w/ output",
            Self::WVdn => "w/ VDN",
            Self::Full => "full",
        }
    }

    pub fn from_flags(f: AblationFlags) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.flags() == f)
    }
}

impl AblationFlags {
    /// Flags must follow the chain baseline ⊂ w/input ⊂ w/output ⊂ w/VDN ⊂ full.
    pub fn validate(&self) -> Result<()> {
        Ablation::from_flags(*self)
            .map(|_| ())
            .ok_or_else(|| Error::contract(format!("flags {self:?} are not a point of the ablation chain")))
    }

    pub fn needs_pinv(&self) -> bool {
        self.use_pinv_input || self.use_pinv_output
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VdnConfig {
    pub channels: usize,
    pub frames: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub middle_blocks: usize,
    pub vae_channels: usize,
    /// Blocks per scale of e_φ, full resolution first.
    pub encoder_blocks: [usize; 3],
    /// Blocks per scale of d_ψ and h_ρ, coarsest first.
    pub decoder_blocks: [usize; 3],
    pub latent_channels: usize,
    /// h_ρ feature stack channels, coarsest first.
    pub degradation_channels: [usize; LEVELS],
    pub dict_size: usize,
    pub dict_kernel: usize,
    pub flags: AblationFlags,
}

impl VdnConfig {
    /// Depth 4 with 1 + 28 + 1 blocks around 36 total, [2,2,4]/[4,2,2] latent stages.
    pub fn paper(channels: usize, frames: usize, ablation: Ablation) -> Self {
        Self {
            channels,
            frames,
            base_channels: 32,
            depth: 4,
            blocks_per_stage: 1,
            middle_blocks: 28,
            vae_channels: 32,
            encoder_blocks: [2, 2, 4],
            decoder_blocks: [4, 2, 2],
            latent_channels: 16,
            degradation_channels: [32, 64, 128],
            dict_size: 50,
            dict_kernel: 15,
            flags: ablation.flags(),
        }
    }

    pub fn tiny(channels: usize, frames: usize, ablation: Ablation) -> Self {
        Self {
            channels,
            frames,
            base_channels: 8,
            depth: 4,
            blocks_per_stage: 1,
            middle_blocks: 2,
            vae_channels: 4,
            encoder_blocks: [1, 1, 1],
            decoder_blocks: [1, 1, 1],
            latent_channels: 4,
            degradation_channels: [4, 4, 4],
            dict_size: 4,
            dict_kernel: 7,
            flags: ablation.flags(),
        }
    }

    /// Channels of `yz`: the stacked clip, doubled when `H⁺y` is concatenated.
    pub fn yz_channels(&self) -> usize {
        let clip = self.channels * self.frames;
        if self.flags.use_pinv_input {
            2 * clip
        } else {
            clip
        }
    }

    pub fn divisor(&self) -> usize {
        (1 << (self.depth - 1)).max(4)
    }

    fn baseline_config(&self) -> EncoderDecoderConfig {
        let extra = if self.flags.use_vae { self.latent_channels } else { 0 };
        EncoderDecoderConfig {
            in_channels: self.yz_channels() + extra,
            base_channels: self.base_channels,
            depth: self.depth,
            blocks_per_stage: self.blocks_per_stage,
            middle_blocks: self.middle_blocks,
            expansion: 2,
            taps: vec![TapConfig {
                scale: 0,
                channels: self.channels,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.channels == 0 || self.frames % 2 == 0 {
            return Err(Error::contract("vdn needs ≥ 1 channel and an odd frame count"));
        }
        if self.vae_channels == 0 || self.latent_channels == 0 || self.dict_size == 0 || self.dict_kernel % 2 == 0 {
            return Err(Error::contract("vdn latent, dictionary and width settings must be positive (odd kernel)"));
        }
        if self.degradation_channels.contains(&0) {
            return Err(Error::contract("degradation channels must be ≥ 1"));
        }
        self.baseline_config().validate()
    }
}

/// Three-scale NAF stack ending in a mean/log-variance head at 1/4 resolution.
#[derive(Clone, Debug)]
struct LatentEncoder {
    intro: Conv,
    stages: Vec<Vec<NafBlock>>,
    downs: Vec<Down>,
    head: Conv,
    latent: usize,
}

fn stage(b: &mut Builder, name: &str, n: usize, c: usize) -> Result<Vec<NafBlock>> {
    (0..n)
        .map(|i| NafBlock::new(b, &format!("{name}.{i}"), NafBlockConfig { channels: c, expansion: 2 }))
        .collect()
}

fn run_stage<F: Real>(blocks: &[NafBlock], g: &mut Graph<F>, p: &ParamStore<F>, mut h: Var) -> Result<Var> {
    for blk in blocks {
        h = blk.forward(g, p, h)?;
    }
    Ok(h)
}

impl LatentEncoder {
    fn new(b: &mut Builder, name: &str, cin: usize, width: usize, blocks: [usize; 3], latent: usize) -> Result<Self> {
        let intro = Conv::new(b, &format!("{name}.intro"), cin, width, 3, 1, 1, true);
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for (s, &n) in blocks.iter().enumerate() {
            stages.push(stage(b, &format!("{name}.s{s}"), n, width << s)?);
            if s < 2 {
                downs.push(Down::new(b, &format!("{name}.down{s}"), width << s));
            }
        }
        let head = Conv::new(b, &format!("{name}.head"), width << 2, 2 * latent, 1, 1, 1, true);
        Ok(Self {
            intro,
            stages,
            downs,
            head,
            latent,
        })
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<(Var, Var)> {
        let mut h = self.intro.forward(g, p, x)?;
        for s in 0..3 {
            h = run_stage(&self.stages[s], g, p, h)?;
            if s < 2 {
                h = self.downs[s].forward(g, p, h)?;
            }
        }
        let out = self.head.forward(g, p, h)?;
        let mean = g.slice_channels(out, 0, self.latent)?;
        let log_var = g.slice_channels(out, self.latent, self.latent)?;
        Ok((mean, log_var))
    }
}

/// Latent (1/4 resolution) back up to full resolution; one 3×3 output
/// projection per requested scale (0 = 1/4, 2 = full).
#[derive(Clone, Debug)]
struct LatentDecoder {
    intro: Conv,
    stages: Vec<Vec<NafBlock>>,
    ups: Vec<Up>,
    taps: Vec<(usize, Conv)>,
}

impl LatentDecoder {
    fn new(
        b: &mut Builder,
        name: &str,
        latent: usize,
        width: usize,
        blocks: [usize; 3],
        taps: &[(usize, usize)],
    ) -> Result<Self> {
        let intro = Conv::new(b, &format!("{name}.intro"), latent, width << 2, 3, 1, 1, true);
        let mut stages = Vec::new();
        let mut ups = Vec::new();
        for (s, &n) in blocks.iter().enumerate() {
            stages.push(stage(b, &format!("{name}.s{s}"), n, width << (2 - s))?);
            if s < 2 {
                ups.push(Up::new(b, &format!("{name}.up{s}"), width << (2 - s)));
            }
        }
        let taps = taps
            .iter()
            .enumerate()
            .map(|(i, &(s, c))| (s, Conv::new(b, &format!("{name}.tap{i}"), width << (2 - s), c, 3, 1, 1, true)))
            .collect();
        Ok(Self {
            intro,
            stages,
            ups,
            taps,
        })
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, c: Var) -> Result<Vec<Var>> {
        let mut h = self.intro.forward(g, p, c)?;
        let mut at = Vec::with_capacity(3);
        for s in 0..3 {
            h = run_stage(&self.stages[s], g, p, h)?;
            at.push(h);
            if s < 2 {
                h = self.ups[s].forward(g, p, h)?;
            }
        }
        self.taps.iter().map(|(s, conv)| conv.forward(g, p, at[*s])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Distribution parameters of `c` and the value fed downstream.
#[derive(Clone, Copy, Debug)]
pub struct LatentCode {
    pub mean: Var,
    pub log_variance: Var,
    pub sample: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct VdnOutput {
    pub yz: Var,
    pub x_star: Var,
    /// Present in training mode with the VAE enabled.
    pub y_star: Option<Var>,
    pub latent: Option<LatentCode>,
}

/// Scalar loss terms; `None` when the corresponding flag is off.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<T> {
    pub l1: T,
    pub l2: Option<T>,
    pub l3: Option<T>,
    pub l4: Option<T>,
}

#[derive(Clone, Debug)]
pub struct VdnModel {
    pub cfg: VdnConfig,
    baseline: EncoderDecoder,
    encoder: Option<LatentEncoder>,
    decoder: Option<LatentDecoder>,
    h_rho: Option<(LatentDecoder, ApplyHWeights)>,
}

impl VdnModel {
    pub fn build(cfg: VdnConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let baseline = EncoderDecoder::new(&mut b, "b", cfg.baseline_config())?;
        let (mut encoder, mut decoder, mut h_rho) = (None, None, None);
        if cfg.flags.use_vae {
            let yz = cfg.yz_channels();
            encoder = Some(LatentEncoder::new(&mut b, "enc", yz, cfg.vae_channels, cfg.encoder_blocks, cfg.latent_channels)?);
            decoder = Some(LatentDecoder::new(&mut b, "dec", cfg.latent_channels, cfg.vae_channels, cfg.decoder_blocks, &[(2, yz)])?);
        }
        if cfg.flags.use_h_rho {
            let taps: Vec<_> = (0..LEVELS).map(|s| (s, cfg.degradation_channels[s])).collect();
            let head = LatentDecoder::new(&mut b, "rho", cfg.latent_channels, cfg.vae_channels, cfg.decoder_blocks, &taps)?;
            let psi = ApplyHWeights::new(&mut b, "rho_psi", cfg.degradation_channels, cfg.dict_size, cfg.dict_kernel);
            h_rho = Some((head, psi));
        }
        Ok((
            Self {
                cfg,
                baseline,
                encoder,
                decoder,
                h_rho,
            },
            store,
        ))
    }

    /// Standard-normal draws for the reparameterised latent of an `h×w` input.
    pub fn latent_noise<F: Real>(&self, n: usize, h: usize, w: usize, seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [n, self.cfg.latent_channels, h / 4, w / 4];
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::lit(v)
            })
            .collect();
        Tensor::from_vec(&shape, data).expect("sized")
    }

    /// `y` and `pinv_y` are stacked clips `[N, T·C, H, W]`. `noise` is required
    /// in training mode when the VAE is enabled (see [`Self::latent_noise`]).
    pub fn forward_restore<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        y: Var,
        pinv_y: Option<Var>,
        mode: Mode,
        noise: Option<&Tensor<F>>,
    ) -> Result<VdnOutput> {
        let cfg = &self.cfg;
        let flags = cfg.flags;
        let (n, c, h, w) = g.dims4(y)?;
        if c != cfg.channels * cfg.frames {
            return Err(Error::shape(format!(
                "expected {} stacked channels, got {c}",
                cfg.channels * cfg.frames
            )));
        }
        let d = cfg.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!("vdn input {h}×{w} not divisible by {d}")));
        }
        let pinv_y = match (flags.needs_pinv(), pinv_y) {
            (true, None) => return Err(Error::contract("flags require H⁺y but none was given")),
            (true, Some(pv)) => {
                if g.shape(pv) != g.shape(y) {
                    return Err(Error::shape(format!("H⁺y shape {:?} differs from y {:?}", g.shape(pv), g.shape(y))));
                }
                Some(pv)
            }
            (false, _) => None,
        };
        let yz = match (flags.use_pinv_input, pinv_y) {
            (true, Some(pv)) => g.concat_channels(&[y, pv])?,
            _ => y,
        };

        let mut latent = None;
        let mut y_star = None;
        let mut restorer_in = yz;
        if let (Some(enc), Some(dec)) = (&self.encoder, &self.decoder) {
            let (mean, log_variance) = enc.forward(g, p, yz)?;
            let sample = match mode {
                Mode::Eval => mean,
                Mode::Train => {
                    let eps = noise.ok_or_else(|| Error::contract("training mode needs latent noise"))?;
                    if eps.shape() != g.shape(mean) {
                        return Err(Error::shape(format!(
                            "latent noise {:?} does not match latent {:?}",
                            eps.shape(),
                            g.shape(mean)
                        )));
                    }
                    let half = g.scale(log_variance, F::lit(0.5));
                    let std = g.exp(half);
                    let e = g.input(eps.clone());
                    let jitter = g.mul(std, e)?;
                    g.add(mean, jitter)?
                }
            };
            if mode == Mode::Train {
                y_star = Some(dec.forward(g, p, sample)?[0]);
            }
            let up = g.resize(sample, h, w)?;
            restorer_in = g.concat_channels(&[yz, up])?;
            latent = Some(LatentCode {
                mean,
                log_variance,
                sample,
            });
        }

        let residual = self.baseline.forward(g, p, restorer_in)?[0];
        let source = match (flags.use_pinv_output, pinv_y) {
            (true, Some(pv)) => pv,
            _ => y,
        };
        let centre = cfg.frames / 2 * cfg.channels;
        let base = g.slice_channels(source, centre, cfg.channels)?;
        let x_star = g.add(residual, base)?;
        debug_assert_eq!(g.shape(x_star), &[n, cfg.channels, h, w]);
        Ok(VdnOutput {
            yz,
            x_star,
            y_star,
            latent,
        })
    }

    /// L4: h_ρ(c) applied to the sharp centre frame against the blurred centre frame, per level.
    pub fn loss_l4_degradation<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        mode: Mode,
        y_center: Var,
        x_center: Var,
        latent: &LatentCode,
        eps: f64,
    ) -> Result<Var> {
        if mode != Mode::Train {
            return Err(Error::contract("h_ρ is training-only"));
        }
        let (head, psi) = self
            .h_rho
            .as_ref()
            .ok_or_else(|| Error::contract("h_ρ is disabled in this configuration"))?;
        let taps = head.forward(g, p, latent.sample)?;
        let stack = FeatureStack {
            levels: [taps[0], taps[1], taps[2]],
        };
        let hx: ApplyHOutput = apply_h(g, p, psi, x_center, &stack)?;
        let lows = decompose(g, p, &psi.sampler, y_center)?.lows;
        blur_loss(g, &lows, &hx, eps)
    }

    /// Every enabled loss term for one training batch.
    pub fn losses<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        out: &VdnOutput,
        y_center: Var,
        x_center: Var,
        eps: f64,
    ) -> Result<LossParts<Var>> {
        let l1 = loss_l1(g, x_center, out.x_star, eps)?;
        let (mut l2, mut l3, mut l4) = (None, None, None);
        if let (Some(ys), Some(lat)) = (out.y_star, out.latent.as_ref()) {
            l2 = Some(loss_l2_rec(g, out.yz, ys, eps)?);
            l3 = Some(loss_l3_kl(g, lat)?);
            if self.cfg.flags.use_h_rho {
                l4 = Some(self.loss_l4_degradation(g, p, Mode::Train, y_center, x_center, lat, eps)?);
            }
        }
        Ok(LossParts { l1, l2, l3, l4 })
    }
}

pub fn loss_l1<F: Real>(g: &mut Graph<F>, x: Var, x_star: Var, eps: f64) -> Result<Var> {
    charbonnier_loss(g, x, x_star, eps)
}

pub fn loss_l2_rec<F: Real>(g: &mut Graph<F>, yz: Var, y_star: Var, eps: f64) -> Result<Var> {
    charbonnier_loss(g, yz, y_star, eps)
}

/// Mean of `0.5 (μ² + e^{lv} − 1 − lv)`.
pub fn loss_l3_kl<F: Real>(g: &mut Graph<F>, latent: &LatentCode) -> Result<Var> {
    let m2 = g.square(latent.mean)?;
    let ev = g.exp(latent.log_variance);
    let s = g.add(m2, ev)?;
    let s = g.sub(s, latent.log_variance)?;
    let s = g.add_scalar(s, F::lit(-1.0));
    let m = g.mean_all(s);
    Ok(g.scale(m, F::lit(0.5)))
}

/// `λ_rec·L1 + λ_vae·(L2 + λ_kl·L3 + L4)`, dropping absent terms.
pub fn loss_total<F: Real>(g: &mut Graph<F>, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = g.scale(parts.l1, F::lit(w.lambda_rec));
    let mut bracket: Option<Var> = None;
    let mut push = |g: &mut Graph<F>, v: Var| -> Result<()> {
        bracket = Some(match bracket {
            None => v,
            Some(b) => g.add(b, v)?,
        });
        Ok(())
    };
    if let Some(v) = parts.l2 {
        push(g, v)?;
    }
    if let Some(v) = parts.l3 {
        let v = g.scale(v, F::lit(w.lambda_kl));
        push(g, v)?;
    }
    if let Some(v) = parts.l4 {
        push(g, v)?;
    }
    if let Some(b) = bracket {
        let b = g.scale(b, F::lit(w.lambda_vae));
        total = g.add(total, b)?;
    }
    Ok(total)
}

/// Plain-number counterpart of [`loss_total`].
pub fn loss_total_value(parts: &LossParts<f64>, w: &LossWeights) -> f64 {
    let bracket = parts.l2.unwrap_or(0.0) + w.lambda_kl * parts.l3.unwrap_or(0.0) + parts.l4.unwrap_or(0.0);
    w.lambda_rec * parts.l1 + w.lambda_vae * bracket
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_inputs, check_params};

    fn rand_t<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| F::lit(rng.gen_range(0.0..1.0))).collect()).unwrap()
    }

    fn micro(ablation: Ablation) -> VdnConfig {
        VdnConfig {
            channels: 1,
            frames: 1,
            base_channels: 2,
            depth: 2,
            blocks_per_stage: 1,
            middle_blocks: 0,
            vae_channels: 2,
            encoder_blocks: [1, 0, 0],
            decoder_blocks: [0, 0, 1],
            latent_channels: 2,
            degradation_channels: [2, 2, 2],
            dict_size: 2,
            dict_kernel: 3,
            flags: ablation.flags(),
        }
    }

    fn perturb(store: &ParamStore<f32>, seed: u64) -> ParamStore<f64> {
        let mut p = store.cast::<f64>();
        for (i, (name, t)) in store.iter().enumerate() {
            let noise = rand_t::<f64>(t.shape(), seed + i as u64).map(|v| 0.4 * (v - 0.5));
            p.set(name, t.cast::<f64>().zip_map(&noise, |a, b| a + b).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn presets_follow_the_chain() {
        for (i, a) in Ablation::ALL.iter().enumerate() {
            let f = a.flags();
            assert_eq!(Ablation::from_flags(f), Some(*a));
            let on = [f.use_pinv_input, f.use_pinv_output, f.use_vae, f.use_h_rho];
            assert_eq!(on.iter().filter(|b| **b).count(), i);
        }
        let bad = AblationFlags {
            use_h_rho: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn baseline_ignores_pinv_input() {
        let cfg = VdnConfig::tiny(3, 3, Ablation::Baseline);
        let (m, store) = VdnModel::build(cfg, 1).unwrap();
        let y = rand_t::<f32>(&[1, 9, 16, 16], 2);
        let run = |pv: Tensor<f32>| {
            let mut g = Graph::new();
            let (yv, pvv) = (g.input(y.clone()), g.input(pv));
            let o = m.forward_restore(&mut g, &store, yv, Some(pvv), Mode::Eval, None).unwrap();
            g.value(o.x_star).clone()
        };
        assert_eq!(run(Tensor::zeros(&[1, 9, 16, 16])), run(rand_t(&[1, 9, 16, 16], 3)));
    }

    #[test]
    fn pinv_output_is_the_residual_base() {
        let cfg = VdnConfig::tiny(3, 3, Ablation::WOutput);
        let (m, mut store) = VdnModel::build(cfg, 1).unwrap();
        let tap = store.id("b.tap0.w").unwrap();
        let shape = store.get(tap).shape().to_vec();
        *store.get_mut(tap) = Tensor::zeros(&shape);
        let y = rand_t::<f32>(&[1, 9, 16, 16], 4);
        let pv = rand_t::<f32>(&[1, 9, 16, 16], 5);
        let mut g = Graph::new();
        let (yv, pvv) = (g.input(y), g.input(pv.clone()));
        let o = m.forward_restore(&mut g, &store, yv, Some(pvv), Mode::Eval, None).unwrap();
        assert_eq!(g.value(o.x_star), &pv.slice_channels(3, 3).unwrap());

        let mut g = Graph::new();
        let yv = g.input(Tensor::zeros(&[1, 9, 16, 16]));
        assert!(m.forward_restore(&mut g, &store, yv, None, Mode::Eval, None).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_skips_h_rho() {
        let cfg = VdnConfig::tiny(3, 3, Ablation::Full);
        let (m, store) = VdnModel::build(cfg, 7).unwrap();
        let y = rand_t::<f32>(&[1, 9, 16, 16], 8);
        let pv = rand_t::<f32>(&[1, 9, 16, 16], 9);
        let run = |s: &ParamStore<f32>| {
            let mut g = Graph::new();
            let (yv, pvv) = (g.input(y.clone()), g.input(pv.clone()));
            let o = m.forward_restore(&mut g, s, yv, Some(pvv), Mode::Eval, None).unwrap();
            assert!(o.y_star.is_none());
            g.value(o.x_star).clone()
        };
        let first = run(&store);
        assert_eq!(first, run(&store));
        let mut poisoned = store.clone();
        for id in store.ids() {
            if store.name(id).starts_with("rho") {
                let s = store.get(id).shape().to_vec();
                *poisoned.get_mut(id) = Tensor::full(&s, f32::NAN);
            }
        }
        assert_eq!(first, run(&poisoned));
    }

    #[test]
    fn training_mode_samples_and_reconstructs() {
        let cfg = VdnConfig::tiny(3, 3, Ablation::Full);
        let (m, store) = VdnModel::build(cfg, 7).unwrap();
        let mut g = Graph::new();
        let yv = g.input(rand_t::<f32>(&[2, 9, 16, 16], 10));
        let pv = g.input(rand_t::<f32>(&[2, 9, 16, 16], 11));
        assert!(m.forward_restore(&mut g, &store, yv, Some(pv), Mode::Train, None).is_err());
        let noise = m.latent_noise(2, 16, 16, 3);
        let o = m.forward_restore(&mut g, &store, yv, Some(pv), Mode::Train, Some(&noise)).unwrap();
        assert_eq!(g.shape(o.y_star.unwrap()), &[2, 18, 16, 16]);
        let lat = o.latent.unwrap();
        assert_eq!(g.shape(lat.sample), &[2, 4, 4, 4]);
        let xc = g.input(rand_t::<f32>(&[2, 3, 16, 16], 12));
        let yc = g.slice_channels(yv, 3, 3).unwrap();
        assert!(m.loss_l4_degradation(&mut g, &store, Mode::Eval, yc, xc, &lat, 1e-3).is_err());
        let parts = m.losses(&mut g, &store, &o, yc, xc, 1e-3).unwrap();
        assert!(parts.l2.is_some() && parts.l3.is_some() && parts.l4.is_some());
    }

    #[test]
    fn l1_values() {
        let mut g = Graph::<f64>::new();
        let x = rand_t::<f64>(&[1, 3, 4, 4], 1);
        let (a, b) = (g.input(x.clone()), g.input(x.map(|v| v + 0.1)));
        let l = loss_l1(&mut g, a, a, 1e-3).unwrap();
        assert!((g.value(l).data()[0] - 1e-3).abs() < 1e-15);
        let l = loss_l1(&mut g, a, b, 1e-3).unwrap();
        assert!((g.value(l).data()[0] - (0.01f64 + 1e-6).sqrt()).abs() < 1e-9);
        let r = loss_l1(&mut g, b, a, 1e-3).unwrap();
        assert_eq!(g.value(l).data(), g.value(r).data());
    }

    #[test]
    fn kl_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let lat = |g: &mut Graph<f64>, m: Tensor<f64>, v: Tensor<f64>| {
            let (mean, log_variance) = (g.input(m), g.input(v));
            LatentCode {
                mean,
                log_variance,
                sample: mean,
            }
        };
        let z = lat(&mut g, Tensor::zeros(&[1, 2, 2, 2]), Tensor::zeros(&[1, 2, 2, 2]));
        let l = loss_l3_kl(&mut g, &z).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let o = lat(&mut g, Tensor::full(&[1, 2, 2, 2], 1.0), Tensor::zeros(&[1, 2, 2, 2]));
        let l = loss_l3_kl(&mut g, &o).unwrap();
        assert!((g.value(l).data()[0] - 0.5).abs() < 1e-15);

        let (m, v) = (rand_t::<f64>(&[1, 2, 3, 3], 2).map(|x| 2.0 * x - 1.0), rand_t::<f64>(&[1, 2, 3, 3], 3).map(|x| 2.0 * x - 1.0));
        let r = lat(&mut g, m.clone(), v.clone());
        let l = loss_l3_kl(&mut g, &r).unwrap();
        let want: f64 = m
            .data()
            .iter()
            .zip(v.data())
            .map(|(mu, lv)| 0.5 * (mu * mu + lv.exp() - 1.0 - lv))
            .sum::<f64>()
            / m.len() as f64;
        assert!((g.value(l).data()[0] - want).abs() < 1e-8);
        assert!(want > 0.0);

        let check = check_inputs(&[m, v], 1e-4, 64, |g, vs| {
            loss_l3_kl(
                g,
                &LatentCode {
                    mean: vs[0],
                    log_variance: vs[1],
                    sample: vs[0],
                },
            )
        })
        .unwrap();
        assert!(check.rel_error < 1e-3, "{check:?}");
    }

    #[test]
    fn total_weighting() {
        let w = LossWeights::default();
        let unit = LossParts {
            l1: 1.0,
            l2: Some(1.0),
            l3: Some(1.0),
            l4: Some(1.0),
        };
        assert!((loss_total_value(&unit, &w) - 1.15).abs() < 1e-12);
        let zero_vae = LossWeights {
            lambda_vae: 0.0,
            ..w
        };
        assert_eq!(loss_total_value(&unit, &zero_vae), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0)).collect();
            let w = LossWeights {
                lambda_rec: rng.gen_range(0.0..2.0),
                lambda_vae: rng.gen_range(0.0..1.0),
                lambda_kl: rng.gen_range(0.0..2.0),
                charbonnier_eps: 1e-3,
            };
            let mut g = Graph::<f64>::new();
            let v: Vec<Var> = vals.iter().map(|x| g.input(Tensor::scalar(*x))).collect();
            let parts = LossParts {
                l1: v[0],
                l2: Some(v[1]),
                l3: Some(v[2]),
                l4: Some(v[3]),
            };
            let t = loss_total(&mut g, &parts, &w).unwrap();
            let want = w.lambda_rec * vals[0] + w.lambda_vae * (vals[1] + w.lambda_kl * vals[2] + vals[3]);
            assert!((g.value(t).data()[0] - want).abs() < 1e-10);
            let only = LossParts {
                l1: v[0],
                l2: None,
                l3: None,
                l4: None,
            };
            let t = loss_total(&mut g, &only, &w).unwrap();
            assert!((g.value(t).data()[0] - w.lambda_rec * vals[0]).abs() < 1e-12);
        }
    }

    /// Checks one loss term of the micro network against finite differences.
    fn check_term(term: usize) {
        let cfg = micro(Ablation::Full);
        let (m, store) = VdnModel::build(cfg, 3).unwrap();
        let mut p = perturb(&store, 100);
        let y = rand_t::<f64>(&[1, 1, 8, 8], 20);
        let pv = rand_t::<f64>(&[1, 1, 8, 8], 21);
        let x = rand_t::<f64>(&[1, 1, 8, 8], 22);
        let noise = m.latent_noise::<f64>(1, 8, 8, 9);
        let check = check_params(&mut p, 1e-4, 3, |g, p| {
            let (yv, pvv, xv) = (g.input(y.clone()), g.input(pv.clone()), g.input(x.clone()));
            let o = m.forward_restore(g, p, yv, Some(pvv), Mode::Train, Some(&noise))?;
            let parts = m.losses(g, p, &o, yv, xv, 1e-3)?;
            Ok(match term {
                1 => parts.l1,
                2 => parts.l2.unwrap(),
                3 => parts.l3.unwrap(),
                _ => parts.l4.unwrap(),
            })
        })
        .unwrap();
        assert!(check.rel_error < 1e-3, "L{term}: {check:?}");
    }

    #[test]
    fn l1_gradients() {
        check_term(1);
    }

    #[test]
    fn l2_gradients() {
        check_term(2);
    }

    #[test]
    fn l3_gradients_through_encoder() {
        check_term(3);
    }

    #[test]
    fn l4_gradients() {
        check_term(4);
    }

    #[test]
    fn h_rho_overfits_static_batch() {
        let mut cfg = micro(Ablation::Full);
        cfg.channels = 3;
        let (m, mut store) = VdnModel::build(cfg, 4).unwrap();
        let x = rand_t::<f32>(&[1, 3, 8, 8], 30);
        let noise = m.latent_noise::<f32>(1, 8, 8, 1);
        let mut opt = crate::tensor::Adam::new(&store, Default::default());
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..150 {
            let mut g = Graph::new();
            g.train(&store);
            let xv = g.input(x.clone());
            let o = m.forward_restore(&mut g, &store, xv, Some(xv), Mode::Train, Some(&noise)).unwrap();
            let lat = o.latent.unwrap();
            let l = m.loss_l4_degradation(&mut g, &store, Mode::Train, xv, xv, &lat, 1e-3).unwrap();
            last = g.value(l).data()[0] as f64;
            first.get_or_insert(last);
            let grads = g.backward(l).unwrap();
            opt.step(&mut store, &grads, 1e-3);
        }
        let first = first.unwrap();
        // the floor is 3·ε
        assert!(last - 3e-3 < 0.5 * (first - 3e-3), "{first} -> {last}");
    }
}
