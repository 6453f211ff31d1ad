//! Network building blocks: convolutions, NAF blocks, resampling blocks and
//! the encoder-decoder scaffold shared by every estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, PadMode, ParamId, ParamStore, Real, Tensor, Var};

/// Registers freshly initialised parameters into a store.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.gen_range(-bound..bound) as f32
                } else {
                    0.0
                }
            })
            .collect();
        self.tensor(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.tensor(name, Tensor::full(shape, value))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<f32>) -> ParamId {
        self.store.add(name, value)
    }
}

/// 2-D convolution with optional bias; odd kernels at stride 1 are zero-padded to keep size.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    stride: usize,
    groups: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin / groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = b.uniform(&format!("{name}.w"), &[cout, cin / groups, k, k], bound);
        let bias = bias.then(|| b.uniform(&format!("{name}.b"), &[1, cout, 1, 1], bound));
        let pad = if stride == 1 && k % 2 == 1 { k / 2 } else { 0 };
        Self {
            weight,
            bias,
            stride,
            groups,
            pad,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let x = g.pad(x, self.pad, PadMode::Zero)?;
        let w = g.param(p, self.weight);
        let y = g.conv2d(x, w, self.stride, self.groups)?;
        match self.bias {
            Some(b) => {
                let b = g.param(p, b);
                g.add_b(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-pixel normalisation across channels with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm2d {
    const EPS: f64 = 1e-6;

    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        Self {
            gamma: b.constant(&format!("{name}.g"), &[1, c, 1, 1], 1.0),
            beta: b.constant(&format!("{name}.b"), &[1, c, 1, 1], 0.0),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let mu = g.mean_keep(x, &[1])?;
        let d = g.sub_b(x, mu)?;
        let d2 = g.square(d)?;
        let var = g.mean_keep(d2, &[1])?;
        let var = g.add_scalar(var, F::lit(Self::EPS));
        let inv = g.powf(var, F::lit(-0.5));
        let y = g.mul_b(d, inv)?;
        let (gm, bt) = (g.param(p, self.gamma), g.param(p, self.beta));
        let y = g.mul_b(y, gm)?;
        g.add_b(y, bt)
    }
}

fn simple_gate<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    let a = g.slice_channels(x, 0, c / 2)?;
    let b = g.slice_channels(x, c / 2, c / 2)?;
    g.mul(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NafBlockConfig {
    pub channels: usize,
    pub expansion: usize,
}

impl NafBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.expansion == 0 {
            return Err(Error::contract("NAF block needs channels ≥ 1 and expansion ≥ 1"));
        }
        if self.channels * self.expansion % 2 != 0 {
            return Err(Error::contract("NAF gate needs an even expanded width"));
        }
        Ok(())
    }
}

/// Gated residual block: two sub-branches, each added back through a zero-initialised
/// per-channel scale, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct NafBlock {
    cfg: NafBlockConfig,
    norm1: LayerNorm2d,
    conv1: Conv,
    conv2: Conv,
    sca: Conv,
    conv3: Conv,
    beta: ParamId,
    norm2: LayerNorm2d,
    conv4: Conv,
    conv5: Conv,
    gamma: ParamId,
}

impl NafBlock {
    pub fn new(b: &mut Builder, name: &str, cfg: NafBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let wide = c * cfg.expansion;
        Ok(Self {
            cfg,
            norm1: LayerNorm2d::new(b, &format!("{name}.norm1"), c),
            conv1: Conv::new(b, &format!("{name}.conv1"), c, wide, 1, 1, 1, true),
            conv2: Conv::new(b, &format!("{name}.conv2"), wide, wide, 3, 1, wide, true),
            sca: Conv::new(b, &format!("{name}.sca"), wide / 2, wide / 2, 1, 1, 1, true),
            conv3: Conv::new(b, &format!("{name}.conv3"), wide / 2, c, 1, 1, 1, true),
            beta: b.constant(&format!("{name}.beta"), &[1, c, 1, 1], 0.0),
            norm2: LayerNorm2d::new(b, &format!("{name}.norm2"), c),
            conv4: Conv::new(b, &format!("{name}.conv4"), c, wide, 1, 1, 1, true),
            conv5: Conv::new(b, &format!("{name}.conv5"), wide / 2, c, 1, 1, 1, true),
            gamma: b.constant(&format!("{name}.gamma"), &[1, c, 1, 1], 0.0),
        })
    }

    pub fn config(&self) -> NafBlockConfig {
        self.cfg
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let c = g.dims4(x)?.1;
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "NAF block expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let h = self.norm1.forward(g, p, x)?;
        let h = self.conv1.forward(g, p, h)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = simple_gate(g, h)?;
        let pooled = g.mean_keep(h, &[2, 3])?;
        let att = self.sca.forward(g, p, pooled)?;
        let h = g.mul_b(h, att)?;
        let h = self.conv3.forward(g, p, h)?;
        let beta = g.param(p, self.beta);
        let h = g.mul_b(h, beta)?;
        let x = g.add(x, h)?;

        let h = self.norm2.forward(g, p, x)?;
        let h = self.conv4.forward(g, p, h)?;
        let h = simple_gate(g, h)?;
        let h = self.conv5.forward(g, p, h)?;
        let gamma = g.param(p, self.gamma);
        let h = g.mul_b(h, gamma)?;
        g.add(x, h)
    }
}

/// 2×2 stride-2 convolution doubling the channels.
#[derive(Clone, Debug)]
pub struct Down(Conv);

impl Down {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        Self(Conv::new(b, name, c, 2 * c, 2, 2, 1, false))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("downsample needs even size, got {h}×{w}")));
        }
        self.0.forward(g, p, x)
    }
}

/// 1×1 convolution to twice the channels, then pixel shuffle: halves channels, doubles size.
#[derive(Clone, Debug)]
pub struct Up(Conv);

impl Up {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        Self(Conv::new(b, name, c, 2 * c, 1, 1, 1, false))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.0.forward(g, p, x)?;
        g.pixel_shuffle(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapConfig {
    /// 0 is full resolution, `depth - 1` the coarsest.
    pub scale: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDecoderConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub middle_blocks: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    pub taps: Vec<TapConfig>,
}

fn default_expansion() -> usize {
    2
}

impl EncoderDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::contract("encoder-decoder depth must be ≥ 2"));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.expansion == 0 {
            return Err(Error::contract("encoder-decoder channel counts must be ≥ 1"));
        }
        if self.taps.is_empty() {
            return Err(Error::contract("encoder-decoder needs at least one tap"));
        }
        for t in &self.taps {
            if t.scale >= self.depth || t.channels == 0 {
                return Err(Error::contract(format!("invalid tap {t:?} for depth {}", self.depth)));
            }
        }
        Ok(())
    }

    /// Spatial size divisor required of inputs.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << scale
    }
}

/// UNet-style scaffold: one encoder stage per scale, middle blocks at the coarsest
/// scale, one decoder stage per scale with additive skips, and a bias-free 3×3
/// projection for every tap.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    cfg: EncoderDecoderConfig,
    intro: Conv,
    enc: Vec<Vec<NafBlock>>,
    downs: Vec<Down>,
    middle: Vec<NafBlock>,
    ups: Vec<Up>,
    dec: Vec<Vec<NafBlock>>,
    taps: Vec<Conv>,
}

impl EncoderDecoder {
    pub fn new(b: &mut Builder, name: &str, cfg: EncoderDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let block = |b: &mut Builder, n: String, s: usize| {
            NafBlock::new(
                b,
                &n,
                NafBlockConfig {
                    channels: cfg.width(s),
                    expansion: cfg.expansion,
                },
            )
        };
        let intro = Conv::new(b, &format!("{name}.intro"), cfg.in_channels, cfg.width(0), 3, 1, 1, false);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for s in 0..cfg.depth {
            let stage = (0..cfg.blocks_per_stage)
                .map(|i| block(b, format!("{name}.enc{s}.{i}"), s))
                .collect::<Result<Vec<_>>>()?;
            enc.push(stage);
            if s + 1 < cfg.depth {
                downs.push(Down::new(b, &format!("{name}.down{s}"), cfg.width(s)));
            }
        }
        let middle = (0..cfg.middle_blocks)
            .map(|i| block(b, format!("{name}.mid.{i}"), cfg.depth - 1))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for s in 0..cfg.depth {
            if s + 1 < cfg.depth {
                ups.push(Up::new(b, &format!("{name}.up{s}"), cfg.width(s + 1)));
            }
            let stage = (0..cfg.blocks_per_stage)
                .map(|i| block(b, format!("{name}.dec{s}.{i}"), s))
                .collect::<Result<Vec<_>>>()?;
            dec.push(stage);
        }
        let taps = cfg
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| Conv::new(b, &format!("{name}.tap{i}"), cfg.width(t.scale), t.channels, 3, 1, 1, false))
            .collect();
        Ok(Self {
            cfg,
            intro,
            enc,
            downs,
            middle,
            ups,
            dec,
            taps,
        })
    }

    pub fn config(&self) -> &EncoderDecoderConfig {
        &self.cfg
    }

    /// Returns one map per configured tap, in configuration order.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.dims4(x)?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "encoder-decoder expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let d = self.cfg.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!("input {h}×{w} not divisible by {d}")));
        }
        let mut h = self.intro.forward(g, p, x)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for s in 0..self.cfg.depth {
            for blk in &self.enc[s] {
                h = blk.forward(g, p, h)?;
            }
            skips.push(h);
            if s + 1 < self.cfg.depth {
                h = self.downs[s].forward(g, p, h)?;
            }
        }
        for blk in &self.middle {
            h = blk.forward(g, p, h)?;
        }
        let mut at_scale = vec![None; self.cfg.depth];
        for s in (0..self.cfg.depth).rev() {
            if s + 1 < self.cfg.depth {
                h = self.ups[s].forward(g, p, h)?;
            }
            h = g.add(h, skips[s])?;
            for blk in &self.dec[s] {
                h = blk.forward(g, p, h)?;
            }
            at_scale[s] = Some(h);
        }
        self.cfg
            .taps
            .iter()
            .zip(&self.taps)
            .map(|(t, conv)| conv.forward(g, p, at_scale[t.scale].expect("every scale decoded")))
            .collect()
    }
}

/// Total number of scalar parameters.
pub fn count_parameters<F: Real>(store: &ParamStore<F>) -> usize {
    store.count()
}
