//! Learned three-level Laplacian sampling with exact reconstruction.
//!
//! Both samplers work per channel (every channel is reshaped to its own
//! single-channel image), so the same weights apply to RGB frames, stacked
//! clips or feature maps alike.

use crate::blocks::Builder;
use crate::error::{Error, Result};
use crate::tensor::{Graph, PadMode, ParamId, ParamStore, Real, Tensor, Var};

pub const LEVELS: usize = 3;

/// Bias-free 3×3 down- and upsampler with replication padding.
#[derive(Clone, Debug)]
pub struct SamplerWeights {
    pub down: ParamId,
    pub up: ParamId,
}

impl SamplerWeights {
    /// Starts as a [1 2 1]² binomial downsampler and a nearest-neighbour upsampler.
    pub fn new(b: &mut Builder, name: &str) -> Self {
        let tap = [0.25f32, 0.5, 0.25];
        let down: Vec<f32> = (0..9).map(|i| tap[i / 3] * tap[i % 3]).collect();
        let mut up = vec![0.0f32; 9];
        up[4] = 1.0;
        Self {
            down: b.tensor(&format!("{name}.down"), Tensor::from_vec(&[1, 1, 3, 3], down).expect("3x3")),
            up: b.tensor(&format!("{name}.up"), Tensor::from_vec(&[1, 1, 3, 3], up).expect("3x3")),
        }
    }

    fn per_channel<F: Real>(
        g: &mut Graph<F>,
        x: Var,
        f: impl FnOnce(&mut Graph<F>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let (n, c, h, w) = g.dims4(x)?;
        let flat = g.reshape(x, &[n * c, 1, h, w])?;
        let y = f(g, flat)?;
        let (_, _, ho, wo) = g.dims4(y)?;
        g.reshape(y, &[n, c, ho, wo])
    }

    /// Halves both spatial dimensions.
    pub fn downsample<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("downsampler needs even size, got {h}×{w}")));
        }
        let k = g.param(p, self.down);
        Self::per_channel(g, x, |g, x| {
            let x = g.pad(x, 1, PadMode::Replicate)?;
            g.conv2d(x, k, 2, 1)
        })
    }

    /// Doubles both spatial dimensions.
    pub fn upsample<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let k = g.param(p, self.up);
        Self::per_channel(g, x, |g, x| {
            let x = g.upsample_nearest(x)?;
            let x = g.pad(x, 1, PadMode::Replicate)?;
            g.conv2d(x, k, 1, 1)
        })
    }
}

/// `lows[i]` is the input at scale 2⁻ⁱ (`lows[0]` is the input itself);
/// `highs[i] = lows[i] − up(lows[i + 1])`.
#[derive(Clone, Copy, Debug)]
pub struct LaplacianDecomposition {
    pub lows: [Var; LEVELS],
    pub highs: [Var; LEVELS - 1],
}

pub fn decompose<F: Real>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &SamplerWeights,
    x: Var,
) -> Result<LaplacianDecomposition> {
    let (_, _, h, wd) = g.dims4(x)?;
    let d = 1 << (LEVELS - 1);
    if h % d != 0 || wd % d != 0 {
        return Err(Error::shape(format!("pyramid input {h}×{wd} not divisible by {d}")));
    }
    let l1 = w.downsample(g, p, x)?;
    let l2 = w.downsample(g, p, l1)?;
    let u1 = w.upsample(g, p, l1)?;
    let h0 = g.sub(x, u1)?;
    let u2 = w.upsample(g, p, l2)?;
    let h1 = g.sub(l1, u2)?;
    Ok(LaplacianDecomposition {
        lows: [x, l1, l2],
        highs: [h0, h1],
    })
}

/// Inverse of [`decompose`] under the same weights.
pub fn reconstruct<F: Real>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &SamplerWeights,
    d: &LaplacianDecomposition,
) -> Result<Var> {
    let u2 = w.upsample(g, p, d.lows[2])?;
    let l1 = g.add(d.highs[1], u2)?;
    let u1 = w.upsample(g, p, l1)?;
    g.add(d.highs[0], u1)
}
