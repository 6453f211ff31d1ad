//! Blur simulation: a feature estimator that sees only the blurred clip, and
//! the pyramid-composed operator ψ that applies a feature stack to any image.

use serde::{Deserialize, Serialize};

use crate::blocks::{Builder, EncoderDecoder, EncoderDecoderConfig, TapConfig};
use crate::error::{Error, Result};
use crate::pyramid::{decompose, SamplerWeights, LEVELS};
use crate::tensor::{Graph, PadMode, ParamId, ParamStore, Real, Tensor, Var};
use crate::types::charbonnier_loss;

/// Three feature maps ordered coarsest first: `[F0 at H/4, F1 at H/2, F2 at H]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureStack {
    pub levels: [Var; LEVELS],
}

pub type BlurFeatureStack = FeatureStack;
pub type PinvFeatureStack = FeatureStack;

impl FeatureStack {
    /// Checks the doubling layout and finiteness.
    pub fn validate<F: Real>(&self, g: &Graph<F>) -> Result<()> {
        let dims: Vec<_> = self.levels.iter().map(|v| g.dims4(*v)).collect::<Result<_>>()?;
        for i in 1..LEVELS {
            let (a, b) = (dims[i - 1], dims[i]);
            if a.0 != b.0 || b.2 != 2 * a.2 || b.3 != 2 * a.3 {
                return Err(Error::shape(format!(
                    "feature stack levels must double in size: {a:?} then {b:?}"
                )));
            }
        }
        if !self.levels.iter().all(|v| g.value(*v).all_finite()) {
            return Err(Error::contract("feature stack contains non-finite values"));
        }
        Ok(())
    }

    pub fn channels<F: Real>(&self, g: &Graph<F>) -> [usize; LEVELS] {
        self.levels.map(|v| g.shape(v)[1])
    }

    /// Re-enters the stack's values as constants into another graph.
    pub fn detach_into<F: Real, G: Real>(&self, src: &Graph<F>, dst: &mut Graph<G>) -> FeatureStack {
        FeatureStack {
            levels: self.levels.map(|v| dst.input(src.value(v).cast())),
        }
    }
}

/// Per-level dictionary unit: `conv_h` maps features to `dict_size` mixing maps,
/// `conv_u` is a single-channel filter on the mean-free image.
#[derive(Clone, Debug)]
pub struct BlurDictWeights {
    pub conv_h: ParamId,
    pub conv_u: ParamId,
    kernel: usize,
}

impl BlurDictWeights {
    pub fn new(b: &mut Builder, name: &str, feature_channels: usize, dict_size: usize, kernel: usize) -> Self {
        let mut delta = Tensor::zeros(&[1, 1, kernel, kernel]);
        delta.data_mut()[kernel * kernel / 2] = 1.0;
        let bound = 1.0 / ((feature_channels * kernel * kernel) as f64).sqrt() / dict_size as f64;
        Self {
            conv_h: b.uniform(&format!("{name}.conv_h"), &[dict_size, feature_channels, kernel, kernel], bound),
            conv_u: b.tensor(&format!("{name}.conv_u"), delta),
            kernel,
        }
    }
}

/// `o = b + Σ_k centre(W_k ⊙ b) + mean(u)` with `b = conv_u(centre(u))` and
/// `W = conv_h(f)`, every channel of `u` handled alike. Linear in `u`.
pub fn blur_dict_apply<F: Real>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &BlurDictWeights,
    u: Var,
    f: Var,
) -> Result<Var> {
    let (n, c, h, wd) = g.dims4(u)?;
    let (nf, _, fh, fw) = g.dims4(f)?;
    if (fh, fw) != (h, wd) {
        return Err(Error::shape(format!(
            "image level {h}×{wd} and feature level {fh}×{fw} are not aligned"
        )));
    }
    if nf != n && nf != 1 {
        return Err(Error::shape(format!("feature batch {nf} does not match image batch {n}")));
    }
    let pad = w.kernel / 2;
    let mu = g.mean_keep(u, &[2, 3])?;
    let centred = g.sub_b(u, mu)?;
    let flat = g.reshape(centred, &[n * c, 1, h, wd])?;
    let flat = g.pad(flat, pad, PadMode::Replicate)?;
    let ku = g.param(p, w.conv_u);
    let base = g.conv2d(flat, ku, 1, 1)?;
    let base = g.reshape(base, &[n, c, h, wd])?;

    let fp = g.pad(f, pad, PadMode::Replicate)?;
    let kh = g.param(p, w.conv_h);
    let maps = g.conv2d(fp, kh, 1, 1)?;
    // centring is linear, so Σ_k centre(W_k ⊙ b) = centre((Σ_k W_k) ⊙ b)
    let k = g.shape(maps)[1];
    let sum = g.mean_keep(maps, &[1])?;
    let sum = g.scale(sum, F::lit(k as f64));
    let prod = g.mul_b(base, sum)?;
    let pm = g.mean_keep(prod, &[2, 3])?;
    let detail = g.sub_b(prod, pm)?;
    let o = g.add(base, detail)?;
    g.add_b(o, mu)
}

/// Weights of one ψ operator: its own samplers plus one dictionary per level.
#[derive(Clone, Debug)]
pub struct ApplyHWeights {
    pub sampler: SamplerWeights,
    /// Indexed by pyramid level (0 = full resolution).
    pub dicts: [BlurDictWeights; LEVELS],
}

impl ApplyHWeights {
    /// `feature_channels` ordered like a [`FeatureStack`] (coarsest first).
    pub fn new(b: &mut Builder, name: &str, feature_channels: [usize; LEVELS], dict_size: usize, kernel: usize) -> Self {
        let sampler = SamplerWeights::new(b, &format!("{name}.sampler"));
        let dicts = [0, 1, 2].map(|lvl| {
            BlurDictWeights::new(
                b,
                &format!("{name}.dict{lvl}"),
                feature_channels[LEVELS - 1 - lvl],
                dict_size,
                kernel,
            )
        });
        Self { sampler, dicts }
    }
}

/// Level outputs of ψ indexed by pyramid level; `levels[0]` is the full-resolution composite.
#[derive(Clone, Copy, Debug)]
pub struct ApplyHOutput {
    pub levels: [Var; LEVELS],
}

impl ApplyHOutput {
    pub fn full(&self) -> Var {
        self.levels[0]
    }
}

/// ψ(u, stack): coarse low band and the two high bands each pass through their
/// level's dictionary, then the levels are merged coarse to fine with the learned upsampler.
pub fn apply_h<F: Real>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    w: &ApplyHWeights,
    u: Var,
    stack: &FeatureStack,
) -> Result<ApplyHOutput> {
    let d = decompose(g, p, &w.sampler, u)?;
    let feature = |g: &mut Graph<F>, lvl: usize, like: Var| -> Result<Var> {
        let (_, _, h, wd) = g.dims4(like)?;
        g.resize(stack.levels[LEVELS - 1 - lvl], h, wd)
    };
    let f2 = feature(g, 2, d.lows[2])?;
    let o2 = blur_dict_apply(g, p, &w.dicts[2], d.lows[2], f2)?;
    let f1 = feature(g, 1, d.highs[1])?;
    let o1 = blur_dict_apply(g, p, &w.dicts[1], d.highs[1], f1)?;
    let up = w.sampler.upsample(g, p, o2)?;
    let o1 = g.add(o1, up)?;
    let f0 = feature(g, 0, d.highs[0])?;
    let o0 = blur_dict_apply(g, p, &w.dicts[0], d.highs[0], f0)?;
    let up = w.sampler.upsample(g, p, o1)?;
    let o0 = g.add(o0, up)?;
    Ok(ApplyHOutput { levels: [o0, o1, o2] })
}

/// Σ over levels of the Charbonnier distance between matching maps.
pub fn level_loss<F: Real>(g: &mut Graph<F>, a: &[Var; LEVELS], b: &[Var; LEVELS], eps: f64) -> Result<Var> {
    let mut total = charbonnier_loss(g, a[0], b[0], eps)?;
    for i in 1..LEVELS {
        let l = charbonnier_loss(g, a[i], b[i], eps)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Σ_i charbonnier(y_i, Hx_i) with `y_lows` the pyramid lows of the blurred frame.
pub fn blur_loss<F: Real>(
    g: &mut Graph<F>,
    y_lows: &[Var; LEVELS],
    hx: &ApplyHOutput,
    eps: f64,
) -> Result<Var> {
    level_loss(g, y_lows, &hx.levels, eps)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurModelConfig {
    /// Colour channels per frame.
    pub channels: usize,
    /// Temporal window T (odd).
    pub frames: usize,
    /// Feature-stack channels, coarsest first.
    pub feature_channels: [usize; LEVELS],
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub middle_blocks: usize,
    pub dict_size: usize,
    pub dict_kernel: usize,
}

impl BlurModelConfig {
    /// Feature shapes 32/64/128, 50-entry dictionary, 15×15 kernels.
    pub fn paper(channels: usize, frames: usize) -> Self {
        Self {
            channels,
            frames,
            feature_channels: [32, 64, 128],
            base_channels: 32,
            blocks_per_stage: 1,
            middle_blocks: 1,
            dict_size: 50,
            dict_kernel: 15,
        }
    }

    /// Desk-scale widths for smoke training on one CPU core.
    pub fn tiny(channels: usize, frames: usize) -> Self {
        Self {
            channels,
            frames,
            feature_channels: [4, 4, 4],
            base_channels: 4,
            blocks_per_stage: 1,
            middle_blocks: 1,
            dict_size: 4,
            dict_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.frames % 2 == 0 {
            return Err(Error::contract("blur model needs ≥ 1 channel and an odd frame count"));
        }
        if self.dict_kernel % 2 == 0 || self.dict_size == 0 {
            return Err(Error::contract("dictionary kernel must be odd and dict_size ≥ 1"));
        }
        if self.feature_channels.contains(&0) {
            return Err(Error::contract("feature channels must be ≥ 1"));
        }
        self.estimator_config(self.channels * self.frames).validate()
    }

    pub(crate) fn estimator_config(&self, in_channels: usize) -> EncoderDecoderConfig {
        EncoderDecoderConfig {
            in_channels,
            base_channels: self.base_channels,
            depth: LEVELS,
            blocks_per_stage: self.blocks_per_stage,
            middle_blocks: self.middle_blocks,
            expansion: 2,
            taps: (0..LEVELS)
                .map(|i| TapConfig {
                    scale: LEVELS - 1 - i,
                    channels: self.feature_channels[i],
                })
                .collect(),
        }
    }
}

/// Estimator of blur features from the stacked blurred clip, plus its ψ weights.
#[derive(Clone, Debug)]
pub struct BlurModel {
    pub cfg: BlurModelConfig,
    pub estimator: EncoderDecoder,
    pub psi: ApplyHWeights,
}

impl BlurModel {
    pub fn build(cfg: BlurModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let estimator = EncoderDecoder::new(&mut b, "est", cfg.estimator_config(cfg.channels * cfg.frames))?;
        let psi = ApplyHWeights::new(&mut b, "psi", cfg.feature_channels, cfg.dict_size, cfg.dict_kernel);
        Ok((Self { cfg, estimator, psi }, store))
    }

    /// Features from the blurred clip `y` stacked as `[N, T·C, H, W]`.
    pub fn estimate_blur<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, y: Var) -> Result<BlurFeatureStack> {
        let (_, _, h, w) = g.dims4(y)?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!("blur estimator needs sizes divisible by 8, got {h}×{w}")));
        }
        let taps = self.estimator.forward(g, p, y)?;
        Ok(FeatureStack {
            levels: [taps[0], taps[1], taps[2]],
        })
    }

    pub fn apply_h<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, u: Var, stack: &FeatureStack) -> Result<ApplyHOutput> {
        apply_h(g, p, &self.psi, u, stack)
    }

    /// Pyramid lows of `y` under this model's samplers.
    pub fn lows<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, y: Var) -> Result<[Var; LEVELS]> {
        Ok(decompose(g, p, &self.psi.sampler, y)?.lows)
    }

    /// Training objective: ψ applied to the sharp centre frame against the blurred centre frame.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        y_clip: Var,
        y_center: Var,
        x_center: Var,
        eps: f64,
    ) -> Result<(Var, ApplyHOutput)> {
        let stack = self.estimate_blur(g, p, y_clip)?;
        let hx = self.apply_h(g, p, x_center, &stack)?;
        let lows = self.lows(g, p, y_center)?;
        Ok((blur_loss(g, &lows, &hx, eps)?, hx))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::check_params;
    use crate::types::charbonnier;

    fn rand_t<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| F::lit(rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    fn dict(fc: usize) -> (ParamStore<f64>, BlurDictWeights) {
        let mut store = ParamStore::new();
        let w = BlurDictWeights::new(&mut Builder::new(&mut store, 1), "d", fc, 5, 5);
        let mut p = store.cast::<f64>();
        p.set("d.conv_h", rand_t(&[5, fc, 5, 5], 2)).unwrap();
        p.set("d.conv_u", rand_t(&[1, 1, 5, 5], 3)).unwrap();
        (p, w)
    }

    fn apply_dict(p: &ParamStore<f64>, w: &BlurDictWeights, u: &Tensor<f64>, f: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let (uv, fv) = (g.input(u.clone()), g.input(f.clone()));
        let o = blur_dict_apply(&mut g, p, w, uv, fv).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn dict_is_linear_in_image() {
        let (p, w) = dict(3);
        let f = rand_t(&[1, 3, 8, 8], 4);
        let (u1, u2) = (rand_t(&[1, 2, 8, 8], 5), rand_t(&[1, 2, 8, 8], 6));
        assert_eq!(apply_dict(&p, &w, &Tensor::zeros(&[1, 2, 8, 8]), &f).max_abs(), 0.0);
        let twice = apply_dict(&p, &w, &u1.scale(2.0), &f);
        let once = apply_dict(&p, &w, &u1, &f);
        let hom = twice.zip_map(&once.scale(2.0), |a, b| a - b).unwrap().max_abs();
        assert!(hom < 1e-5 * once.max_abs());
        let sum = apply_dict(&p, &w, &u1.zip_map(&u2, |a, b| a + b).unwrap(), &f);
        let parts = once.zip_map(&apply_dict(&p, &w, &u2, &f), |a, b| a + b).unwrap();
        let add = sum.zip_map(&parts, |a, b| a - b).unwrap().max_abs();
        assert!(add < 1e-5 * sum.max_abs().max(parts.max_abs()));
    }

    #[test]
    fn dict_matches_literal_dictionary_sum() {
        // independent evaluation keeping every one of the K maps separate
        let (p, w) = dict(2);
        let (u, f) = (rand_t::<f64>(&[1, 1, 6, 6], 7), rand_t::<f64>(&[1, 2, 6, 6], 8));
        let got = apply_dict(&p, &w, &u, &f);
        let (hw, k) = (36usize, 5usize);
        let at = |t: &Tensor<f64>, c: usize, y: isize, x: isize| {
            let (yy, xx) = (y.clamp(0, 5) as usize, x.clamp(0, 5) as usize);
            t.data()[c * hw + yy * 6 + xx]
        };
        let mean = u.mean();
        let uc = u.map(|v| v - mean);
        let conv = |img: &Tensor<f64>, chans: usize, kern: &[f64]| -> Vec<f64> {
            (0..hw)
                .map(|i| {
                    let (y, x) = ((i / 6) as isize, (i % 6) as isize);
                    let mut acc = 0.0;
                    for c in 0..chans {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += kern[(c * k + ky) * k + kx] * at(img, c, y + ky as isize - 2, x + kx as isize - 2);
                            }
                        }
                    }
                    acc
                })
                .collect()
        };
        let b = conv(&uc, 1, p.get(w.conv_u).data());
        let mut want: Vec<f64> = b.iter().map(|v| v + mean).collect();
        for j in 0..k {
            let kern = &p.get(w.conv_h).data()[j * 2 * 25..(j + 1) * 2 * 25];
            let wj = conv(&f, 2, kern);
            let prod: Vec<f64> = wj.iter().zip(&b).map(|(a, c)| a * c).collect();
            let pm = prod.iter().sum::<f64>() / hw as f64;
            for (o, v) in want.iter_mut().zip(&prod) {
                *o += v - pm;
            }
        }
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn dict_rejects_misaligned_features() {
        let (p, w) = dict(3);
        let mut g = Graph::new();
        let (u, f) = (g.input(Tensor::zeros(&[1, 1, 8, 8])), g.input(Tensor::zeros(&[1, 3, 4, 4])));
        assert!(matches!(blur_dict_apply(&mut g, &p, &w, u, f), Err(Error::Shape(_))));
    }

    fn tiny_model() -> (BlurModel, ParamStore<f32>) {
        BlurModel::build(BlurModelConfig::tiny(3, 3), 5).unwrap()
    }

    fn random_stack(g: &mut Graph<f64>, ch: [usize; 3], h: usize, seed: u64) -> FeatureStack {
        FeatureStack {
            levels: [0, 1, 2].map(|i| g.input(rand_t(&[1, ch[i], h >> (2 - i), h >> (2 - i)], seed + i as u64))),
        }
    }

    #[test]
    fn apply_h_linear_and_zero_preserving() {
        let (m, store) = tiny_model();
        let mut p = store.cast::<f64>();
        for (i, (name, t)) in store.iter().enumerate() {
            if name.starts_with("psi.dict") {
                p.set(name, rand_t(t.shape(), 100 + i as u64)).unwrap();
            }
        }
        let mut g = Graph::new();
        let stack = random_stack(&mut g, m.cfg.feature_channels, 16, 1);
        let u1 = rand_t::<f64>(&[1, 3, 16, 16], 2);
        let u2 = rand_t::<f64>(&[1, 3, 16, 16], 3);
        let mut run = |u: Tensor<f64>| {
            let v = g.input(u);
            let o = m.apply_h(&mut g, &p, v, &stack).unwrap();
            o.levels.map(|l| g.value(l).clone())
        };
        let zero = run(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(zero.iter().all(|t| t.max_abs() == 0.0));
        let (a, b) = (0.7, -1.3);
        let mix = u1.zip_map(&u2, |x, y| a * x + b * y).unwrap();
        let lhs = run(mix);
        let (o1, o2) = (run(u1), run(u2));
        for lvl in 0..3 {
            let rhs = o1[lvl].zip_map(&o2[lvl], |x, y| a * x + b * y).unwrap();
            let err = lhs[lvl].zip_map(&rhs, |x, y| x - y).unwrap().norm() / rhs.norm();
            assert!(err < 1e-10, "level {lvl}: {err}");
        }
        assert_eq!(lhs[0].shape(), &[1, 3, 16, 16]);
        assert_eq!(lhs[2].shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn estimator_shapes_zero_and_determinism() {
        let (m, store) = tiny_model();
        let mut g = Graph::new();
        let y = g.input(Tensor::<f32>::zeros(&[1, 9, 16, 16]));
        let s = m.estimate_blur(&mut g, &store, y).unwrap();
        s.validate(&g).unwrap();
        assert_eq!(g.shape(s.levels[0]), &[1, 4, 4, 4]);
        assert_eq!(g.shape(s.levels[2]), &[1, 4, 16, 16]);
        assert!(s.levels.iter().all(|v| g.value(*v).max_abs() == 0.0));

        let x = rand_t::<f32>(&[1, 9, 16, 16], 9);
        let once = |x: &Tensor<f32>| {
            let mut g = Graph::new();
            let y = g.input(x.clone());
            let s = m.estimate_blur(&mut g, &store, y).unwrap();
            s.levels.map(|v| g.value(v).clone())
        };
        assert_eq!(once(&x), once(&x));
        let bad = g.input(Tensor::<f32>::zeros(&[1, 9, 12, 12]));
        assert!(m.estimate_blur(&mut g, &store, bad).is_err());
    }

    #[test]
    fn blur_loss_floor_and_oracle() {
        let mut g = Graph::<f64>::new();
        let lv: [Var; 3] = [0, 1, 2].map(|i| g.input(rand_t(&[1, 3, 8 >> i, 8 >> i], 10 + i as u64)));
        let same = ApplyHOutput { levels: lv };
        let l = blur_loss(&mut g, &lv, &same, 1e-3).unwrap();
        assert!((g.value(l).data()[0] - 3e-3).abs() < 1e-12);

        let other: [Var; 3] = [0, 1, 2].map(|i| g.input(rand_t(&[1, 3, 8 >> i, 8 >> i], 20 + i as u64)));
        let l = blur_loss(&mut g, &lv, &ApplyHOutput { levels: other }, 1e-3).unwrap();
        let want: f64 = (0..3)
            .map(|i| charbonnier(g.value(lv[i]), g.value(other[i]), 1e-3).unwrap())
            .sum();
        assert!((g.value(l).data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn blur_loss_gradients_wrt_dictionary_weights() {
        let (m, store) = tiny_model();
        let mut p = store.cast::<f64>();
        let y1 = rand_t::<f64>(&[1, 3, 8, 8], 30).map(|v| 0.5 + 0.4 * v);
        let x1 = rand_t::<f64>(&[1, 3, 8, 8], 31).map(|v| 0.5 + 0.4 * v);
        let feats: Vec<Tensor<f64>> = (0..3).map(|i| rand_t(&[1, 4, 2 << i, 2 << i], 40 + i as u64)).collect();
        let check = check_params(&mut p, 1e-4, 12, |g, p| {
            let stack = FeatureStack {
                levels: [0, 1, 2].map(|i| g.input(feats[i].clone())),
            };
            let (x, y) = (g.input(x1.clone()), g.input(y1.clone()));
            let hx = m.apply_h(g, p, x, &stack)?;
            let lows = m.lows(g, p, y)?;
            blur_loss(g, &lows, &hx, 1e-3)
        })
        .unwrap();
        assert!(check.rel_error < 1e-3, "{check:?}");
    }
}
