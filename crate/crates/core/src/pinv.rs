//! Learned pseudo-inverse: H⁺ features estimated from H features, applied
//! through a ψ operator of its own, trained on `HH⁺Hx = Hx`.

use serde::{Deserialize, Serialize};

use crate::blocks::{Builder, EncoderDecoder};
use crate::blur::{apply_h, level_loss, ApplyHOutput, ApplyHWeights, BlurFeatureStack, BlurModel, BlurModelConfig, FeatureStack, PinvFeatureStack};
use crate::error::{Error, Result};
use crate::pyramid::LEVELS;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinvModelConfig {
    /// Must equal the blur model's feature channels (coarsest first).
    pub feature_channels: [usize; LEVELS],
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub middle_blocks: usize,
    pub dict_size: usize,
    pub dict_kernel: usize,
}

impl PinvModelConfig {
    /// Same scaffold and dictionary sizes as the blur model.
    pub fn matching(blur: &BlurModelConfig) -> Self {
        Self {
            feature_channels: blur.feature_channels,
            base_channels: blur.base_channels,
            blocks_per_stage: blur.blocks_per_stage,
            middle_blocks: blur.middle_blocks,
            dict_size: blur.dict_size,
            dict_kernel: blur.dict_kernel,
        }
    }

    fn as_blur(&self) -> BlurModelConfig {
        BlurModelConfig {
            channels: 1,
            frames: 1,
            feature_channels: self.feature_channels,
            base_channels: self.base_channels,
            blocks_per_stage: self.blocks_per_stage,
            middle_blocks: self.middle_blocks,
            dict_size: self.dict_size,
            dict_kernel: self.dict_kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.feature_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.as_blur().validate()
    }
}

#[derive(Clone, Debug)]
pub struct PinvModel {
    pub cfg: PinvModelConfig,
    pub estimator: EncoderDecoder,
    pub psi: ApplyHWeights,
}

impl PinvModel {
    pub fn build(cfg: PinvModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let estimator = EncoderDecoder::new(&mut b, "est", cfg.as_blur().estimator_config(cfg.in_channels()))?;
        let psi = ApplyHWeights::new(&mut b, "psi", cfg.feature_channels, cfg.dict_size, cfg.dict_kernel);
        Ok((Self { cfg, estimator, psi }, store))
    }

    /// H⁺ features from the H stack: coarse levels are resized to the finest
    /// level, concatenated along channels and fed through the scaffold.
    pub fn estimate_pinv<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, stack: &BlurFeatureStack) -> Result<PinvFeatureStack> {
        stack.validate(g)?;
        let ch = stack.channels(g);
        if ch != self.cfg.feature_channels {
            return Err(Error::shape(format!(
                "pinv estimator expects feature channels {:?}, got {ch:?}",
                self.cfg.feature_channels
            )));
        }
        let (_, _, h, w) = g.dims4(stack.levels[LEVELS - 1])?;
        let parts = stack
            .levels
            .iter()
            .map(|v| g.resize(*v, h, w))
            .collect::<Result<Vec<_>>>()?;
        let joined = g.concat_channels(&parts)?;
        let taps = self.estimator.forward(g, p, joined)?;
        Ok(FeatureStack {
            levels: [taps[0], taps[1], taps[2]],
        })
    }

    /// ψ(u, H⁺ stack) with all level outputs.
    pub fn pinv_apply<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, u: Var, pstack: &PinvFeatureStack) -> Result<ApplyHOutput> {
        apply_h(g, p, &self.psi, u, pstack)
    }

    /// The trained operator applied to an arbitrary input (for instance `y`).
    pub fn pinv_of_any<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>, u: Var, pstack: &PinvFeatureStack) -> Result<Var> {
        Ok(self.pinv_apply(g, p, u, pstack)?.full())
    }
}

/// Σ_i charbonnier(Hx_i, HH⁺Hx_i).
pub fn inverse_loss<F: Real>(g: &mut Graph<F>, hx: &ApplyHOutput, hhphx: &ApplyHOutput, eps: f64) -> Result<Var> {
    level_loss(g, &hx.levels, &hhphx.levels, eps)
}

/// Every intermediate of `x ↦ Hx ↦ H⁺Hx ↦ HH⁺Hx`.
#[derive(Clone, Copy, Debug)]
pub struct PenroseChain {
    pub blur_stack: BlurFeatureStack,
    pub pinv_stack: PinvFeatureStack,
    pub hx: ApplyHOutput,
    pub hphx: ApplyHOutput,
    pub hhphx: ApplyHOutput,
}

/// Runs both estimators on the blurred clip and composes the identity chain on `x`.
pub fn penrose_chain<F: Real>(
    g: &mut Graph<F>,
    blur: (&BlurModel, &ParamStore<F>),
    pinv: (&PinvModel, &ParamStore<F>),
    y_clip: Var,
    x: Var,
) -> Result<PenroseChain> {
    let blur_stack = blur.0.estimate_blur(g, blur.1, y_clip)?;
    let pinv_stack = pinv.0.estimate_pinv(g, pinv.1, &blur_stack)?;
    let hx = blur.0.apply_h(g, blur.1, x, &blur_stack)?;
    let hphx = pinv.0.pinv_apply(g, pinv.1, hx.full(), &pinv_stack)?;
    let hhphx = blur.0.apply_h(g, blur.1, hphx.full(), &blur_stack)?;
    Ok(PenroseChain {
        blur_stack,
        pinv_stack,
        hx,
        hphx,
        hhphx,
    })
}

fn rel_residual<F: Real>(a: &Tensor<F>, reference: &Tensor<F>) -> f64 {
    let d: f64 = a
        .data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let n = reference.norm().as_f64();
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

impl PenroseChain {
    /// ‖Hx − HH⁺Hx‖ / ‖Hx‖ on the full-resolution composites.
    pub fn identity_residual<F: Real>(&self, g: &Graph<F>) -> f64 {
        rel_residual(g.value(self.hhphx.full()), g.value(self.hx.full()))
    }
}

/// ‖H⁺HH⁺x − H⁺x‖ / ‖H⁺x‖: monitored during training, never optimised.
pub fn second_identity_residual<F: Real>(
    g: &mut Graph<F>,
    blur: (&BlurModel, &ParamStore<F>),
    pinv: (&PinvModel, &ParamStore<F>),
    stacks: (&BlurFeatureStack, &PinvFeatureStack),
    x: Var,
) -> Result<f64> {
    let px = pinv.0.pinv_of_any(g, pinv.1, x, stacks.1)?;
    let hpx = blur.0.apply_h(g, blur.1, px, stacks.0)?.full();
    let phpx = pinv.0.pinv_of_any(g, pinv.1, hpx, stacks.1)?;
    Ok(rel_residual(g.value(phpx), g.value(px)))
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

    fn models() -> ((BlurModel, ParamStore<f32>), (PinvModel, ParamStore<f32>)) {
        let bcfg = BlurModelConfig::tiny(1, 1);
        let pcfg = PinvModelConfig::matching(&bcfg);
        (BlurModel::build(bcfg, 1).unwrap(), PinvModel::build(pcfg, 2).unwrap())
    }

    fn stack_of<F: Real>(g: &mut Graph<F>, ch: [usize; 3], h: usize, seed: Option<u64>) -> FeatureStack {
        FeatureStack {
            levels: [0, 1, 2].map(|i| {
                let s = [1, ch[i], h >> (2 - i), h >> (2 - i)];
                g.input(match seed {
                    Some(sd) => rand_t(&s, sd + i as u64),
                    None => Tensor::zeros(&s),
                })
            }),
        }
    }

    #[test]
    fn estimate_pinv_shapes_zero_determinism() {
        let (_, (m, store)) = models();
        let mut g = Graph::<f32>::new();
        let zero = stack_of(&mut g, m.cfg.feature_channels, 16, None);
        let out = m.estimate_pinv(&mut g, &store, &zero).unwrap();
        for i in 0..3 {
            assert_eq!(g.shape(out.levels[i]), g.shape(zero.levels[i]));
            assert_eq!(g.value(out.levels[i]).max_abs(), 0.0);
        }
        let run = || {
            let mut g = Graph::<f32>::new();
            let s = stack_of(&mut g, m.cfg.feature_channels, 16, Some(3));
            let o = m.estimate_pinv(&mut g, &store, &s).unwrap();
            o.levels.map(|v| g.value(v).clone())
        };
        assert_eq!(run(), run());

        let mut g = Graph::<f32>::new();
        let wrong = stack_of(&mut g, [4, 4, 5], 16, None);
        assert!(m.estimate_pinv(&mut g, &store, &wrong).is_err());
    }

    #[test]
    fn pinv_apply_is_linear_and_shape_preserving() {
        let (_, (m, store)) = models();
        let p = store.cast::<f64>();
        let mut g = Graph::<f64>::new();
        let s = stack_of(&mut g, m.cfg.feature_channels, 16, Some(5));
        let zero = g.input(Tensor::zeros(&[1, 3, 16, 16]));
        let z = m.pinv_of_any(&mut g, &p, zero, &s).unwrap();
        assert_eq!(g.shape(z), &[1, 3, 16, 16]);
        assert_eq!(g.value(z).max_abs(), 0.0);
        let (a, b) = (rand_t::<f64>(&[1, 3, 16, 16], 6), rand_t::<f64>(&[1, 3, 16, 16], 7));
        let mix = a.zip_map(&b, |x, y| 3.0 * x - y).unwrap();
        let mut run = |t: Tensor<f64>| {
            let v = g.input(t);
            let o = m.pinv_of_any(&mut g, &p, v, &s).unwrap();
            g.value(o).clone()
        };
        let lhs = run(mix);
        let rhs = run(a).zip_map(&run(b), |x, y| 3.0 * x - y).unwrap();
        assert!(lhs.zip_map(&rhs, |x, y| x - y).unwrap().norm() / rhs.norm() < 1e-10);
    }

    #[test]
    fn inverse_loss_floor_and_oracle() {
        let mut g = Graph::<f64>::new();
        let a = ApplyHOutput {
            levels: [0, 1, 2].map(|i| g.input(rand_t(&[1, 1, 8 >> i, 8 >> i], 10 + i as u64))),
        };
        let l = inverse_loss(&mut g, &a, &a, 1e-3).unwrap();
        assert!((g.value(l).data()[0] - 3e-3).abs() < 1e-12);
        let b = ApplyHOutput {
            levels: [0, 1, 2].map(|i| g.input(rand_t(&[1, 1, 8 >> i, 8 >> i], 20 + i as u64))),
        };
        let l = inverse_loss(&mut g, &a, &b, 1e-3).unwrap();
        let want: f64 = (0..3).map(|i| charbonnier(g.value(a.levels[i]), g.value(b.levels[i]), 1e-3).unwrap()).sum();
        assert!((g.value(l).data()[0] - want).abs() < 1e-6);
        let short = ApplyHOutput {
            levels: [b.levels[1], b.levels[1], b.levels[2]],
        };
        assert!(inverse_loss(&mut g, &a, &short, 1e-3).is_err());
    }

    #[test]
    fn inverse_loss_gradients_leave_blur_frozen() {
        let ((bm, bstore), (pm, pstore)) = models();
        let mut bp = bstore.cast::<f64>();
        for (i, (name, t)) in bstore.iter().enumerate() {
            bp.set(name, rand_t::<f64>(t.shape(), 200 + i as u64).scale(0.3).zip_map(&t.cast(), |a, b| a + b).unwrap())
                .unwrap();
        }
        let mut pp = pstore.cast::<f64>();
        for (i, (name, t)) in pstore.iter().enumerate() {
            pp.set(name, rand_t::<f64>(t.shape(), 300 + i as u64).scale(0.3).zip_map(&t.cast(), |a, b| a + b).unwrap())
                .unwrap();
        }
        let y = rand_t::<f64>(&[1, 1, 8, 8], 40).map(|v| 0.5 + 0.4 * v);
        let x = rand_t::<f64>(&[1, 1, 8, 8], 41).map(|v| 0.5 + 0.4 * v);
        let before = bp.checksum();
        let check = check_params(&mut pp, 1e-4, 6, |g, p| {
            let (yv, xv) = (g.input(y.clone()), g.input(x.clone()));
            let chain = penrose_chain(g, (&bm, &bp), (&pm, p), yv, xv)?;
            inverse_loss(g, &chain.hx, &chain.hhphx, 1e-3)
        })
        .unwrap();
        assert!(check.rel_error < 1e-3, "{check:?}");
        assert_eq!(before, bp.checksum());

        let mut g = Graph::new();
        g.train(&pp);
        let (yv, xv) = (g.input(y.clone()), g.input(x.clone()));
        let chain = penrose_chain(&mut g, (&bm, &bp), (&pm, &pp), yv, xv).unwrap();
        let l = inverse_loss(&mut g, &chain.hx, &chain.hhphx, 1e-3).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(bp.ids().all(|id| grads.param(&bp, id).is_none()));
        assert!(chain.identity_residual(&g).is_finite());
        let r2 = second_identity_residual(&mut g, (&bm, &bp), (&pm, &pp), (&chain.blur_stack, &chain.pinv_stack), xv).unwrap();
        assert!(r2.is_finite());
    }
}
