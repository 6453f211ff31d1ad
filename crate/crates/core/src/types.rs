//! Shared domain types: clips, noise, loss weights, and the Charbonnier penalty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sharp,
    Blurred,
    Restored,
}

/// A temporal window of frames, `[T, C, H, W]` with values in `[0, 1]`.
///
/// The restoration target is always the centre frame `(T - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
    pub role: Role,
    pub sequence_id: String,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, role: Role, sequence_id: impl Into<String>) -> Result<Self> {
        let (t, c, _, _) = frames.dims4()?;
        if t % 2 == 0 {
            return Err(Error::contract(format!("clip length must be odd, got {t}")));
        }
        if c == 0 {
            return Err(Error::contract("clip needs at least one channel"));
        }
        if let Some(v) = frames
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::contract(format!(
                "clip values must be finite and in [0, 1], found {v}"
            )));
        }
        Ok(Self {
            frames,
            role,
            sequence_id: sequence_id.into(),
        })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn center_index(&self) -> usize {
        (self.len() - 1) / 2
    }

    /// Frame `t` as a `[1, C, H, W]` tensor.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (_, c, h, w) = self.frames.dims4().expect("rank 4");
        let n = c * h * w;
        Tensor::from_vec(&[1, c, h, w], self.frames.data()[t * n..(t + 1) * n].to_vec())
            .expect("frame slice")
    }

    pub fn center_frame(&self) -> Tensor<f32> {
        self.frame(self.center_index())
    }

    /// The clip with its frames stacked channelwise: `[1, T*C, H, W]`.
    pub fn stacked(&self) -> Tensor<f32> {
        let (t, c, h, w) = self.frames.dims4().expect("rank 4");
        self.frames
            .clone()
            .reshape(&[1, t * c, h, w])
            .expect("same element count")
    }
}

/// Additive white Gaussian noise level in `[0, 1]`-normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::contract(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Gaussian samples with standard deviation `sigma`, deterministic in `seed`.
pub fn gaussian_noise(len: usize, sigma: f64, seed: u64) -> Vec<f32> {
    if sigma == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
}

/// `clip + N(0, sigma²)`, clamped back into `[0, 1]`.
pub fn add_awgn(clip: &VideoClip, spec: NoiseSpec, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok(clip.clone());
    }
    let noise = gaussian_noise(clip.frames.len(), spec.sigma, seed);
    let data = clip
        .frames
        .data()
        .iter()
        .zip(&noise)
        .map(|(v, n)| (v + n).clamp(0.0, 1.0))
        .collect();
    VideoClip::new(
        Tensor::from_vec(clip.frames.shape(), data)?,
        clip.role,
        clip.sequence_id.clone(),
    )
}

/// Loss balancing. `lambda_kl` scales the KL term inside the VAE bracket.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_vae: f64,
    pub lambda_kl: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_vae: 5e-2,
            lambda_kl: 1.0,
            charbonnier_eps: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rec,
            self.lambda_vae,
            self.lambda_kl,
            self.charbonnier_eps,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::contract(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        if self.charbonnier_eps == 0.0 {
            return Err(Error::contract("charbonnier eps must be > 0"));
        }
        Ok(())
    }
}

/// Mean of `sqrt((a - b)² + eps²)` over all elements.
pub fn charbonnier<F: Real>(a: &Tensor<F>, b: &Tensor<F>, eps: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "charbonnier operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let eps2 = eps * eps;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            (d * d + eps2).sqrt()
        })
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// Graph version of [`charbonnier`]; returns a scalar node.
pub fn charbonnier_loss<F: Real>(g: &mut Graph<F>, a: Var, b: Var, eps: f64) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "charbonnier operands differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let d = g.sub(a, b)?;
    let d2 = g.square(d)?;
    let shifted = g.add_scalar(d2, F::lit(eps * eps));
    let r = g.sqrt(shifted);
    Ok(g.mean_all(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn charbonnier_floor_and_values() {
        let a = t(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert!((charbonnier(&a, &a, 1e-3).unwrap() - 1e-3).abs() < 1e-15);

        let one = t(&[1], vec![1.0]);
        let zero = t(&[1], vec![0.0]);
        assert!((charbonnier(&one, &zero, 0.0).unwrap() - 1.0).abs() < 1e-15);

        let a = t(&[2], vec![0.3, 0.7]);
        let b = t(&[2], vec![0.1, 0.2]);
        let got = charbonnier(&a, &b, 1e-3).unwrap();
        // (sqrt(0.040001) + sqrt(0.250001)) / 2
        assert!((got - 0.350_001_75).abs() < 1e-7, "{got}");
    }

    #[test]
    fn charbonnier_rejects_shape_mismatch() {
        let a = t(&[2], vec![0.0, 0.0]);
        let b = t(&[3], vec![0.0, 0.0, 0.0]);
        assert!(matches!(charbonnier(&a, &b, 1e-3), Err(Error::Shape(_))));
    }

    #[test]
    fn charbonnier_graph_matches_direct() {
        let a = t(&[1, 1, 2, 2], vec![0.1, 0.9, 0.4, 0.3]);
        let b = t(&[1, 1, 2, 2], vec![0.2, 0.1, 0.4, 0.8]);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let l = charbonnier_loss(&mut g, va, vb, 1e-3).unwrap();
        let direct = charbonnier(&a, &b, 1e-3).unwrap();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-15);
    }

    #[test]
    fn charbonnier_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = t(&[1, 1, 4, 4], (0..16).map(|_| rng.gen::<f64>()).collect());
        let b = t(&[1, 1, 4, 4], (0..16).map(|_| rng.gen::<f64>()).collect());
        let check = gradcheck::check_inputs(&[a, b], 1e-4, 64, |g, v| {
            charbonnier_loss(g, v[0], v[1], 1e-3)
        })
        .unwrap();
        assert!(check.rel_error < 1e-3, "{check:?}");
    }

    fn const_clip(v: f32, t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new(Tensor::full(&[t, 3, h, w], v), Role::Sharp, "c").unwrap()
    }

    #[test]
    fn clip_contract() {
        assert!(VideoClip::new(Tensor::zeros(&[2, 3, 4, 4]), Role::Sharp, "x").is_err());
        assert!(VideoClip::new(Tensor::full(&[1, 3, 4, 4], 1.5), Role::Sharp, "x").is_err());
        let c = const_clip(0.25, 5, 4, 4);
        assert_eq!(c.center_index(), 2);
        assert_eq!(c.stacked().shape(), &[1, 15, 4, 4]);
        assert_eq!(c.center_frame().shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn awgn_zero_sigma_is_identity() {
        let c = const_clip(0.5, 3, 8, 8);
        assert_eq!(add_awgn(&c, NoiseSpec { sigma: 0.0 }, 9).unwrap(), c);
    }

    #[test]
    fn awgn_is_deterministic() {
        let c = const_clip(0.5, 3, 8, 8);
        let spec = NoiseSpec { sigma: 0.01 };
        let a = add_awgn(&c, spec, 77).unwrap();
        let b = add_awgn(&c, spec, 77).unwrap();
        assert_eq!(a.frames().data(), b.frames().data());
        assert_ne!(a.frames().data(), c.frames().data());
    }

    #[test]
    fn awgn_standard_deviation() {
        let c = VideoClip::new(Tensor::full(&[1, 1, 64, 64], 0.5), Role::Sharp, "c").unwrap();
        let out = add_awgn(&c, NoiseSpec { sigma: 0.05 }, 123).unwrap();
        let d: Vec<f64> = out
            .frames()
            .data()
            .iter()
            .map(|v| *v as f64 - 0.5)
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var.sqrt() - 0.05).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn awgn_rejects_negative_sigma() {
        let c = const_clip(0.5, 1, 4, 4);
        assert!(matches!(
            add_awgn(&c, NoiseSpec { sigma: -0.1 }, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_weight_defaults() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_rec, 1.0);
        assert_eq!(w.lambda_vae, 5e-2);
        assert_eq!(w.charbonnier_eps, 1e-3);
        w.validate().unwrap();
    }
}
