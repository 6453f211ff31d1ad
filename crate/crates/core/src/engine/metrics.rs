//! PSNR and SSIM on BT.601 luma, plus a small trait for plugging in other metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identical inputs report this instead of +∞.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    #[default]
    YcbcrY,
    Rgb,
}

/// Planes of an image `[C, H, W]` or `[1, C, H, W]` as `f64`, after range checks.
fn planes(img: &Tensor<f32>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let s = img.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape(format!("metric input must be [C,H,W], got {s:?}"))),
    };
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("metric input needs 1 or 3 channels, got {c}")));
    }
    const SLACK: f32 = 1e-6;
    if let Some(v) = img.data().iter().find(|v| !(**v >= -SLACK && **v <= 1.0 + SLACK)) {
        return Err(Error::contract(format!("metric inputs must lie in [0, 1], found {v}")));
    }
    Ok((c, h, w, img.data().iter().map(|v| *v as f64).collect()))
}

/// BT.601 full-range luma `0.299 R + 0.587 G + 0.114 B`; single-channel input is returned as is.
pub fn luma(img: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w, d) = planes(img)?;
    if c == 1 {
        return Ok((d, h, w));
    }
    let n = h * w;
    let y = (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect();
    Ok((y, h, w))
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// PSNR from a mean squared error, peak 1.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, space: ColorSpace) -> Result<f64> {
    same_shape(a, b)?;
    let (x, y) = match space {
        ColorSpace::YcbcrY => (luma(a)?.0, luma(b)?.0),
        ColorSpace::Rgb => (planes(a)?.3, planes(b)?.3),
    };
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable valid-mode filtering with the normalised Gaussian window.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of two single planes with data range 1.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim plane length mismatch"));
    }
    let taps = gaussian_taps();
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM on the luma channel.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let (x, h, w) = luma(a)?;
    let (y, _, _) = luma(b)?;
    ssim_plane(&x, &y, h, w)
}

/// A full-reference image metric over `[C, H, W]` images in `[0, 1]`.
pub trait Metric: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64>;
}

pub struct Psnr(pub ColorSpace);

impl Metric for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn compute(&self, reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64> {
        psnr(reference, test, self.0)
    }
}

pub struct Ssim;

impl Metric for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }

    fn compute(&self, reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64> {
        ssim(reference, test)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_img(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_goldens() {
        let a = Tensor::full(&[3, 8, 8], 0.5f32);
        assert_eq!(psnr(&a, &a, ColorSpace::YcbcrY).unwrap(), PSNR_CAP);
        let b = Tensor::full(&[3, 8, 8], 0.6f32);
        assert!((psnr(&a, &b, ColorSpace::YcbcrY).unwrap() - 20.0).abs() < 1e-4);
        assert!((psnr(&a, &b, ColorSpace::Rgb).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let (a, b) = (rand_img(1, 3, 9, 7), rand_img(2, 3, 9, 7));
        let n = 63;
        let (da, db) = (a.data(), b.data());
        let mut se = 0.0;
        for i in 0..n {
            let ya = 0.299 * da[i] as f64 + 0.587 * da[n + i] as f64 + 0.114 * da[2 * n + i] as f64;
            let yb = 0.299 * db[i] as f64 + 0.587 * db[n + i] as f64 + 0.114 * db[2 * n + i] as f64;
            se += (ya - yb).powi(2);
        }
        let want = 10.0 * (n as f64 / se).log10();
        assert!((psnr(&a, &b, ColorSpace::YcbcrY).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_rejected() {
        let a = Tensor::full(&[1, 12, 12], 1.5f32);
        assert!(matches!(psnr(&a, &a, ColorSpace::Rgb), Err(Error::Contract(_))));
        let b = Tensor::full(&[2, 12, 12], 0.5f32);
        assert!(ssim(&b, &b).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (a, b) = (rand_img(3, 3, 16, 16), rand_img(4, 3, 16, 16));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    /// Direct 2-D window sums, no separability.
    fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let g = |d: f64| (-d * d / 4.5).exp();
        let z: f64 = (0..11).flat_map(|i| (0..11).map(move |j| g(i as f64 - 5.0) * g(j as f64 - 5.0))).sum();
        let mut acc = 0.0;
        let mut n = 0.0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let wt = g(u as f64 - 5.0) * g(v as f64 - 5.0) / z;
                        let (x, y) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                        ma += wt * x;
                        mb += wt * y;
                        saa += wt * x * x;
                        sbb += wt * y * y;
                        sab += wt * x * y;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += (2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2)
                    / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                n += 1.0;
            }
        }
        acc / n
    }

    #[test]
    fn ssim_matches_naive_windowing() {
        let (a, b) = (rand_img(5, 1, 14, 13), rand_img(6, 1, 14, 13));
        let da: Vec<f64> = a.data().iter().map(|v| *v as f64).collect();
        let db: Vec<f64> = b.data().iter().map(|v| *v as f64).collect();
        let want = naive_ssim(&da, &db, 14, 13);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn metric_trait_objects() {
        let ms: Vec<Box<dyn Metric>> = vec![Box::new(Psnr(ColorSpace::YcbcrY)), Box::new(Ssim)];
        let a = rand_img(7, 3, 12, 12);
        let names: Vec<&str> = ms.iter().map(|m| m.name()).collect();
        assert_eq!(names, ["psnr", "ssim"]);
        assert_eq!(ms[0].compute(&a, &a).unwrap(), PSNR_CAP);
    }
}
