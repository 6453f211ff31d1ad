//! Exact operators for known, spatially uniform blurs with circular boundaries.
//!
//! Images are `[H, W]` double-precision tensors. The blur is a circulant
//! operator, so its Tikhonov-regularised pseudo-inverse is diagonal in the
//! 2-D DFT basis.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DELTA: f64 = 1e-3;
pub const DEFAULT_NULL_THRESHOLD: f64 = 1e-6;

/// Odd `k×k` kernel with its regulariser δ.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformBlur {
    kernel: Tensor<f64>,
    pub delta: f64,
}

impl UniformBlur {
    pub fn new(kernel: Tensor<f64>, delta: f64) -> Result<Self> {
        let s = kernel.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] % 2 == 0 {
            return Err(Error::contract(format!("kernel must be odd and square, got {s:?}")));
        }
        if !kernel.all_finite() || !kernel.sum().is_finite() {
            return Err(Error::contract("kernel must be finite"));
        }
        Ok(Self { kernel, delta })
    }

    pub fn identity(delta: f64) -> Self {
        Self::new(Tensor::from_vec(&[1, 1], vec![1.0]).expect("1x1"), delta).expect("valid")
    }

    /// Normalised `k×k` box.
    pub fn boxed(k: usize, delta: f64) -> Result<Self> {
        Self::new(Tensor::full(&[k, k], 1.0 / (k * k) as f64), delta)
    }

    /// Normalised, sampled isotropic Gaussian.
    pub fn gaussian(k: usize, sigma: f64, delta: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::contract("gaussian sigma must be > 0"));
        }
        let c = (k / 2) as f64;
        let mut data: Vec<f64> = (0..k * k)
            .map(|i| {
                let (y, x) = ((i / k) as f64 - c, (i % k) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= s);
        Self::new(Tensor::from_vec(&[k, k], data)?, delta)
    }

    pub fn kernel(&self) -> &Tensor<f64> {
        &self.kernel
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self {
            kernel: self.kernel.clone(),
            delta,
        }
    }

    fn check_image(&self, x: &Tensor<f64>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("oracle images are [H, W], got {s:?}")));
        }
        if self.size() > s[0] || self.size() > s[1] {
            return Err(Error::contract(format!(
                "kernel {}×{} larger than image {}×{}",
                self.size(),
                self.size(),
                s[0],
                s[1]
            )));
        }
        Ok((s[0], s[1]))
    }

    fn check_delta(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::contract(format!("δ must be > 0, got {}", self.delta)));
        }
        Ok(())
    }

    /// DFT of the kernel embedded (centre at the origin) in an `h×w` grid.
    pub fn spectrum(&self, h: usize, w: usize) -> Vec<Complex64> {
        let k = self.size();
        let c = (k / 2) as isize;
        let mut grid = vec![Complex64::new(0.0, 0.0); h * w];
        for a in 0..k {
            for b in 0..k {
                let y = (a as isize - c).rem_euclid(h as isize) as usize;
                let x = (b as isize - c).rem_euclid(w as isize) as usize;
                grid[y * w + x] += self.kernel.data()[a * k + b];
            }
        }
        fft2(&mut grid, h, w, false);
        grid
    }
}

/// In-place 2-D DFT (unnormalised forward, `1/(hw)`-normalised inverse).
pub fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

fn to_complex(x: &Tensor<f64>) -> Vec<Complex64> {
    x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

fn real_image(data: &[Complex64], h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(&[h, w], data.iter().map(|c| c.re).collect()).expect("sized")
}

/// Circular convolution `y[i] = Σ_a k[a] x[i − (a − c)]`.
pub fn blur_apply(x: &Tensor<f64>, b: &UniformBlur) -> Result<Tensor<f64>> {
    let (h, w) = b.check_image(x)?;
    let k = b.size();
    let c = (k / 2) as isize;
    let (kd, xd) = (b.kernel.data(), x.data());
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..k {
                let y = (i as isize - (a as isize - c)).rem_euclid(h as isize) as usize;
                for bb in 0..k {
                    let xx = (j as isize - (bb as isize - c)).rem_euclid(w as isize) as usize;
                    acc += kd[a * k + bb] * xd[y * w + xx];
                }
            }
            out[i * w + j] = acc;
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// `(HᵀH + δI)⁻¹ Hᵀ y`, evaluated per frequency as `conj(K̂) Ŷ / (|K̂|² + δ)`.
pub fn pinv_apply_exact(y: &Tensor<f64>, b: &UniformBlur) -> Result<Tensor<f64>> {
    b.check_delta()?;
    let (h, w) = b.check_image(y)?;
    let spec = b.spectrum(h, w);
    let mut f = to_complex(y);
    fft2(&mut f, h, w, false);
    for (v, k) in f.iter_mut().zip(&spec) {
        *v = k.conj() * *v / (k.norm_sqr() + b.delta);
    }
    fft2(&mut f, h, w, true);
    Ok(real_image(&f, h, w))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenroseResiduals {
    /// ‖HH⁺Hx − Hx‖ / ‖Hx‖
    pub r1: f64,
    /// ‖H⁺HH⁺x − H⁺x‖ / ‖H⁺x‖
    pub r2: f64,
}

fn rel_residual(num: &Tensor<f64>, reference: &Tensor<f64>, what: &str) -> Result<f64> {
    let n = num.zip_map(reference, |a, b| a - b)?.norm();
    let d = reference.norm();
    if d == 0.0 {
        if n == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::contract(format!("{what} has zero norm but the residual does not")));
    }
    Ok(n / d)
}

pub fn penrose_residuals(b: &UniformBlur, x: &Tensor<f64>) -> Result<PenroseResiduals> {
    b.check_delta()?;
    let hx = blur_apply(x, b)?;
    let hphx = pinv_apply_exact(&hx, b)?;
    let hhphx = blur_apply(&hphx, b)?;
    let px = pinv_apply_exact(x, b)?;
    let hpx = blur_apply(&px, b)?;
    let phpx = pinv_apply_exact(&hpx, b)?;
    Ok(PenroseResiduals {
        r1: rel_residual(&hhphx, &hx, "Hx")?,
        r2: rel_residual(&phpx, &px, "H⁺x")?,
    })
}

/// Fraction of `x`'s spectral energy on frequencies where `|K̂| < threshold`.
pub fn null_space_energy(b: &UniformBlur, x: &Tensor<f64>, threshold: f64) -> Result<f64> {
    let (h, w) = b.check_image(x)?;
    let spec = b.spectrum(h, w);
    let mut f = to_complex(x);
    fft2(&mut f, h, w, false);
    let (mut null, mut total) = (0.0, 0.0);
    for (v, k) in f.iter().zip(&spec) {
        let e = v.norm_sqr();
        total += e;
        if k.norm() < threshold {
            null += e;
        }
    }
    Ok(if total == 0.0 { 0.0 } else { null / total })
}

/// Outcome of [`self_check`].
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub residuals: PenroseResiduals,
    /// Relative error of the FFT pseudo-inverse against a dense normal-equation solve.
    pub dense_rel_error: f64,
    /// Relative error of the direct blur against the dense circulant product.
    pub dense_blur_error: f64,
    pub null_energy: f64,
}

/// Dense `HW×HW` circulant matrix of `b`, row-major.
pub fn dense_matrix(b: &UniformBlur, h: usize, w: usize) -> Result<Vec<f64>> {
    let n = h * w;
    let mut m = vec![0.0; n * n];
    for col in 0..n {
        let mut e = Tensor::zeros(&[h, w]);
        e.data_mut()[col] = 1.0;
        let he = blur_apply(&e, b)?;
        for (row, v) in he.data().iter().enumerate() {
            m[row * n + col] = *v;
        }
    }
    Ok(m)
}

/// Solves the symmetric positive-definite system by Cholesky factorisation.
fn solve_spd(a: &[f64], rhs: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(Error::contract("normal matrix is not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (rhs[i] - (0..i).map(|k| l[i * n + k] * z[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (z[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// Penrose residuals, null-space energy and dense-matrix equivalence for one image.
pub fn self_check(b: &UniformBlur, x: &Tensor<f64>) -> Result<OracleReport> {
    let residuals = penrose_residuals(b, x)?;
    let (h, w) = b.check_image(x)?;
    let n = h * w;
    let m = dense_matrix(b, h, w)?;
    let mv = |v: &[f64], transpose: bool| -> Vec<f64> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if transpose { m[j * n + i] } else { m[i * n + j] } * v[j])
                    .sum()
            })
            .collect()
    };
    let hx = blur_apply(x, b)?;
    let dense_hx = mv(x.data(), false);
    let dense_blur_error = rel_vec(hx.data(), &dense_hx);

    let mut normal = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            normal[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>();
        }
        normal[i * n + i] += b.delta;
    }
    let dense = solve_spd(&normal, &mv(hx.data(), true), n)?;
    let fast = pinv_apply_exact(&hx, b)?;
    Ok(OracleReport {
        residuals,
        dense_rel_error: rel_vec(fast.data(), &dense),
        dense_blur_error,
        null_energy: null_space_energy(b, x, DEFAULT_NULL_THRESHOLD)?,
    })
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if s == 0.0 {
        d
    } else {
        d / s
    }
}
