//! Metric values checked against constants from scikit-image
//! (`structural_similarity(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1)`).

use vdpi::engine::metrics::{luma, psnr, ssim, ssim_plane, ColorSpace, PSNR_CAP};
use vdpi::Tensor;

fn halves(h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| if i % w < w / 2 { 0.9 } else { 0.1 }).collect()
}

fn modular(h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
}

#[test]
fn ssim_of_image_and_negative() {
    let a = halves(32, 32);
    let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    let s = ssim_plane(&a, &b, 32, 32).unwrap();
    assert!((s - (-0.05943170870348254)).abs() < 1e-4, "{s}");
}

#[test]
fn ssim_of_two_modular_patterns() {
    let x = modular(32, 32);
    let y: Vec<f64> = (0..32 * 32).map(|i| ((i * 53) % 97) as f64 / 96.0).collect();
    let s = ssim_plane(&x, &y, 32, 32).unwrap();
    assert!((s - (-0.019389037092999745)).abs() < 1e-4, "{s}");
}

#[test]
fn ssim_of_affine_distortion_non_square() {
    let (h, w) = (24, 40);
    let x = modular(h, w);
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| 0.8 * v + 0.1 + 0.05 * (i as f64 / 7.0).sin())
        .collect();
    let s = ssim_plane(&x, &y, h, w).unwrap();
    assert!((s - 0.9695564511400951).abs() < 1e-4, "{s}");
}

#[test]
fn psnr_of_constant_images() {
    for (lo, hi) in [(0.2f32, 0.3f32), (0.5, 0.6), (0.0, 0.1)] {
        let a = Tensor::full(&[3, 16, 16], lo);
        let b = Tensor::full(&[3, 16, 16], hi);
        let p = psnr(&a, &b, ColorSpace::YcbcrY).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{lo}/{hi}: {p}");
    }
    let a = Tensor::full(&[3, 8, 8], 0.25f32);
    assert_eq!(psnr(&a, &a, ColorSpace::YcbcrY).unwrap(), PSNR_CAP);
    assert_eq!(PSNR_CAP, 100.0);
    assert!((ssim(&Tensor::full(&[3, 11, 11], 0.4f32), &Tensor::full(&[3, 11, 11], 0.4f32)).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn luma_weights() {
    let mut d = vec![0.0f32; 3];
    d[0] = 1.0;
    let (y, _, _) = luma(&Tensor::from_vec(&[3, 1, 1], d).unwrap()).unwrap();
    assert!((y[0] - 0.299).abs() < 1e-7);
    let px = Tensor::from_vec(&[3, 1, 1], vec![0.2f32, 0.4, 0.8]).unwrap();
    let (y, _, _) = luma(&px).unwrap();
    assert!((y[0] - (0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.8)).abs() < 1e-6);
}

#[test]
fn out_of_range_and_small_inputs_rejected() {
    let a = Tensor::full(&[3, 8, 8], 0.5f32);
    assert!(ssim(&a, &a).is_err());
    let bad = Tensor::full(&[3, 8, 8], 1.5f32);
    assert!(psnr(&a, &bad, ColorSpace::Rgb).is_err());
    assert!(psnr(&a, &Tensor::full(&[3, 8, 9], 0.5f32), ColorSpace::Rgb).is_err());
}
