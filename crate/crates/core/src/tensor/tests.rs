use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_inputs;
use super::*;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output element contributes a distinct gradient.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = g.input(rand_t(g.shape(v), seed));
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

fn assert_grad(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let check = check_inputs(inputs, 1e-5, 200, f).unwrap();
    assert!(check.rel_error < 1e-6, "{check:?}");
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, groups: usize) -> Tensor<f64> {
    let (n, ci, h, w) = x.dims4().unwrap();
    let (co, cig, kh, kw) = k.dims4().unwrap();
    let cog = co / groups;
    let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            let gi = o / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xi = ((b * ci + gi * cig + c) * h + oy * stride + ky) * w
                                    + ox * stride
                                    + kx;
                                acc += x.data()[xi] * k.data()[((o * cig + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_forward_matches_naive() {
    for &(ci, co, k, stride, groups) in &[
        (3, 4, 3, 1, 1),
        (4, 6, 2, 2, 2),
        (5, 5, 3, 1, 5),
        (4, 8, 1, 1, 1),
        (2, 3, 3, 2, 1),
    ] {
        let x = rand_t(&[2, ci, 7, 6], 1);
        let kt = rand_t(&[co, ci / groups, k, k], 2);
        let mut g = Graph::new();
        let (vx, vk) = (g.input(x.clone()), g.input(kt.clone()));
        let y = g.conv2d(vx, vk, stride, groups).unwrap();
        let want = naive_conv(&x, &kt, stride, groups);
        let got = g.value(y);
        assert_eq!(got.shape(), want.shape());
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-12, "ci={ci} co={co} k={k}: {err}");
    }
}

#[test]
fn conv_gradients() {
    for &(ci, co, k, stride, groups) in &[
        (3, 4, 3, 1, 1),
        (4, 6, 2, 2, 2),
        (5, 5, 3, 1, 5),
        (4, 8, 1, 1, 1),
        (2, 3, 3, 2, 1),
    ] {
        let x = rand_t(&[2, ci, 6, 6], 3);
        let kt = rand_t(&[co, ci / groups, k, k], 4);
        assert_grad(&[x, kt], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, groups)?;
            project(g, y, 9)
        });
    }
}

#[test]
fn pad_gradients() {
    for mode in [PadMode::Zero, PadMode::Replicate] {
        assert_grad(&[rand_t(&[1, 2, 4, 5], 5)], |g, v| {
            let y = g.pad(v[0], 2, mode)?;
            project(g, y, 6)
        });
    }
}

#[test]
fn replicate_pad_values() {
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.input(x);
    let p = g.pad(v, 1, PadMode::Replicate).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(p).data(), &want);
}

#[test]
fn resampling_gradients() {
    assert_grad(&[rand_t(&[1, 8, 3, 2], 7)], |g, v| {
        let y = g.pixel_shuffle(v[0])?;
        project(g, y, 8)
    });
    assert_grad(&[rand_t(&[2, 2, 3, 3], 9)], |g, v| {
        let y = g.upsample_nearest(v[0])?;
        project(g, y, 10)
    });
    for &(oh, ow) in &[(8, 6), (2, 3), (5, 7)] {
        assert_grad(&[rand_t(&[1, 2, 4, 3], 11)], |g, v| {
            let y = g.resize(v[0], oh, ow)?;
            project(g, y, 12)
        });
    }
}

#[test]
fn pixel_shuffle_layout() {
    // channel k of a 4-channel pixel lands at offset (k / 2, k % 2)
    let x = Tensor::from_vec(&[1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.input(x);
    let y = g.pixel_shuffle(v).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn bilinear_upsample_matches_half_pixel_convention() {
    let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.input(x);
    let y = g.resize(v, 1, 4).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn broadcast_and_reduction_gradients() {
    let shapes: [&[usize]; 4] = [&[1, 3, 1, 1], &[2, 3, 1, 1], &[2, 1, 4, 4], &[1, 1, 1, 1]];
    for s in shapes {
        assert_grad(&[rand_t(&[2, 3, 4, 4], 13), rand_t(s, 14)], |g, v| {
            let a = g.mul_b(v[0], v[1])?;
            let b = g.add_b(a, v[1])?;
            let c = g.sub_b(b, v[1])?;
            let m = g.mean_keep(c, &[2, 3])?;
            let d = g.sub_b(c, m)?;
            project(g, d, 15)
        });
    }
}

#[test]
fn elementwise_gradients() {
    let pos = rand_t(&[1, 2, 3, 3], 16).map(|v| v.abs() + 0.5);
    assert_grad(&[pos.clone(), rand_t(&[1, 2, 3, 3], 17)], |g, v| {
        let a = g.sqrt(v[0]);
        let b = g.exp(v[1]);
        let c = g.powf(v[0], -0.5);
        let d = g.mul(a, b)?;
        let e = g.add(d, c)?;
        let f = g.scale(e, 0.3);
        let h = g.add_scalar(f, 2.0);
        let r = g.reshape(h, &[2, 9])?;
        let m = g.mean_all(r);
        let s = g.square(m)?;
        Ok(s)
    });
}

#[test]
fn channel_slice_concat_gradients() {
    assert_grad(&[rand_t(&[2, 5, 3, 3], 18), rand_t(&[2, 2, 3, 3], 19)], |g, v| {
        let a = g.slice_channels(v[0], 1, 3)?;
        let b = g.slice_channels(v[0], 0, 2)?;
        let c = g.concat_channels(&[a, v[1], b])?;
        project(g, c, 20)
    });
}

#[test]
fn frozen_store_gets_no_gradient() {
    let mut trained = ParamStore::<f64>::new();
    let a = trained.add("a", rand_t(&[1, 1, 2, 2], 1));
    let mut frozen = ParamStore::<f64>::new();
    let b = frozen.add("b", rand_t(&[1, 1, 2, 2], 2));
    let mut g = Graph::new();
    g.train(&trained);
    let (va, vb) = (g.param(&trained, a), g.param(&frozen, b));
    let p = g.mul(va, vb).unwrap();
    let s = g.sum_all(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param(&trained, a).unwrap(), frozen.get(b));
    assert!(grads.param(&frozen, b).is_none());
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
    let mut opt = Adam::new(&store, AdamConfig::default());
    for _ in 0..2000 {
        let mut g = Graph::new();
        g.train(&store);
        let w = g.param(&store, id);
        let sq = g.square(w).unwrap();
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap();
        opt.step(&mut store, &grads, 1e-2);
    }
    assert!(store.get(id).max_abs() < 1e-2, "{:?}", store.get(id));
}

#[test]
fn adam_clips_global_norm() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap());
    let cfg = AdamConfig {
        clip_norm: Some(1.0),
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(&store, cfg);
    let mut g = Graph::new();
    g.train(&store);
    let w = g.param(&store, id);
    let s = g.scale(w, 100.0);
    let l = g.sum_all(s);
    let grads = g.backward(l).unwrap();
    let norm = opt.step(&mut store, &grads, 0.1);
    assert_eq!(norm, 100.0);
    // first Adam step moves by lr regardless of scale
    assert!((store.get(id).data()[0] + 0.1).abs() < 1e-6);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(rand_t(&[2, 2], 1));
    assert!(matches!(g.backward(v), Err(Error::Shape(_))));
}
