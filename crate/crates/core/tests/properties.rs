use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdpi::blocks::Builder;
use vdpi::blur::{BlurModel, BlurModelConfig, FeatureStack};
use vdpi::data::{reflect_index, translation_kernel};
use vdpi::engine::{crop, pad_reflect, Checkpoint, CheckpointMeta, ModelSpec};
use vdpi::engine::metrics::{psnr, ssim, ColorSpace};
use vdpi::engine::{cosine_lr, Stage, TrainConfig};
use vdpi::oracle::{blur_apply, pinv_apply_exact, UniformBlur};
use vdpi::pyramid::{decompose, reconstruct, SamplerWeights};
use vdpi::{Graph, ParamStore, Tensor};

fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn image(shape: &[usize], seed: u64) -> Tensor<f32> {
    rand_t(shape, seed, 0.0, 1.0).cast()
}

fn meta(step: u64) -> CheckpointMeta {
    CheckpointMeta {
        format_version: 0,
        stage: Stage::Blur,
        step,
        total_steps: 1000,
        model: ModelSpec::Blur(BlurModelConfig::tiny(1, 1)),
        train: TrainConfig::default(),
        config_hash: String::new(),
        run_config: None,
        frozen: Vec::new(),
        weights_checksum: String::new(),
        optimizer: String::new(),
        last_loss: Some(0.25),
        arrays: Vec::new(),
    }
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.zip_map(b, |x, y| x - y).unwrap().norm() / b.norm().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pyramid_reconstruction_is_exact(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, hk in 1usize..4, wk in 1usize..4) {
        let mut store = ParamStore::new();
        let w = SamplerWeights::new(&mut Builder::new(&mut store, 0), "s");
        for (i, name) in ["s.down", "s.up"].into_iter().enumerate() {
            let k = rand_t(&[1, 1, 3, 3], seed ^ (i as u64 + 1), -1.0, 1.0);
            let l1: f64 = k.data().iter().map(|v| v.abs()).sum();
            store.set(name, k.scale(1.0 / l1).cast()).unwrap();
        }
        let x = image(&[n, c, 4 * hk, 4 * wk], seed);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let d = decompose(&mut g, &store, &w, xv).unwrap();
        let r = reconstruct(&mut g, &store, &w, &d).unwrap();
        prop_assert!(g.value(r).zip_map(&x, |a, b| a - b).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn psi_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (m, store) = BlurModel::build(BlurModelConfig::tiny(3, 3), 5).unwrap();
        let mut p = store.cast::<f64>();
        for (i, (name, t)) in store.iter().enumerate() {
            if name.starts_with("psi.") {
                p.set(name, rand_t(t.shape(), seed.wrapping_add(i as u64), -1.0, 1.0)).unwrap();
            }
        }
        let mut g = Graph::new();
        let ch = m.cfg.feature_channels;
        let stack = FeatureStack {
            levels: [0usize, 1, 2].map(|i| g.input(rand_t(&[1, ch[i], 16 >> (2 - i), 16 >> (2 - i)], seed ^ (77 + i as u64), -1.0, 1.0))),
        };
        let u1 = rand_t(&[1, 3, 16, 16], seed ^ 1, -1.0, 1.0);
        let u2 = rand_t(&[1, 3, 16, 16], seed ^ 2, -1.0, 1.0);
        let mut run = |u: Tensor<f64>| {
            let v = g.input(u);
            m.apply_h(&mut g, &p, v, &stack).unwrap().levels.map(|l| g.value(l).clone())
        };
        let mix = run(u1.zip_map(&u2, |x, y| a * x + b * y).unwrap());
        let (o1, o2) = (run(u1), run(u2));
        for lvl in 0..3 {
            let want = o1[lvl].zip_map(&o2[lvl], |x, y| a * x + b * y).unwrap();
            if want.norm() > 1e-9 {
                prop_assert!(rel_err(&mix[lvl], &want) < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_blur_and_pinv_are_linear(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]), side in 5usize..12, a in -3.0f64..3.0) {
        let b = UniformBlur::gaussian(k, 1.0, 1e-3).unwrap();
        let x1 = rand_t(&[side, side], seed, -1.0, 1.0);
        let x2 = rand_t(&[side, side], seed ^ 9, -1.0, 1.0);
        let mix = x1.zip_map(&x2, |p, q| a * p + q).unwrap();
        for f in [blur_apply, pinv_apply_exact] {
            let lhs = f(&mix, &b).unwrap();
            let rhs = f(&x1, &b).unwrap().zip_map(&f(&x2, &b).unwrap(), |p, q| a * p + q).unwrap();
            prop_assert!(rel_err(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn box_blur_preserves_mean(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]), side in 5usize..12) {
        let b = UniformBlur::boxed(k, 1e-3).unwrap();
        let x = rand_t(&[side, side], seed, 0.0, 1.0);
        let y = blur_apply(&x, &b).unwrap();
        prop_assert!((y.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), c in prop::sample::select(vec![1usize, 3]), side in 11usize..24) {
        let a = image(&[c, side, side], seed);
        let b = image(&[c, side, side], seed ^ 5);
        for space in [ColorSpace::YcbcrY, ColorSpace::Rgb] {
            let p = psnr(&a, &b, space).unwrap();
            prop_assert_eq!(p, psnr(&b, &a, space).unwrap());
            prop_assert!(p > 0.0 && p < 100.0);
            prop_assert_eq!(psnr(&a, &a, space).unwrap(), 100.0);
        }
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), arrays in 1usize..5) {
        let mut store = ParamStore::new();
        for i in 0..arrays {
            let shape = [1 + (seed as usize + i) % 3, 1 + i, 2];
            store.add(format!("p{i}"), rand_t(&shape, seed ^ i as u64, -5.0, 5.0).cast::<f32>());
        }
        let ck = Checkpoint::from_store(meta(seed % 1000), &store);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut fresh = ParamStore::new();
        for (n, t) in store.iter() {
            fresh.add(n.to_string(), Tensor::zeros(t.shape()));
        }
        back.restore_into(&mut fresh).unwrap();
        prop_assert_eq!(fresh.checksum(), store.checksum());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cosine_schedule_stays_between_endpoints(total in 1u64..10_000, frac in 0.0f64..=1.0, hi in 1e-5f64..1.0, ratio in 1e-4f64..1.0) {
        let lo = hi * ratio;
        let step = ((total as f64) * frac) as u64;
        let lr = cosine_lr(step, total, hi, lo).unwrap();
        prop_assert!(lr <= hi && lr >= lo);
        if step < total {
            prop_assert!(cosine_lr(step + 1, total, hi, lo).unwrap() <= lr);
        }
        prop_assert!(cosine_lr(total + 1, total, hi, lo).is_err());
    }

    #[test]
    fn reflect_index_lands_in_range(i in -500isize..500, len in 1usize..50) {
        let r = reflect_index(i, len);
        prop_assert!(r < len);
        if i >= 0 && (i as usize) < len {
            prop_assert_eq!(r, i as usize);
        }
        prop_assert_eq!(reflect_index(-i, len), r);
    }

    #[test]
    fn translation_kernel_is_a_normalised_line(half in 0usize..5, v in 1usize..4, dir in prop::sample::select(vec![(0isize, 1isize), (1, 0), (1, 1), (1, -1), (0, -1)])) {
        let n = 2 * half + 1;
        let k = translation_kernel(n, v, dir);
        let l = (n - 1) * v + 1;
        prop_assert_eq!(k.shape(), &[l, l]);
        prop_assert!((k.sum() - 1.0).abs() < 1e-12);
        prop_assert!(k.data().iter().all(|x| *x >= 0.0));
        prop_assert_eq!(k.data().iter().filter(|x| **x > 0.0).count(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pad_then_crop_is_identity(seed in any::<u64>(), c in 1usize..4, h in 1usize..20, w in 1usize..20, m in prop::sample::select(vec![1usize, 4, 8, 16])) {
        let x = image(&[c, h, w], seed);
        let p = pad_reflect(&x, m).unwrap();
        let (_, _, ph, pw) = p.dims4().unwrap();
        prop_assert!(ph % m == 0 && pw % m == 0 && ph >= h && pw >= w);
        prop_assert_eq!(crop(&p, h, w).unwrap(), x);
    }
}
