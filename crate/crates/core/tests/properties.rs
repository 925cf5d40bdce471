use proptest::collection::vec;
use proptest::prelude::*;

use mpdit::backbone::MpditConfig;
use mpdit::conditioning::class_tokens;
use mpdit::cost::count_gflops;
use mpdit::flow::{ema_update, fm_loss, interpolate, FmBatch};
use mpdit::harness::codec::{decode, encode, TensorFile};
use mpdit::params::{Init, ParamSet, ParamSpec};
use mpdit::sampler::cfg_velocity;
use mpdit::tensor::{Rng, Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::from_vec(&shape, d).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (1usize..4, 1usize..6).prop_flat_map(|(b, f)| (tensor(vec![b, f]), tensor(vec![b, f]), tensor(vec![b, f])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_is_affine((z, n, z2) in pair(), t in 0.0f64..1.0, a in -2.0f64..2.0) {
        let b = z.shape()[0];
        let ts = vec![t; b];
        let same = interpolate(&z, &z, &ts).unwrap();
        for (x, y) in same.data().iter().zip(z.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // Affine in the first endpoint: mixing two latents mixes the paths.
        let mix = z.zip_map(&z2, |p, q| a * p + (1.0 - a) * q).unwrap();
        let lhs = interpolate(&mix, &n, &ts).unwrap();
        let p = interpolate(&z, &n, &ts).unwrap();
        let q = interpolate(&z2, &n, &ts).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(p.data()).zip(q.data()) {
            prop_assert!((l - (a * p + (1.0 - a) * q)).abs() < 1e-9);
        }
        let swapped = interpolate(&n, &z, &ts.iter().map(|t| 1.0 - t).collect::<Vec<_>>()).unwrap();
        for (s, p) in swapped.data().iter().zip(p.data()) {
            prop_assert!((s - p).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_branches_ignore_guidance((v, _, _) in pair(), w in 0.0f64..10.0) {
        prop_assert_eq!(cfg_velocity(&v, &v, w).unwrap(), v);
    }

    #[test]
    fn ema_contracts_toward_parameters(seed in 0u64..1000, decay in 0.0f64..0.999) {
        let layout = vec![ParamSpec::new("a", &[5], Init::Normal(1.0))];
        let theta = ParamSet::<f64>::init(&layout, &mut Rng::new(seed));
        let mut e = ParamSet::<f64>::init(&layout, &mut Rng::new(seed + 1));
        let before: Vec<f64> = e.tensors()[0].data().iter().zip(theta.tensors()[0].data()).map(|(a, b)| (a - b).abs()).collect();
        ema_update(&mut e, &theta, decay).unwrap();
        for (i, (a, b)) in e.tensors()[0].data().iter().zip(theta.tensors()[0].data()).enumerate() {
            prop_assert!((a - b).abs() <= before[i] * decay + 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative((v, target, _) in pair()) {
        let b = v.shape()[0];
        let batch = FmBatch {
            z_t: v.clone(),
            t: Tensor::zeros(&[b]),
            classes: vec![0; b],
            target,
        };
        let tape = Tape::new();
        let loss = fm_loss(&tape, &batch, |_, _, _| Ok(tape.constant(v.clone()))).unwrap();
        let l = tape.item(loss).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, v == batch.target);
    }

    #[test]
    fn class_token_rows_round_trip(m in 1usize..5, d in 1usize..6, rows in 1usize..5, seed in 0u64..100) {
        let table = Tensor::<f64>::randn(&[rows, m * d], &mut Rng::new(seed));
        let tape = Tape::new();
        let labels: Vec<usize> = (0..rows).rev().collect();
        let out = class_tokens(&tape, tape.constant(table.clone()), &labels, m).unwrap();
        prop_assert_eq!(tape.shape(out), vec![rows, m, d]);
        let flat = tape.value(out);
        for (i, &c) in labels.iter().enumerate() {
            prop_assert_eq!(&flat.data()[i * m * d..(i + 1) * m * d], &table.data()[c * m * d..(c + 1) * m * d]);
        }
    }

    #[test]
    fn softmax_and_norm_rows(x in tensor(vec![3, 7])) {
        let tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.value(tape.softmax(v).unwrap());
        for r in s.data().chunks(7) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let n = tape.value(tape.layer_norm(v, None, None, 1e-6).unwrap());
        for r in n.data().chunks(7) {
            prop_assert!((r.iter().sum::<f64>() / 7.0).abs() < 1e-5);
        }
    }

    #[test]
    fn container_round_trips(
        config in "[a-z =\n]{0,40}",
        shapes in vec(vec(0usize..4, 0..4), 0..5),
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let mut file = TensorFile { config, tensors: Vec::new() };
        for (i, s) in shapes.iter().enumerate() {
            file.push(format!("t{i}/x"), Tensor::<f32>::randn(s, &mut rng));
        }
        let bytes = encode(&file).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back, file);
    }
}

fn dit(n: usize, d: usize, latent: usize) -> MpditConfig {
    MpditConfig {
        stages: vec![(2, n)],
        width: d,
        heads: 4,
        latent: (latent, latent, 4),
        ..MpditConfig::preset("dit_b2").unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flops_grow_with_depth_width_and_tokens(n in 2usize..16, dq in 1usize..12, side in 1usize..5) {
        let (d, latent) = (64 * dq, 8 * side);
        let base = count_gflops(&dit(n, d, latent));
        prop_assert!(count_gflops(&dit(n + 1, d, latent)) > base);
        prop_assert!(count_gflops(&dit(n, d + 64, latent)) > base);
        prop_assert!(count_gflops(&dit(n, d, latent + 8)) > base);
    }

    #[test]
    fn two_level_costs_less_than_single_stage(n in 2usize..20, k_frac in 0.0f64..1.0, dq in 1usize..12) {
        let k = ((n as f64 * k_frac) as usize).clamp(1, n - 1);
        let d = 64 * dq;
        let single = dit(n, d, 32);
        let two = MpditConfig { stages: vec![(4, n - k), (2, k)], ..single.clone() };
        prop_assert!(count_gflops(&two) < count_gflops(&single));
        let more_fine = MpditConfig { stages: vec![(4, n - k - 1), (2, k + 1)], ..single.clone() };
        if k + 1 < n {
            prop_assert!(count_gflops(&more_fine) > count_gflops(&two));
        }
    }
}
