//! Property tests over the numerics, scheduler, codec, losses and metrics.

use onestep_sr::codec::{decode, decode_unclamped, encode, Image};
use onestep_sr::discriminator::relativistic_prob;
use onestep_sr::losses::{adv_d_loss, adv_g_loss, faa_weight, flow_matching_loss, r1_penalty, relativistic};
use onestep_sr::metrics::{levenshtein, ned, psnr, ssim};
use onestep_sr::numerics::{Rng, Tape, Tensor};
use onestep_sr::scheduler::{
    control_t, interpolate, one_step_update, timestep_to_t, velocity_target, FidelityWeight, NoiseSchedule,
};
use proptest::prelude::*;

fn tensor(seed: u64, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut Rng::new(seed))
}

fn image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
}

/// Full-matrix Levenshtein, independent of the two-row implementation.
fn oracle(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in any::<u64>()) {
        let a = tensor(seed, &[4, 3], 1.0);
        let b = tensor(seed ^ 1, &[3, 2], 1.0);
        let grads = |which: u8| {
            let tape = Tape::<f64>::new();
            let (x, w) = (tape.param(&a), tape.param(&b));
            let y = x.matmul(w).unwrap();
            let l1 = y.gelu().mean();
            let l2 = y.softmax().square().sum();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => l1.add(l2).unwrap(),
            };
            let g = tape.backward(loss).unwrap();
            (g.wrt(x), g.wrt(w))
        };
        let (g1, g2, g12) = (grads(0), grads(1), grads(2));
        for (s, (p, q)) in [(&g12.0, (&g1.0, &g2.0)), (&g12.1, (&g1.1, &g2.1))] {
            for ((x, y), z) in s.data().iter().zip(p.data()).zip(q.data()) {
                prop_assert!((x - (y + z)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible(seed in any::<u64>()) {
        let a = tensor(seed, &[5, 4], 1.0);
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape.constant(&a.cast::<f32>());
            x.matmul_t(x).unwrap().softmax().layer_norm(1e-6).gelu().value()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn schedule_is_strictly_decreasing(tau in 0usize..999) {
        let s = NoiseSchedule::fitted(750).unwrap();
        prop_assert!(s.t_at(tau + 1) < s.t_at(tau));
        prop_assert_eq!(s.t_at(tau), timestep_to_t(tau, s.shift()).unwrap());
    }

    #[test]
    fn control_t_decreases_in_f(f1 in 0.0f64..1.0, df in 1e-6f64..1.0, t_p in 0.01f64..0.99) {
        let f2 = (f1 + df).min(1.0);
        prop_assume!(f2 > f1);
        let a = control_t(FidelityWeight::new(f1).unwrap(), t_p).unwrap();
        let b = control_t(FidelityWeight::new(f2).unwrap(), t_p).unwrap();
        prop_assert!(b < a);
    }

    #[test]
    fn interpolation_endpoints_are_inputs(seed in any::<u64>()) {
        let x0 = tensor(seed, &[3, 4], 1.0);
        let eps = tensor(seed ^ 7, &[3, 4], 1.0);
        prop_assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
    }

    #[test]
    fn one_step_reconstructs_in_f32(seed in any::<u64>(), t_p in 0.01f64..0.99, scale in 0.1f64..3.0) {
        let x0 = tensor(seed, &[8, 12], scale).cast::<f32>();
        let eps = tensor(seed ^ 3, &[8, 12], 1.0).cast::<f32>();
        let x = interpolate(&x0, &eps, t_p).unwrap();
        let back = one_step_update(&x, &velocity_target(&x0, &eps).unwrap(), t_p).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * scale.max(1.0) as f32 * 4.0);
        }
    }

    #[test]
    fn codec_roundtrip_and_linearity(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = image(seed, 8, 12);
        let y = image(seed ^ 5, 8, 12);
        prop_assert_eq!(decode(&encode::<f64>(&x, 4).unwrap(), 4).unwrap(), x.clone());
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let mixed = encode::<f64>(&Image::new(8, 12, mix).unwrap(), 4).unwrap();
        let ex = encode::<f64>(&x, 4).unwrap().tokens;
        let ey = encode::<f64>(&y, 4).unwrap().tokens;
        let lin = ex.scale(a).add(&ey.scale(b)).unwrap();
        for (p, q) in mixed.tokens.data().iter().zip(lin.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
        // decode without clamping inverts encode on out-of-range values too
        let back = decode_unclamped(&mixed, 4).unwrap();
        prop_assert_eq!(encode::<f64>(&back, 4).unwrap().tokens, mixed.tokens);
    }

    #[test]
    fn relativistic_antisymmetry_and_shift(seed in any::<u64>(), c in -5.0f64..5.0) {
        let a = tensor(seed, &[16], 2.0).cast::<f32>();
        let b = tensor(seed ^ 9, &[16], 2.0).cast::<f32>();
        let r_ab = relativistic_prob(&a, &b).unwrap();
        let r_ba = relativistic_prob(&b, &a).unwrap();
        for (x, y) in r_ab.data().iter().zip(r_ba.data()) {
            prop_assert!((x + y - 1.0).abs() <= 1e-7);
        }
        let a64 = tensor(seed, &[16], 2.0);
        let b64 = tensor(seed ^ 9, &[16], 2.0);
        let shift = |t: &Tensor<f64>| t.map(|v| v + c);
        let base = relativistic_prob(&a64, &b64).unwrap();
        let moved = relativistic_prob(&shift(&a64), &shift(&b64)).unwrap();
        for (x, y) in base.data().iter().zip(moved.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn adversarial_identities(seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&tensor(seed, &[9], 1.5));
        let b = tape.constant(&tensor(seed ^ 2, &[9], 1.5));
        let one_minus = relativistic(a, b).unwrap().neg().add_scalar(1.0).value();
        let swapped = relativistic(b, a).unwrap().value();
        for (x, y) in one_minus.data().iter().zip(swapped.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        let d = adv_d_loss(a, b).unwrap().value().item();
        let g = adv_g_loss(b, a).unwrap().value().item();
        prop_assert_eq!(d, g);
        prop_assert!(d >= 0.0 && adv_g_loss(a, b).unwrap().value().item() >= 0.0);
        prop_assert!(flow_matching_loss(a, b).unwrap().value().item() >= 0.0);
        prop_assert!(r1_penalty(a, b).unwrap().value().item() >= 0.0);
        let eq = adv_d_loss(a, a).unwrap().value().item();
        prop_assert!((eq - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn faa_weight_is_affine_and_decreasing(f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
        let w = |f: f64| faa_weight(FidelityWeight::new(f).unwrap(), 0.02, 0.1);
        let (lo, hi) = (f1.min(f2), f1.max(f2));
        prop_assert!(w(hi) <= w(lo));
        prop_assert!((0.02..=0.1).contains(&w(f1)));
        let mid = w(0.5 * (f1 + f2));
        prop_assert!((mid - 0.5 * (w(f1) + w(f2))).abs() <= 1e-15);
    }

    #[test]
    fn ned_matches_oracle_and_is_a_bounded_symmetric_metric(
        a in proptest::collection::vec(0u8..5, 0..12),
        b in proptest::collection::vec(0u8..5, 0..12),
        c in proptest::collection::vec(0u8..5, 0..12),
    ) {
        prop_assert_eq!(levenshtein(&a, &b), oracle(&a, &b));
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        let n = ned(&a, &b);
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert_eq!(n, ned(&b, &a));
    }

    #[test]
    fn ssim_of_self_is_one(seed in any::<u64>()) {
        let x = image(seed, 16, 16);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(psnr(&x, &x).unwrap(), 99.0);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut means = Vec::new();
    for sigma in [0.02, 0.05, 0.1] {
        let mut total = 0.0;
        for seed in 0..30 {
            let x = image(seed, 16, 16);
            let mut rng = Rng::new(seed + 1000);
            let noisy: Vec<f64> = x.data().iter().map(|v| v + sigma * rng.normal()).collect();
            total += psnr(&x, &Image::new(16, 16, noisy).unwrap().clamped()).unwrap();
        }
        means.push(total / 30.0);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}
