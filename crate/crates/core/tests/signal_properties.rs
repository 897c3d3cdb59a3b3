use std::time::Instant;

use egrnet::signal::{
    add_noise_snr, build_rsm, gram, normalize_sample, normalize_sample_with, stripe_profile,
    Matrix, NoiseSpec, Normalization, Rsm, RsmConfig, Signal,
};
use egrnet::tensor::ops::channel_gram;
use egrnet::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signal(samples: Vec<f64>) -> Signal {
    Signal::new(samples, 12_800.0).unwrap()
}

fn rsm_strategy() -> impl Strategy<Value = Rsm> {
    (1usize..12, 1usize..12).prop_flat_map(|(m, n)| {
        prop::collection::vec(-100.0f64..100.0, m * n)
            .prop_map(move |v| Rsm::from_matrix(Matrix::from_vec(m, n, v).unwrap()).unwrap())
    })
}

/// One random period of length `t`, repeated to `m·n` samples.
fn tiled(period: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|i| period[i % period.len()]).collect()
}

fn dominant(samples: Vec<f64>, m: usize, n: usize) -> Option<usize> {
    let egr = gram(&build_rsm(&signal(samples), RsmConfig::new(m, n).unwrap()).unwrap()).unwrap();
    stripe_profile(&egr).dominant_lag(n / 2)
}

proptest! {
    #[test]
    fn gram_is_symmetric(x in rsm_strategy()) {
        let g = gram(&x).unwrap().into_matrix();
        let tol = 1e-12 * g.max_abs();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                prop_assert!((g.get(i, j) - g.get(j, i)).abs() <= tol);
            }
        }
    }

    #[test]
    fn gram_is_positive_semidefinite(x in rsm_strategy(), seed in any::<u64>()) {
        let g = gram(&x).unwrap().into_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let v: Vec<f64> = (0..g.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm2: f64 = v.iter().map(|a| a * a).sum();
            prop_assert!(g.quadratic_form(&v) >= -1e-9 * norm2 * g.max_abs());
        }
    }

    #[test]
    fn gram_scales_quadratically(x in rsm_strategy(), alpha in -10.0f64..10.0) {
        let g = gram(&x).unwrap().into_matrix();
        let scaled = Rsm::from_matrix(x.matrix().scaled(alpha)).unwrap();
        let gs = gram(&scaled).unwrap().into_matrix();
        let tol = 1e-12 * (alpha * alpha * g.max_abs()).max(f64::MIN_POSITIVE);
        for (a, b) in gs.as_slice().iter().zip(g.as_slice()) {
            prop_assert!((a - alpha * alpha * b).abs() <= tol);
        }
    }

    #[test]
    fn gram_matches_tensor_channel_gram(x in rsm_strategy()) {
        // the tensor route only takes square planes
        let side = x.matrix().rows().min(x.matrix().cols());
        let m = x.matrix();
        let data: Vec<f64> = (0..side * side).map(|k| m.get(k / side, k % side)).collect();
        let sq = Rsm::from_matrix(Matrix::from_vec(side, side, data.clone()).unwrap()).unwrap();
        let g = gram(&sq).unwrap().into_matrix();
        let t = channel_gram(&Tensor::new(vec![1, 1, side, side], data).unwrap()).unwrap();
        let tol = 1e-12 * g.max_abs().max(1.0);
        for (a, b) in g.as_slice().iter().zip(t.data()) {
            prop_assert!((a - b).abs() <= tol);
        }
    }

    #[test]
    fn periodic_state_vectors_repeat_and_peak_at_period(
        (t, reps) in (2usize..24).prop_flat_map(|t| (Just(t), 2usize..8)),
        m in 1usize..8,
        seed in any::<u64>(),
    ) {
        let n = t * reps;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let period: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let samples = tiled(&period, m * n);
        let rsm = build_rsm(&signal(samples.clone()), RsmConfig::new(m, n).unwrap()).unwrap();
        for j in 0..n - t {
            let (a, b) = (rsm.state_vector(j), rsm.state_vector(j + t));
            prop_assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-12));
        }
        prop_assert_eq!(dominant(samples, m, n), Some(t));
    }

    #[test]
    fn sine_peaks_at_period(
        (t, reps) in (3usize..=32).prop_flat_map(|t| (Just(t), 2usize..=(64 / t).max(2))),
        m in 1usize..6,
    ) {
        let n = t * reps;
        let samples = (0..m * n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / t as f64).sin())
            .collect();
        prop_assert_eq!(dominant(samples, m, n), Some(t));
    }

    #[test]
    fn normalized_mean_is_zero(
        v in prop::collection::vec(-1e3f64..1e3, 2..300),
        std_dev in any::<bool>(),
    ) {
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-6));
        let scaling = if std_dev { Normalization::StdDev } else { Normalization::Variance };
        let max = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let out = normalize_sample_with(&signal(v.clone()), scaling).unwrap();
        let mean = out.samples().iter().sum::<f64>() / v.len() as f64;
        prop_assert!(mean.abs() <= 1e-9 * max.max(1.0));
    }

    #[test]
    fn noise_is_bit_identical_per_seed(
        v in prop::collection::vec(-5.0f64..5.0, 16..256),
        snr in -10.0f64..10.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(v.iter().any(|&x| x != 0.0));
        let s = signal(v);
        let a = add_noise_snr(&s, NoiseSpec::new(snr, seed)).unwrap();
        let b = add_noise_snr(&s, NoiseSpec::new(snr, seed)).unwrap();
        prop_assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn realized_snr_matches_target(
        v in prop::collection::vec(-5.0f64..5.0, 64..512),
        snr in -10.0f64..10.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(v.iter().any(|&x| x != 0.0));
        let s = signal(v);
        let noisy = add_noise_snr(&s, NoiseSpec::new(snr, seed)).unwrap();
        let noise: f64 = noisy
            .samples()
            .iter()
            .zip(s.samples())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / s.len() as f64;
        let realized = 10.0 * (s.power() / noise).log10();
        prop_assert!((realized - snr).abs() <= 0.3);
    }
}

#[test]
fn long_period_sines_are_a_known_counterexample() {
    // With few periods per row the partial-window average of the
    // double-frequency term outweighs the tiny gap between neighbouring lags.
    let (t, n) = (40, 80);
    let samples = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 / t as f64).sin())
        .collect();
    assert_ne!(dominant(samples, 1, n), Some(t));
}

#[test]
fn normalize_divides_by_variance() {
    let out = normalize_sample(&signal(vec![1.0, 3.0])).unwrap();
    assert_eq!(out.samples(), &[-1.0, 1.0]);
}

fn time_gram(side: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rsm = Rsm::from_matrix(Matrix::from_vec(side, side, data).unwrap()).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let start = Instant::now();
        let g = gram(&rsm).unwrap();
        best = best.min(start.elapsed().as_secs_f64());
        assert_eq!(g.size(), side);
    }
    best
}

#[test]
fn gram_runtime_scales_cubically() {
    let small = time_gram(256, 1);
    let large = time_gram(512, 2);
    let ratio = large / small;
    assert!(
        (4.0..=16.0).contains(&ratio),
        "n=512 / n=256 timing ratio {ratio:.2}"
    );
}
