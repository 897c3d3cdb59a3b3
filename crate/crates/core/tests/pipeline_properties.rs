use egrnet::dataset::{
    generate_synthetic, segment, split, SplitSpec, SyntheticClass, SyntheticFaultSpec,
};
use egrnet::harness::{mean_std, score_features, ConfusionMatrix, ExperimentConfig};
use egrnet::net::argmax_rows;
use egrnet::signal::Signal;
use egrnet::tensor::Tensor;
use proptest::prelude::*;

fn confusion_strategy() -> impl Strategy<Value = ConfusionMatrix> {
    (1usize..8).prop_flat_map(|k| {
        prop::collection::vec(prop::collection::vec(0u64..50, k), k)
            .prop_map(|counts| ConfusionMatrix { counts })
    })
}

/// Accuracy by counting matching label pairs one at a time.
fn brute_force_accuracy(m: &ConfusionMatrix) -> f64 {
    let (mut correct, mut total) = (0u64, 0u64);
    for (actual, row) in m.counts.iter().enumerate() {
        for (predicted, &count) in row.iter().enumerate() {
            for _ in 0..count {
                total += 1;
                correct += (actual == predicted) as u64;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

proptest! {
    #[test]
    fn segment_windows_are_exact_slices(
        v in prop::collection::vec(-10.0f64..10.0, 1..400),
        len in 1usize..64,
        hop in 1usize..32,
    ) {
        prop_assume!(len <= v.len());
        let s = Signal::new(v.clone(), 100.0).unwrap();
        let windows = segment(&s, len, hop).unwrap();
        prop_assert_eq!(windows.len(), (v.len() - len) / hop + 1);
        for (i, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.samples(), &v[i * hop..i * hop + len]);
        }
    }

    #[test]
    fn split_is_an_ordered_partition(n in 2usize..300, fraction in 0.01f64..0.99) {
        let items: Vec<usize> = (0..n).collect();
        let spec = SplitSpec { train_fraction: fraction, ..Default::default() };
        let expected = (fraction * n as f64).floor() as usize;
        match split(&items, spec) {
            Ok((train, test)) => {
                prop_assert_eq!(train.len(), expected);
                let joined: Vec<usize> = train.into_iter().chain(test).collect();
                prop_assert_eq!(joined, items);
            }
            Err(_) => prop_assert!(expected == 0 || expected == n),
        }
    }

    #[test]
    fn accuracy_is_trace_over_total(m in confusion_strategy()) {
        let expected = brute_force_accuracy(&m);
        prop_assert!((m.accuracy_pct() - expected).abs() <= 1e-9);
        let k = m.counts.len();
        for c in 0..k {
            let (tp, tn, fp, fn_) = m.one_vs_rest(c);
            prop_assert_eq!(tp + tn + fp + fn_, m.total());
        }
        if k == 2 {
            let (tp, tn, fp, fn_) = m.one_vs_rest(1);
            let binary = 100.0 * (tp + tn) as f64 / (tp + tn + fp + fn_).max(1) as f64;
            prop_assert!((m.accuracy_pct() - binary).abs() <= 1e-9);
        }
    }

    #[test]
    fn confusion_rows_sum_to_class_counts(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 0..200),
    ) {
        let (actual, predicted): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = ConfusionMatrix::from_pairs(5, &actual, &predicted).unwrap();
        for (c, sum) in m.row_sums().into_iter().enumerate() {
            prop_assert_eq!(sum as usize, actual.iter().filter(|&&a| a == c).count());
        }
    }

    #[test]
    fn learning_rate_steps_every_fifteen_epochs(epoch in 0usize..200) {
        let cfg = ExperimentConfig::new("unused");
        let expected = 1e-4 * 0.1f64.powi((epoch / 15) as i32);
        prop_assert!((cfg.learning_rate(epoch) - expected).abs() <= 1e-18);
    }

    #[test]
    fn sample_std_uses_n_minus_one(v in prop::collection::vec(0.0f64..100.0, 2..20)) {
        let (mean, std) = mean_std(&v);
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        prop_assert!((mean - m).abs() <= 1e-9);
        prop_assert!((std - var.sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn silhouette_stays_in_bounds(
        points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..3), 3..40),
    ) {
        let labels: Vec<usize> = points.iter().map(|p| p.2).collect();
        let features: Vec<f64> = points.iter().flat_map(|p| [p.0, p.1]).collect();
        let (sil, knn) = score_features(&features, 2, &labels);
        prop_assert!((-1.0..=1.0).contains(&sil));
        prop_assert!((0.0..=100.0).contains(&knn));
    }

    #[test]
    fn argmax_picks_a_maximum(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..10)) {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::new(vec![rows.len(), 4], data).unwrap();
        for (row, &i) in rows.iter().zip(&argmax_rows(&t).unwrap()) {
            prop_assert!(row.iter().all(|&v| v <= row[i]));
            prop_assert!(row[..i].iter().all(|&v| v < row[i]));
        }
    }
}

#[test]
fn separated_clouds_score_high_and_identical_clouds_near_zero() {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for i in 0..30 {
            let jitter = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
            features.extend([100.0 * c as f64 + jitter, jitter * 0.5]);
            labels.push(c);
        }
    }
    let (far, knn) = score_features(&features, 2, &labels);
    assert!(far > 0.5, "separated silhouette {far}");
    assert_eq!(knn, 100.0);

    // the same cloud under both labels
    let same: Vec<f64> = (0..60)
        .flat_map(|i| {
            let j = i % 30;
            [((j * 7919) % 13) as f64, ((j * 104_729) % 11) as f64]
        })
        .collect();
    let (near, _) = score_features(&same, 2, &labels);
    assert!(near.abs() < 0.05, "identical-cloud silhouette {near}");
}

fn synth_spec(seed: u64) -> SyntheticFaultSpec {
    let class = |name: &str, carrier: f64| SyntheticClass {
        name: name.into(),
        carrier_freq_hz: carrier,
        impulse_rate_hz: 90.0,
        modulation_depth: 0.6,
        decay_constant: 0.004,
        amplitude: 1.0,
    };
    SyntheticFaultSpec {
        classes: vec![class("a", 1600.0), class("b", 800.0)],
        sample_rate_hz: 12_800.0,
        sample_length: 256,
        samples_per_class: 6,
        rng_seed: seed,
    }
}

fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        root.path().join("a"),
        root.path().join("b"),
        root.path().join("c"),
    );
    generate_synthetic(&synth_spec(7), &a).unwrap();
    generate_synthetic(&synth_spec(7), &b).unwrap();
    generate_synthetic(&synth_spec(8), &c).unwrap();
    assert_eq!(tree(&a), tree(&b));
    let (ta, tc) = (tree(&a), tree(&c));
    let data = |t: &[(String, Vec<u8>)]| {
        t.iter()
            .filter(|f| f.0 != "manifest.json")
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_ne!(data(&ta), data(&tc));
}
