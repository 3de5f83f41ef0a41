//! Metrics, standardization, splits, cross-correlation and the generator
//! against scalar re-derivations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traverse_core::analysis::{cross_correlation, XCorrNorm};
use traverse_core::data::{generate, Coupling, RawDataset, SynthSpec};
use traverse_core::engine::Tensor;
use traverse_core::training::{make_windows, metrics, split_ranges, standardize, SeriesDataset, SplitRatios};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn metrics_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let horizon = rng.random_range(1..5);
        let n = horizon * rng.random_range(1..40);
        let target: Vec<f64> = (0..n)
            .map(|i| if i % 7 == 0 { 0.0 } else { rng.random_range(-50.0..50.0) })
            .collect();
        let pred: Vec<f64> = target.iter().map(|y| y + rng.random_range(-5.0..5.0)).collect();
        let m = metrics(&pred, &target, horizon, 1e-3).unwrap();

        let mut abs = 0.0;
        let mut sq = 0.0;
        let mut pct = 0.0;
        let mut kept = 0;
        for i in 0..n {
            let e = pred[i] - target[i];
            abs += e.abs();
            sq += e * e;
            if target[i].abs() > 1e-3 {
                pct += (e / target[i]).abs();
                kept += 1;
            }
        }
        assert!(close(m.mae, abs / n as f64, 1e-12));
        assert!(close(m.rmse, (sq / n as f64).sqrt(), 1e-12));
        assert!(close(m.mape.unwrap(), 100.0 * pct / kept as f64, 1e-12));

        for (step, s) in m.per_step.iter().enumerate() {
            let idx: Vec<usize> = (step..n).step_by(horizon).collect();
            let mae = idx.iter().map(|&i| (pred[i] - target[i]).abs()).sum::<f64>() / idx.len() as f64;
            assert!(close(s.mae, mae, 1e-12));
        }
    }
}

#[test]
fn mape_is_undefined_when_every_target_is_masked() {
    let m = metrics(&[1.0, 2.0], &[0.0, 1e-4], 1, 1e-3).unwrap();
    assert_eq!(m.mape, None);
    assert!(close(m.mae, 1.49995, 1e-12));
}

#[test]
fn default_split_counts_are_exact() {
    let s = split_ranges(1000, SplitRatios::default());
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (600, 200, 200));
    assert_eq!(make_windows(s.train, 12, 6).unwrap().len(), 583);
    assert_eq!(make_windows(s.val, 12, 6).unwrap().len(), 183);
    assert_eq!(make_windows(s.test, 12, 6).unwrap().len(), 183);
    let s = split_ranges(1003, SplitRatios::default());
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (601, 200, 202));
}

#[test]
fn windows_never_cross_split_boundaries() {
    let spec = SynthSpec {
        n_nodes: 2,
        noise: 1.0,
        length: 300,
        window: 2,
        ..SynthSpec::default()
    };
    let data = SeriesDataset::new(&generate(&spec).unwrap(), 5, 3, SplitRatios::default(), 0).unwrap();
    for (starts, range) in [
        (&data.train, &data.splits.train),
        (&data.val, &data.splits.val),
        (&data.test, &data.splits.test),
    ] {
        assert!(starts.iter().all(|&s| s >= range.start && s + 8 <= range.end));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardized_train_split_is_centred_and_unit(
        n in 1usize..4,
        d in 1usize..3,
        t in 20usize..80,
        seed in any::<u64>(),
        shift in -100.0f64..100.0,
        scale in 0.01f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d * t).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect();
        let raw = Tensor::new(&[n, d, t], data).unwrap();
        let train_len = split_ranges(t, SplitRatios::default()).train.len();
        let (z, _) = standardize(&raw, train_len).unwrap();
        for f in 0..d {
            let vals: Vec<f64> = (0..n).flat_map(|v| (0..train_len).map(move |s| (v, s))).map(|(v, s)| z.at(&[v, f, s])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_lengths_partition_the_series(len in 10usize..5000, a in 1u32..10, b in 1u32..10, c in 1u32..10) {
        let r = SplitRatios { train: a, val: b, test: c };
        let s = split_ranges(len, r);
        let total = (a + b + c) as usize;
        prop_assert_eq!(s.train.len(), len * a as usize / total);
        prop_assert_eq!(s.val.len(), len * b as usize / total);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), len);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
    }

    #[test]
    fn correlation_is_bounded(seed in any::<u64>(), len in 16usize..120, k_max in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        for norm in [XCorrNorm::Literal, XCorrNorm::Overlap] {
            let c = cross_correlation(&x, &y, k_max, norm).unwrap();
            prop_assert!(c.coefficients.iter().all(|v| v.abs() <= 1.0));
        }
    }
}

fn random_series(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..len).map(|i| 0.5 * x[i.saturating_sub(2)] + rng.random_range(-1.0..1.0)).collect();
    (x, y)
}

/// The written formula: `1/L`-normalized moments over the `L − k` overlap terms.
fn literal(x: &[f64], y: &[f64], k: usize) -> f64 {
    let l = x.len() as f64;
    let pairs: Vec<(f64, f64)> = (k..x.len()).map(|t| (x[t - k], y[t])).collect();
    let mx: f64 = pairs.iter().map(|p| p.0).sum::<f64>() / l;
    let my: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / l;
    let cov: f64 = pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / l - mx * my;
    let vx: f64 = pairs.iter().map(|p| p.0 * p.0).sum::<f64>() / l - mx * mx;
    let vy: f64 = pairs.iter().map(|p| p.1 * p.1).sum::<f64>() / l - my * my;
    cov / (vx * vy).sqrt()
}

/// Textbook two-pass Pearson correlation of the overlap.
fn pearson(x: &[f64], y: &[f64], k: usize) -> f64 {
    let (a, b) = (&x[..x.len() - k], &y[k..]);
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let num: f64 = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum();
    let da: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
    let db: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
    num / (da * db).sqrt()
}

#[test]
fn correlation_matches_direct_sums() {
    for seed in 0..20 {
        let (x, y) = random_series(100, seed);
        let lit = cross_correlation(&x, &y, 12, XCorrNorm::Literal).unwrap();
        let ovl = cross_correlation(&x, &y, 12, XCorrNorm::Overlap).unwrap();
        for k in 0..=12 {
            assert!((lit.coefficients[k] - literal(&x, &y, k)).abs() < 1e-12);
            assert!((ovl.coefficients[k] - pearson(&x, &y, k)).abs() < 1e-12);
        }
        assert_eq!(ovl.peak_lag(), 2);
    }
}

#[test]
fn correlation_invariances() {
    for seed in 0..20 {
        let (x, y) = random_series(80, 100 + seed);
        let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v).collect();
        let affine_x: Vec<f64> = x.iter().map(|v| 0.25 * v + 7.0).collect();
        let affine_y: Vec<f64> = y.iter().map(|v| 12.0 * v - 3.0).collect();

        let base = cross_correlation(&x, &y, 8, XCorrNorm::Literal).unwrap().coefficients;
        let s = cross_correlation(&scaled, &y, 8, XCorrNorm::Literal).unwrap().coefficients;
        for k in 0..=8 {
            assert!((base[k] - s[k]).abs() < 1e-12);
        }
        // The 1/L normalizer treats the k missing terms as zeros, so a shift
        // only leaves lag 0 untouched.
        let a = cross_correlation(&affine_x, &affine_y, 8, XCorrNorm::Literal).unwrap().coefficients;
        assert!((base[0] - a[0]).abs() < 1e-12);

        let base = cross_correlation(&x, &y, 8, XCorrNorm::Overlap).unwrap().coefficients;
        let a = cross_correlation(&affine_x, &affine_y, 8, XCorrNorm::Overlap).unwrap().coefficients;
        for k in 0..=8 {
            assert!((base[k] - a[k]).abs() < 1e-10);
        }
    }
}

#[test]
fn generator_recovers_an_injected_lag() {
    for seed in 0..5 {
        let spec = SynthSpec {
            n_nodes: 2,
            couplings: vec![Coupling {
                from: 0,
                to: 1,
                lag: 3,
                weight: 0.8,
            }],
            noise: 0.1,
            length: 500,
            window: 6,
            seed,
            ..SynthSpec::default()
        };
        let raw = generate(&spec).unwrap();
        let c = cross_correlation(raw.series(0, 0), raw.series(1, 0), 12, XCorrNorm::Literal).unwrap();
        assert_eq!(c.peak_lag(), 3, "seed {seed}");
    }
}

#[test]
fn generator_is_deterministic_and_seed_only_moves_the_noise() {
    let spec = SynthSpec {
        n_nodes: 3,
        couplings: vec![
            Coupling { from: 0, to: 1, lag: 2, weight: 0.3 },
            Coupling { from: 1, to: 2, lag: 0, weight: 0.3 },
        ],
        persistence: 0.4,
        amplitude: 0.5,
        noise: 1.0,
        length: 200,
        window: 4,
        seed: 9,
        ..SynthSpec::default()
    };
    let a: RawDataset = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    let other = SynthSpec { seed: 10, ..spec.clone() };
    assert_ne!(a.values, generate(&other).unwrap().values);
    assert_eq!(spec.lag_table_csv(), other.lag_table_csv());
}

#[test]
fn silent_generator_is_zero() {
    let spec = SynthSpec {
        n_nodes: 3,
        couplings: vec![Coupling { from: 0, to: 1, lag: 1, weight: 0.0 }],
        length: 50,
        window: 2,
        ..SynthSpec::default()
    };
    assert!(generate(&spec).unwrap().values.data().iter().all(|&v| v == 0.0));
}
