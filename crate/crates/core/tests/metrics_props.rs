use nabound::metrics::*;
use nabound::samplers::{sample_field, FieldKind, FieldSpec};
use nabound::stats;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Adaptive Simpson quadrature, the oracle for the closed-form distance.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    step(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 60)
}

/// `int |F_m - Phi|` by quadrature between consecutive order statistics and
/// on tails truncated at +-40.
pub fn quadrature_distance(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let ecdf = |t: f64| sorted.iter().filter(|&&x| x <= t).count() as f64 / m;
    let mut knots = vec![-40.0];
    knots.extend(sorted.iter().copied());
    knots.push(40.0);
    knots.dedup();
    knots
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let level = ecdf(mid);
            simpson(&|t| (level - normal_cdf(t)).abs(), w[0], w[1], 1e-13)
        })
        .sum()
}

#[test]
fn closed_form_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let m = rng.random_range(1..=20);
        let scale = rng.random_range(0.2..3.0);
        let shift = rng.random_range(-2.0..2.0);
        let sample: Vec<f64> = (0..m).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let exact = wasserstein_to_std_normal(&sample).unwrap();
        let quad = quadrature_distance(&sample);
        assert!((exact - quad).abs() < 1e-8, "{sample:?}: {exact} vs {quad}");
    }
}

#[test]
fn single_point_value() {
    let d = wasserstein_to_std_normal(&[0.0]).unwrap();
    assert!((d - 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
}

#[test]
fn quantile_round_trip_grid() {
    for i in 1..=1000 {
        let p = i as f64 / 1001.0;
        let x = normal_quantile(p).unwrap();
        assert!((normal_cdf(x) - p).abs() < 1e-10, "p={p}");
    }
}

#[test]
fn distance_decreases_with_sample_size() {
    let medians: Vec<f64> = [100usize, 1_000, 10_000]
        .iter()
        .map(|&m| {
            let ds: Vec<f64> = (0..20)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    let s: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                    wasserstein_to_std_normal(&s).unwrap()
                })
                .collect();
            assert!(ds.iter().all(|d| *d >= 0.0));
            stats::median(&ds)
        })
        .collect();
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

#[test]
fn rademacher_block_sum_has_unit_variance() {
    let spec = FieldSpec::new(FieldKind::IidRademacher, 1, None).unwrap();
    let batch = sample_field(&spec, 100, 10_000, 17).unwrap();
    let sums: Vec<f64> = batch.rows().map(|r| r.iter().sum()).collect();
    let w = standardize_block_sums(&sums, 100, 1, 1.0, 0.0).unwrap();
    let sq: Vec<f64> = w.values.iter().map(|v| v * v).collect();
    let (m, se) = stats::mean_and_stderr(&sq);
    assert!((m - 1.0).abs() <= 3.0 * se, "{m} +- {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_lower_bound_at_most_two(p in 1usize..=3, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..p * 300).map(|_| spread * (rng.random::<f64>() - 0.5)).collect();
        let lb = smooth_metric_lower_bound(&samples, p, &default_battery(p), seed).unwrap();
        prop_assert!(lb.value >= 0.0 && lb.value <= 2.0);
    }

    #[test]
    fn distance_is_translation_sensitive_but_order_free(mut xs in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let d1 = wasserstein_to_std_normal(&xs).unwrap();
        xs.reverse();
        let d2 = wasserstein_to_std_normal(&xs).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert!(d1 >= 0.0);
    }
}
