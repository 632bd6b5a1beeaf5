use nabound::lattice::*;
use proptest::prelude::*;

fn all_points(n: usize, d: usize) -> Vec<Vec<i64>> {
    let mut pts = vec![vec![]];
    for _ in 0..d {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<i64>| {
                (0..n as i64).map(move |x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    pts
}

fn naive_cov(model: &CovarianceModel, k1: &[i64], k2: &[i64], n: usize) -> f64 {
    let pts = all_points(n, k1.len());
    let mut total = 0.0;
    for a in &pts {
        for b in &pts {
            let diff: Vec<i64> = (0..a.len()).map(|s| (k2[s] + b[s]) - (k1[s] + a[s])).collect();
            total += model.eval(&diff);
        }
    }
    total
}

#[test]
fn partition_tiles_the_block() {
    for d in 1..=3 {
        for n in 1..=12 {
            if d == 3 && n > 8 {
                continue;
            }
            for l in 1..=n {
                let part = decompose_block(n, l, d).unwrap();
                assert_eq!((part.m - 1) * l + part.r, n);
                assert!(part.r >= 1 && part.r <= l);
                for p in all_points(n, d) {
                    let hits = part.cells.iter().filter(|c| c.cell.contains(&p)).count();
                    assert_eq!(hits, 1, "n={n} l={l} d={d} point {p:?}");
                }
                let total: usize = part.cells.iter().map(|c| c.cell.volume()).sum();
                assert_eq!(total, n.pow(d as u32));
                assert_eq!(part.main_cells().count(), (part.m - 1).pow(d as u32));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn an_matches_double_sum(d in 1usize..=2, n in 1usize..=8, kappa0 in 0.0f64..0.5, lambda in 0.3f64..3.0) {
        let model = CovarianceModel::extremal(kappa0, lambda, 1.0, d).unwrap();
        let zero = vec![0i64; d];
        let naive = naive_cov(&model, &zero, &zero, n) / (n as f64).powi(d as i32);
        let fast = compute_an(&model, n).unwrap();
        prop_assert!((fast - naive).abs() < 1e-12, "{} vs {}", fast, naive);
    }

    #[test]
    fn an_between_zero_and_r0(d in 1usize..=2, n in 1usize..=30, lambda in 0.5f64..3.0, c in 0.0f64..1.0) {
        // A_n >= 0 needs a genuine covariance; the sign-Gaussian one with a
        // small amplitude is positive definite for these decay rates.
        let q = (-lambda as f64).exp();
        let p0 = (1.0 + q) / (1.0 - q);
        let cmax = 1.0 / (p0.powi(d as i32) - 1.0);
        let c = c * cmax * 0.99;
        let model = CovarianceModel::new(d, c, lambda, move |k: &[i64]| {
            let l1: i64 = k.iter().map(|v| v.abs()).sum();
            if l1 == 0 { 1.0 } else { 2.0 / std::f64::consts::PI * (-c * (-lambda * l1 as f64).exp()).asin() }
        }).unwrap();
        let a = compute_an(&model, n).unwrap();
        prop_assert!(a >= 0.0 && a <= model.variance_at_zero() + 1e-15);
        prop_assert!(lattice_sum(&model) <= a + 1e-12);
    }

    #[test]
    fn block_cov_symmetric(d in 1usize..=2, n in 1usize..=6, k1 in prop::collection::vec(-8i64..8, 2), k2 in prop::collection::vec(-8i64..8, 2)) {
        let model = CovarianceModel::extremal(0.3, 0.8, 1.0, d).unwrap();
        let a = LatticeVector(k1[..d].to_vec());
        let b = LatticeVector(k2[..d].to_vec());
        let ab = block_cov_exact(&model, &a, &b, n).unwrap();
        let ba = block_cov_exact(&model, &b, &a, n).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-13 * ab.abs().max(1.0));
        let naive = naive_cov(&model, &a.0, &b.0, n);
        prop_assert!((ab - naive).abs() < 1e-11);
    }

    #[test]
    fn sub_block_sums_add_up(d in 1usize..=2, n in 1usize..=9, l in 1usize..=9, seed in any::<u64>()) {
        let l = l.min(n);
        let size = n.pow(d as u32);
        let values: Vec<f64> = (0..size).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64 - 48.0).collect();
        let field = LatticeField::on_block(d, n, values.clone()).unwrap();
        let part = decompose_block(n, l, d).unwrap();
        let xi = block_sum_xi(&field, &part, 0.5).unwrap();
        let total: f64 = values.iter().map(|v| v - 0.5).sum();
        prop_assert!((xi.iter().sum::<f64>() - total).abs() < 1e-9);
    }
}
