use mpoe::analysis::{empirical_mmd, mmd_threshold, variation_stats, Kernel};
use mpoe::gating::{keep_top_k, softmax};
use mpoe::io::{decode_tensor, encode_tensor, Dtype};
use mpoe::layer::{efficiency_ratio, BankParamCounts};
use mpoe::mpo::{count_params, decompose, normalize, planned_param_count, FactorizationPlan, Normalization};
use mpoe::optim::{generate_mask, Mask, MaskGranularity};
use mpoe::{svd, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Row and column factor lists of equal length `m`.
fn plan_strategy() -> impl Strategy<Value = FactorizationPlan> {
    (2usize..=4)
        .prop_flat_map(|m| (prop::collection::vec(1usize..=4, m), prop::collection::vec(1usize..=4, m)))
        .prop_map(|(i, j)| FactorizationPlan::new(i, j).unwrap())
}

fn capped_plan_strategy() -> impl Strategy<Value = (FactorizationPlan, Vec<usize>)> {
    plan_strategy().prop_flat_map(|p| {
        let full = p.bond_dimensions();
        let caps: Vec<_> = full.iter().map(|&b| 1..=b).collect();
        (Just(p), caps)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reconstruction_is_exact_without_caps(plan in plan_strategy(), seed in any::<u64>()) {
        let w = randn(&[plan.rows(), plan.cols()], seed);
        let f = decompose(&w, &plan).unwrap();
        let rel = f.reconstruct().unwrap().relative_error(&w).unwrap();
        prop_assert!(rel < 1e-10, "{plan}: {rel:e}");
        prop_assert_eq!(f.truncation_bound(), 0.0);
    }

    #[test]
    fn truncation_error_within_bound((plan, caps) in capped_plan_strategy(), seed in any::<u64>()) {
        let plan = plan.with_caps(caps).unwrap();
        let w = randn(&[plan.rows(), plan.cols()], seed);
        let f = decompose(&w, &plan).unwrap();
        let err = f.reconstruct().unwrap().sub(&w).unwrap().frobenius_norm();
        prop_assert!(err <= f.truncation_bound() * (1.0 + 1e-8) + 1e-12, "{plan}: {err} > {}", f.truncation_bound());
    }

    #[test]
    fn full_bonds_are_unimodal_and_bounded(plan in plan_strategy()) {
        let b = plan.bond_dimensions();
        let (i, j) = (plan.row_factors(), plan.col_factors());
        let total = plan.rows() * plan.cols();
        let mut left = 1;
        for (k, &d) in b.iter().enumerate() {
            left *= i[k] * j[k];
            prop_assert_eq!(d, left.min(total / left));
        }
        // Unimodal: no bond is smaller than both of its neighbours.
        for w in b.windows(3) {
            prop_assert!(!(w[1] < w[0] && w[1] < w[2]), "{b:?}");
        }
    }

    #[test]
    fn planned_counts_match_decomposition(plan in plan_strategy(), seed in any::<u64>()) {
        let f = decompose(&randn(&[plan.rows(), plan.cols()], seed), &plan).unwrap();
        let c = count_params(&f);
        prop_assert_eq!(c, planned_param_count(&plan));
        prop_assert_eq!(c.total(), f.locals().iter().map(Tensor::len).sum::<usize>());
    }

    #[test]
    fn capping_never_adds_parameters((plan, caps) in capped_plan_strategy()) {
        let full = planned_param_count(&plan).total();
        let capped = planned_param_count(&plan.with_caps(caps).unwrap()).total();
        prop_assert!(capped <= full);
    }

    #[test]
    fn balance_keeps_product_and_equalizes(plan in plan_strategy(), seed in any::<u64>()) {
        let w = randn(&[plan.rows(), plan.cols()], seed);
        let f = decompose(&w, &plan).unwrap();
        let g = normalize(&f, Normalization::Balance).unwrap();
        let rel = g.reconstruct().unwrap().relative_error(&w).unwrap();
        prop_assert!(rel < 1e-10);
        let norms: Vec<f64> = g.locals().iter().map(Tensor::frobenius_norm).collect();
        for n in &norms {
            prop_assert!((n - norms[0]).abs() <= 1e-9 * norms[0]);
        }
    }

    #[test]
    fn singular_values_match_nalgebra(p in 1usize..12, q in 1usize..12, seed in any::<u64>()) {
        let a = randn(&[p, q], seed);
        let ours = svd(&a, None).unwrap();
        let mut theirs = DMatrix::from_row_slice(p, q, a.data()).singular_values().as_slice().to_vec();
        theirs.sort_by(|x, y| y.total_cmp(x));
        prop_assert_eq!(ours.sigma.len(), theirs.len());
        for (s, t) in ours.sigma.iter().zip(&theirs) {
            prop_assert!((s - t).abs() < 1e-10 * theirs[0].max(1.0), "{s} vs {t}");
        }
        prop_assert!(ours.reconstruct().relative_error(&a).unwrap() < 1e-12);
    }

    #[test]
    fn masks_respect_extremes(len in 1usize..64, seed in any::<u64>(), elementwise in any::<bool>()) {
        let g = if elementwise { MaskGranularity::PerElement } else { MaskGranularity::PerStepScalar };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(generate_mask(1.0, g, len, &mut rng).unwrap().discards_all());
        let keep = generate_mask(0.0, g, len, &mut rng).unwrap();
        match keep {
            Mask::Scalar(b) => prop_assert!(!b),
            Mask::Elementwise(v) => {
                prop_assert_eq!(v.len(), len);
                prop_assert!(v.iter().all(|&b| !b));
            }
        }
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let x = randn(&[20, 3], seed);
        let y = randn(&[25, 3], seed ^ 1).map(|v| v + shift);
        for k in [Kernel::Rbf { bandwidth: None }, Kernel::Rbf { bandwidth: Some(0.7) }, Kernel::Linear] {
            let a = empirical_mmd(&x, &y, k).unwrap();
            let b = empirical_mmd(&y, &x, k).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn linear_mmd_is_mean_distance(seed in any::<u64>()) {
        let x = randn(&[15, 4], seed);
        let y = randn(&[9, 4], seed ^ 2);
        let mean = |t: &Tensor| -> Vec<f64> {
            (0..t.cols()).map(|c| (0..t.rows()).map(|r| t.at(r, c)).sum::<f64>() / t.rows() as f64).collect()
        };
        let (mx, my) = (mean(&x), mean(&y));
        let want = mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let got = empirical_mmd(&x, &y, Kernel::Linear).unwrap();
        prop_assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn threshold_closed_form(m in 1usize..10_000, k in 0.01f64..10.0, alpha in 0.001f64..0.999) {
        let t = mmd_threshold(m, k, alpha).unwrap();
        let want = 2.0 * (k / m as f64).sqrt() * (1.0 + (-alpha.ln()).sqrt());
        prop_assert!((t - want).abs() <= 1e-12 * want);
        prop_assert!(mmd_threshold(m + 1, k, alpha).unwrap() < t);
    }

    #[test]
    fn variation_histogram_counts(diffs in prop::collection::vec(-0.05f64..0.05, 1..200)) {
        let reference: Vec<f64> = (0..diffs.len()).map(|i| i as f64 * 0.25).collect();
        let other: Vec<f64> = reference.iter().zip(&diffs).map(|(r, d)| r + d).collect();
        let s = variation_stats((0, 1), &reference, &other).unwrap();
        let realized: Vec<f64> = other.iter().zip(&reference).map(|(o, r)| o - r).collect();
        let n = realized.len() as f64;
        let small = realized.iter().filter(|d| d.abs() < 1e-4).count() as f64 / n;
        let mid = realized.iter().filter(|d| d.abs() >= 1e-4 && d.abs() < 1.5e-2).count() as f64 / n;
        prop_assert_eq!(s.frac_lt_1e4, small);
        prop_assert_eq!(s.frac_mid, mid);
        prop_assert!(s.frac_lt_1e4 + s.frac_mid <= 1.0);
        prop_assert_eq!(s.count, diffs.len());
    }

    #[test]
    fn softmax_and_top_k(v in prop::collection::vec(-30.0f64..30.0, 1..12), k_seed in any::<usize>()) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = 1 + k_seed % v.len();
        let kept = keep_top_k(&v, k).unwrap();
        prop_assert_eq!(kept.iter().filter(|x| x.is_finite()).count(), k);
        let min_kept = kept.iter().copied().filter(|x| x.is_finite()).fold(f64::MAX, f64::min);
        let dropped = v.iter().zip(&kept).filter(|(_, k)| !k.is_finite()).map(|(x, _)| *x);
        for d in dropped {
            prop_assert!(d <= min_kept);
        }
    }

    #[test]
    fn bank_ratio_matches_formula(n in 1usize..64, shared in 1usize..100_000, per in 1usize..10_000) {
        let c = BankParamCounts::new(n, shared, per, 0, 0);
        prop_assert!((c.ratio() - efficiency_ratio(n, c.gamma)).abs() < 1e-12);
        prop_assert!(c.ratio() <= 1.0 + 1e-12);
    }

    #[test]
    fn tensor_encoding_round_trips(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let t = randn(&[rows, cols], seed);
        let (back, dtype) = decode_tensor(&encode_tensor(&t, Dtype::F64).unwrap()).unwrap();
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert_eq!(&back, &t);
        let (narrow, _) = decode_tensor(&encode_tensor(&t, Dtype::F32).unwrap()).unwrap();
        prop_assert_eq!(narrow, t.cast::<f32>().cast::<f64>());
    }
}
