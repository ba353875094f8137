use approx::assert_relative_eq;
use nbmix_core::simlab::sample_nb;
use nbmix_core::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_fit(data: &CountMatrix) -> FitResult {
    fit(data, 2, &FitConfig::default()).unwrap()
}

fn toy() -> CountMatrix {
    CountMatrix::from_blocks(
        array![
            [12, 15, 9, 30, 41, 28],
            [0, 0, 0, 4, 7, 2],
            [100, 87, 130, 95, 120, 101],
            [3, 5, 1, 2, 6, 4],
            [60, 10, 95, 20, 35, 5]
        ],
        &[3, 3],
    )
    .unwrap()
}

#[test]
fn zero_condition_makes_logratio_undefined_only() {
    let data = toy();
    let f = toy_fit(&data);
    let tables = run_tests(&f, &data, &TestKind::ALL, true).unwrap();
    let by_kind = |k: TestKind| tables.iter().find(|t| t.kind == k).unwrap();
    assert!(by_kind(TestKind::Difference).results[1].defined());
    assert!(!by_kind(TestKind::LogRatio).results[1].defined());
    // λ̂₁ = 0: ratio is defined as a statistic but has zero delta variance
    assert!(!by_kind(TestKind::Ratio).results[1].defined());
    let lr = by_kind(TestKind::LogRatio);
    assert_eq!(lr.n_defined(), 4);
    assert!(lr.results[1].p_adjusted.is_none());
    for r in &lr.results {
        if let (Some(p), Some(q)) = (r.p_value, r.p_adjusted) {
            assert!(q >= p && q <= 1.0);
        }
    }
}

#[test]
fn bh_runs_over_defined_genes_only() {
    let data = toy();
    let f = toy_fit(&data);
    let tables = run_tests(&f, &data, &[TestKind::LogRatio], true).unwrap();
    let defined: Vec<f64> = tables[0].results.iter().filter_map(|r| r.p_value).collect();
    let adjusted = bh_adjust(&defined).unwrap();
    let got: Vec<f64> = tables[0].results.iter().filter_map(|r| r.p_adjusted).collect();
    assert_eq!(got, adjusted);
}

#[test]
fn statistics_against_direct_formulas() {
    let data = toy();
    let f = toy_fit(&data);
    let tables = run_tests(&f, &data, &TestKind::ALL, true).unwrap();
    let i = 0;
    let mix: f64 = (0..2).map(|k| f.tau.tau[[i, k]] / f.params.alphas[k]).sum();
    let l1 = 12.0;
    let l2 = 33.0;
    let v = |l: f64| l * (1.0 + l * mix) / 3.0 * 1.5;
    let (v1, v2) = (v(l1), v(l2));
    let diff = (l1 - l2) / (v1 + v2).sqrt();
    let ratio = (l1 / l2 - 1.0) / (v1 / (l2 * l2) + l1 * l1 * v2 / l2.powi(4)).sqrt();
    let logratio = (l1.ln() - l2.ln()) / (v1 / (l1 * l1) + v2 / (l2 * l2)).sqrt();
    assert_relative_eq!(tables[0].results[i].statistic.unwrap(), diff, max_relative = 1e-12);
    assert_relative_eq!(tables[1].results[i].statistic.unwrap(), ratio, max_relative = 1e-12);
    assert_relative_eq!(tables[2].results[i].statistic.unwrap(), logratio, max_relative = 1e-12);
    assert_relative_eq!(
        tables[0].results[i].p_value.unwrap(),
        two_sided_p(diff),
        max_relative = 1e-14
    );
}

#[test]
fn condition_swap_negates_difference_and_logratio() {
    let data = toy();
    let swapped_counts = {
        let c = data.counts();
        let mut out = Array2::zeros(c.dim());
        for i in 0..c.nrows() {
            for s in 0..6 {
                out[[i, (s + 3) % 6]] = c[[i, s]];
            }
        }
        out
    };
    let swapped = CountMatrix::from_blocks(swapped_counts, &[3, 3]).unwrap();
    let a = run_tests(&toy_fit(&data), &data, &TestKind::ALL, true).unwrap();
    let b = run_tests(&toy_fit(&swapped), &swapped, &TestKind::ALL, true).unwrap();
    for kind_idx in [0usize, 2] {
        for (x, y) in a[kind_idx].results.iter().zip(&b[kind_idx].results) {
            match (x.statistic, y.statistic) {
                (Some(s), Some(t)) => assert_relative_eq!(s, -t, max_relative = 1e-9, epsilon = 1e-12),
                (None, None) => {}
                other => panic!("definedness differs: {other:?}"),
            }
        }
    }
}

#[test]
fn rejects_more_than_two_conditions() {
    let data = CountMatrix::from_blocks(array![[1, 2, 3, 4, 5, 6], [3, 3, 3, 1, 1, 9]], &[2, 2, 2]).unwrap();
    let f = fit(&data, 1, &FitConfig::default()).unwrap();
    assert!(matches!(
        run_tests(&f, &data, &[TestKind::Difference], true),
        Err(NbmixError::UnsupportedDesign(_))
    ));
}

#[test]
fn single_replicate_needs_correction_off() {
    let data = CountMatrix::from_blocks(array![[4, 9, 11], [2, 0, 1]], &[1, 2]).unwrap();
    let f = fit(&data, 1, &FitConfig::default()).unwrap();
    assert!(matches!(
        run_tests(&f, &data, &[TestKind::Difference], true),
        Err(NbmixError::InsufficientReplicates { condition: 0, n: 1 })
    ));
    assert!(run_tests(&f, &data, &[TestKind::Difference], false).is_ok());
}

#[test]
fn mixture_variance_formula_matches_monte_carlo() {
    // λ = 10, τ = (0.5, 0.5), α = (2, 10), n_j = 4: Var(λ̂) = 10·(1 + 10·0.3)/4 = 10
    let (lambda, n_j) = (10.0, 4usize);
    let tau = [0.5, 0.5];
    let alphas = [2.0, 10.0];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let reps = 200_000;
    let means: Vec<f64> = (0..reps)
        .map(|_| {
            let a = if rng.random::<f64>() < tau[0] {
                alphas[0]
            } else {
                alphas[1]
            };
            (0..n_j).map(|_| sample_nb(&mut rng, lambda, a) as f64).sum::<f64>() / n_j as f64
        })
        .collect();
    let m = means.iter().sum::<f64>() / reps as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let formula = variance_lambda_hat(&[0; 4], lambda, &tau, &alphas, false).unwrap();
    assert_relative_eq!(formula, 10.0, max_relative = 1e-14);
    // relative sd of a sample variance is about sqrt(2/reps)·(kurtosis factor); 2% is > 4 sd here
    assert!((var - formula).abs() / formula < 0.02, "mc {var} vs {formula}");
    let corrected = variance_lambda_hat(&[0; 4], lambda, &tau, &alphas, true).unwrap();
    assert_relative_eq!(corrected, 40.0 / 3.0, max_relative = 1e-14);
}

#[test]
fn overdispersion_mix_is_bounded_by_component_extremes() {
    let data = toy();
    let f = toy_fit(&data);
    let (lo, hi) = (f.params.alphas[0], f.params.alphas[1]);
    for i in 0..data.n_genes() {
        let gv = nbmix_core::difftest::gene_variance(&data, &f, i, true);
        assert!(gv.overdisp_mix >= 1.0 / hi - 1e-15 && gv.overdisp_mix <= 1.0 / lo + 1e-15);
        assert!(gv.var_lambda_hat.iter().all(|v| *v >= 0.0));
    }
}

proptest! {
    #[test]
    fn bh_is_monotone_bounded_and_equivariant(ps in prop::collection::vec(0.0f64..=1.0, 1..60), shift in 0usize..60) {
        let q = bh_adjust(&ps).unwrap();
        for (p, a) in ps.iter().zip(&q) {
            prop_assert!(a >= p && *a <= 1.0);
        }
        let mut order: Vec<usize> = (0..ps.len()).collect();
        order.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
        for w in order.windows(2) {
            prop_assert!(q[w[0]] <= q[w[1]]);
        }
        let n = ps.len();
        let rotated: Vec<f64> = (0..n).map(|i| ps[(i + shift) % n]).collect();
        let rq = bh_adjust(&rotated).unwrap();
        for i in 0..n {
            prop_assert_eq!(rq[i], q[(i + shift) % n]);
        }
    }

    #[test]
    fn difference_is_antisymmetric(l1 in 0.0f64..500.0, l2 in 0.0f64..500.0, v1 in 0.01f64..50.0, v2 in 0.01f64..50.0) {
        let a = difference_test(l1, l2, v1, v2).unwrap();
        let b = difference_test(l2, l1, v2, v1).unwrap();
        prop_assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn p_values_lie_in_unit_interval(z in -40.0f64..40.0) {
        let p = two_sided_p(z);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
