use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcmsim_core::stats::{
    describe, f_upper_p, kde_density, linspace, mann_whitney_u, midranks, paired_t_test,
    regularized_incomplete_beta, shapiro_wilk, shapiro_wilk_coefficients, signed_rank_exact_tails,
    silverman_bandwidth_from, t_two_sided_p, two_way_anova, wilcoxon_normal_p,
    wilcoxon_signed_rank, Observation,
};
use statrs::function::gamma::ln_gamma;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Two-sided t tail by integrating the density from 0 to |t|.
fn integrated_t_p(t: f64, df: f64) -> f64 {
    let ln_c =
        ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    1.0 - 2.0 * simpson(density, 0.0, t.abs(), 20_000)
}

/// Two-sided signed-rank p by listing every sign assignment.
fn brute_force_signed_rank(d: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, _) = midranks(&abs);
    let observed: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = d.len();
    let (mut le, mut ge) = (0usize, 0usize);
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1usize << n) as f64;
    (observed, (2.0 * (le.min(ge) as f64) / total).min(1.0))
}

#[test]
fn describe_uses_type7_quartiles() {
    let d = describe(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!(close(d.mean, 3.0, 1e-15));
    assert!(close(d.sd.unwrap(), 2.5f64.sqrt(), 1e-15));
    assert_eq!((d.q1, d.median, d.q3), (2.0, 3.0, 4.0));
    let d = describe(&[7.0, 1.0, 4.0, 10.0]).unwrap();
    assert!(close(d.q1, 3.25, 1e-15) && close(d.q3, 7.75, 1e-15));
    assert_eq!(describe(&[2.5]).unwrap().sd, None);
    assert!(describe(&[]).is_err());
}

#[test]
fn incomplete_beta_examples() {
    for x in [0.0, 0.3, 1.0] {
        assert!(close(
            regularized_incomplete_beta(x, 1.0, 1.0).unwrap(),
            x,
            1e-14
        ));
    }
    assert!(close(
        regularized_incomplete_beta(0.5, 2.0, 2.0).unwrap(),
        0.5,
        1e-14
    ));
    assert!(regularized_incomplete_beta(1.5, 2.0, 2.0).is_err());
    assert!(regularized_incomplete_beta(0.5, 0.0, 2.0).is_err());
}

#[test]
fn incomplete_beta_matches_integrated_density() {
    for (x, a, b) in [
        (0.2, 2.5, 3.0),
        (0.7, 1.5, 4.0),
        (0.45, 8.0, 6.5),
        (0.9, 3.0, 1.2),
    ] {
        let ln_norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
        let density = |t: f64| (ln_norm + (a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln()).exp();
        let oracle = simpson(density, 0.0, x, 200_000);
        let got = regularized_incomplete_beta(x, a, b).unwrap();
        assert!(
            close(got, oracle, 1e-8),
            "I_{x}({a},{b}) = {got} vs {oracle}"
        );
    }
}

#[test]
fn t_p_values_match_integrated_density() {
    for (t, df) in [
        (4.242640687, 4.0),
        (1.3, 9.0),
        (-2.7, 15.0),
        (0.4, 2.0),
        (6.0, 30.0),
    ] {
        let got = t_two_sided_p(t, df).unwrap();
        let oracle = integrated_t_p(t, df);
        assert!(close(got, oracle, 1e-6), "t={t} df={df}: {got} vs {oracle}");
    }
}

#[test]
fn paired_t_examples() {
    let b = [0.0; 5];
    let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &b).unwrap();
    assert!(close(r.statistic, 18f64.sqrt(), 1e-12));
    assert_eq!(r.df, Some(4.0));
    assert!(close(r.p_value, integrated_t_p(r.statistic, 4.0), 1e-6));
    assert!(close(r.p_value, 0.0132, 5e-5));

    let same = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
    assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
    assert!(same.degenerate);
    assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn paired_t_matches_reference_implementation() {
    let a = [4.1, 5.3, 3.8, 6.0, 4.9, 5.5, 4.4, 5.1];
    let b = [3.2, 4.0, 3.9, 4.1, 3.5, 4.8, 3.0, 4.4];
    let r = paired_t_test(&a, &b).unwrap();
    assert!(close(r.statistic, 4.743315715515406, 1e-10));
    assert!(close(r.p_value, 0.0020997624287354653, 1e-9));
    let swapped = paired_t_test(&b, &a).unwrap();
    assert_eq!(swapped.statistic, -r.statistic);
    assert!(close(swapped.p_value, r.p_value, 1e-15));
}

#[test]
fn wilcoxon_all_positive_five() {
    let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    assert_eq!(r.statistic, 15.0);
    assert!(r.exact);
    assert!(close(r.p_value, 0.0625, 1e-15));
}

#[test]
fn wilcoxon_exact_matches_enumeration_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in 5..=12 {
        for _ in 0..20 {
            // Coarse grid so that ties and zero differences occur.
            let a: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..8) as f64 * 0.5)
                .collect();
            let b: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..8) as f64 * 0.5)
                .collect();
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            if d.iter().filter(|v| **v != 0.0).count() < 5 {
                assert!(wilcoxon_signed_rank(&a, &b).is_err());
                continue;
            }
            let (w, p) = brute_force_signed_rank(&d);
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            assert_eq!(r.statistic, w);
            assert!(close(r.p_value, p, 1e-12), "n={n}: {} vs {p}", r.p_value);
        }
    }
}

#[test]
fn wilcoxon_symmetric_differences_sit_at_the_null_center() {
    let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
    let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
    assert_eq!(r.statistic, 10.5);
    assert_eq!(r.p_value, 1.0);
    assert!(wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6]).is_err());
}

#[test]
fn wilcoxon_approximation_tracks_exact() {
    // The tail recursion is checked against enumeration first, then used
    // as the exact reference at sizes where enumeration is slow.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let d: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.5)).collect();
        let (w, exact) = brute_force_signed_rank(&d);
        let (le, ge) = signed_rank_exact_tails(
            &midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>()).0,
            w,
        );
        assert!(close((2.0 * le.min(ge)).min(1.0), exact, 1e-12));
    }
    for n in [20, 25, 30] {
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            let ranks = midranks(&abs).0;
            let w: f64 = d
                .iter()
                .zip(&ranks)
                .filter(|(v, _)| **v > 0.0)
                .map(|(_, r)| r)
                .sum();
            let (le, ge) = signed_rank_exact_tails(&ranks, w);
            let exact = (2.0 * le.min(ge)).min(1.0);
            worst = worst.max((wilcoxon_normal_p(&ranks, w) - exact).abs());
            if n > 20 {
                let r = wilcoxon_signed_rank(&d, &vec![0.0; n]).unwrap();
                assert!(!r.exact);
                assert_eq!(r.statistic, w);
            }
        }
        assert!(worst < 0.01, "n={n}: worst disagreement {worst}");
    }
}

#[test]
fn mann_whitney_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let r = mann_whitney_u(&x, &x).unwrap();
    assert_eq!(r.statistic, 8.0);
    assert!(r.p_value > 0.99);

    let (lo, hi) = ([1.0, 2.0, 3.0], [4.0, 5.0, 6.0, 7.0]);
    let r = mann_whitney_u(&lo, &hi).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!(r.exact);
    // C(7, 3) = 35 equally likely rank sets, one at each extreme.
    assert!(close(r.p_value, 2.0 / 35.0, 1e-15));
    let swapped = mann_whitney_u(&hi, &lo).unwrap();
    assert_eq!(swapped.statistic, 12.0);
    assert!(close(swapped.p_value, r.p_value, 1e-15));
    assert!(mann_whitney_u(&[1.0, 2.0], &hi).is_err());
    assert!(mann_whitney_u(&[], &hi).is_err());
}

#[test]
fn mann_whitney_matches_reference_implementation() {
    let r = mann_whitney_u(&[1.2, 3.4, 2.2, 5.1, 0.7], &[4.4, 6.1, 3.9, 7.3, 5.6, 2.8]).unwrap();
    assert!(r.exact);
    assert_eq!(r.statistic, 4.0);
    assert!(close(r.p_value, 0.05194805194805195, 1e-12));

    let x = [1.5, 2.0, 2.0, 3.1, 4.2, 4.2, 5.0, 6.3, 7.7];
    let y = [2.0, 3.1, 4.9, 5.5, 6.3, 8.0, 8.4, 9.1, 9.9, 10.2];
    let r = mann_whitney_u(&x, &y).unwrap();
    assert!(!r.exact);
    assert_eq!(r.statistic, 19.0);
    assert!(close(r.p_value, 0.03675382054808662, 1e-9));
}

#[test]
fn shapiro_wilk_perfect_fit_is_one() {
    for n in [4, 7, 12, 30] {
        let half = shapiro_wilk_coefficients(n);
        let mut a = vec![0.0; n];
        for (i, c) in half.iter().enumerate() {
            a[i] = -c;
            a[n - 1 - i] = *c;
        }
        let x: Vec<f64> = a.iter().map(|v| 3.0 + 2.0 * v).collect();
        let r = shapiro_wilk(&x).unwrap();
        assert!(close(r.statistic, 1.0, 1e-6), "n={n}: W={}", r.statistic);
    }
}

#[test]
fn shapiro_wilk_matches_reference_implementation() {
    let x = [2.31, 1.77, 3.05, 2.89, 1.42, 2.66, 3.71, 2.18, 1.95, 2.47];
    let r = shapiro_wilk(&x).unwrap();
    assert!(close(r.statistic, 0.9891952796140763, 1e-3));
    assert!(close(r.p_value, 0.9957390874744391, 1e-3));

    let skewed = [
        0.8, 1.1, 1.2, 1.3, 1.5, 1.9, 2.4, 3.9, 5.8, 9.7, 12.5, 20.1, 0.3, 0.9, 1.05, 1.6, 2.2,
        2.9, 4.4, 7.1,
    ];
    let r = shapiro_wilk(&skewed).unwrap();
    assert!(close(r.statistic, 0.716468956102766, 1e-3));
    assert!(close(r.p_value, 6.233322707685859e-05, 1e-3));

    let bimodal: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 100.0 }).collect();
    assert!(shapiro_wilk(&bimodal).unwrap().p_value < 0.01);
    assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
    assert!(shapiro_wilk(&[4.0; 10]).is_err());
    assert!(shapiro_wilk(&vec![1.0; 51]).is_err());
}

/// Residual sum of squares of a least-squares fit on the given columns.
fn rss(columns: &[Vec<f64>], y: &[f64]) -> f64 {
    let x = DMatrix::from_fn(y.len(), columns.len(), |i, j| columns[j][i]);
    let y = DVector::from_column_slice(y);
    let beta = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    (y - x * beta).norm_squared()
}

fn indicators(obs: &[Observation], f: impl Fn(&Observation) -> Option<bool>) -> Vec<f64> {
    obs.iter()
        .map(|o| f(o).map_or(0.0, |b| b as u8 as f64))
        .collect()
}

/// Sums of squares by comparing nested regression models built from dummy
/// columns: mean, mean + A, mean + A + B, full cell model.
fn regression_ss(obs: &[Observation], la: usize, lb: usize) -> [f64; 4] {
    let y: Vec<f64> = obs.iter().map(|o| o.value).collect();
    let mut cols = vec![vec![1.0; obs.len()]];
    let base = rss(&cols, &y);
    for i in 1..la {
        cols.push(indicators(obs, |o| Some(o.a == i)));
    }
    let after_a = rss(&cols, &y);
    for j in 1..lb {
        cols.push(indicators(obs, |o| Some(o.b == j)));
    }
    let after_b = rss(&cols, &y);
    for i in 1..la {
        for j in 1..lb {
            cols.push(indicators(obs, |o| Some(o.a == i && o.b == j)));
        }
    }
    let full = rss(&cols, &y);
    [base - after_a, after_a - after_b, after_b - full, full]
}

fn crossed_dataset(seed: u64, per_cell: usize) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    for a in 0..2 {
        for b in 0..3 {
            for _ in 0..per_cell {
                let effect = 1.5 * a as f64 + 0.7 * b as f64 + 1.2 * (a * b) as f64;
                obs.push(Observation {
                    a,
                    b,
                    value: effect + rng.random_range(-1.0..1.0),
                });
            }
        }
    }
    obs
}

#[test]
fn anova_matches_regression_sums_of_squares() {
    for seed in 0..10 {
        let obs = crossed_dataset(seed, 10);
        let t = two_way_anova(&obs, 2, 3).unwrap();
        let [ss_a, ss_b, ss_ab, ss_e] = regression_ss(&obs, 2, 3);
        for (got, want) in [
            (t.ss_a, ss_a),
            (t.ss_b, ss_b),
            (t.ss_ab, ss_ab),
            (t.ss_error, ss_e),
        ] {
            assert!(close(got, want, 1e-9 * (1.0 + want)), "{got} vs {want}");
        }
        let ms_e = ss_e / 54.0;
        let f = [
            (t.a.statistic, ss_a / 1.0),
            (t.b.statistic, ss_b / 2.0),
            (t.interaction.statistic, ss_ab / 2.0),
        ];
        for (got, ms) in f {
            assert!(close(got, ms / ms_e, 1e-9 * (1.0 + got)));
        }
        assert!(close(
            t.interaction.p_value,
            f_upper_p(ss_ab / 2.0 / ms_e, 2.0, 54.0).unwrap(),
            1e-12
        ));
        assert_eq!((t.df_a, t.df_b, t.df_ab, t.df_error), (1.0, 2.0, 2.0, 54.0));
    }
}

#[test]
fn anova_regression_values() {
    // Two replicates per cell, hand-checkable cell means.
    let data = [
        (0, 0, 1.0),
        (0, 0, 3.0),
        (0, 1, 4.0),
        (0, 1, 6.0),
        (0, 2, 2.0),
        (0, 2, 2.0),
        (1, 0, 5.0),
        (1, 0, 7.0),
        (1, 1, 5.0),
        (1, 1, 5.0),
        (1, 2, 9.0),
        (1, 2, 11.0),
    ];
    let obs: Vec<Observation> = data
        .iter()
        .map(|&(a, b, value)| Observation { a, b, value })
        .collect();
    let t = two_way_anova(&obs, 2, 3).unwrap();
    // grand 5; A means 3, 7; B means 4, 5, 6; cell means 2, 5, 2, 6, 5, 10
    assert!(close(t.ss_a, 48.0, 1e-12));
    assert!(close(t.ss_b, 8.0, 1e-12));
    assert!(close(t.ss_ab, 32.0, 1e-12));
    assert!(close(t.ss_error, 8.0, 1e-12));
    assert!(close(t.interaction.statistic, 12.0, 1e-12));
}

#[test]
fn anova_degenerate_and_additive_cases() {
    let flat: Vec<Observation> = (0..12)
        .map(|k| Observation {
            a: k % 2,
            b: k % 3,
            value: 4.0,
        })
        .collect();
    let t = two_way_anova(&flat, 2, 3).unwrap();
    for r in [&t.a, &t.b, &t.interaction] {
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
    }
    let additive: Vec<Observation> = (0..24)
        .map(|k| {
            let (a, b) = (k % 2, k % 3);
            Observation {
                a,
                b,
                value: 2.0 * a as f64 - 1.5 * b as f64 + 0.01 * (k / 6) as f64,
            }
        })
        .collect();
    let t = two_way_anova(&additive, 2, 3).unwrap();
    assert!(t.ss_ab < 1e-9 * (t.ss_a + t.ss_b));
    let missing: Vec<Observation> = flat
        .iter()
        .copied()
        .filter(|o| !(o.a == 1 && o.b == 2))
        .collect();
    assert!(two_way_anova(&missing, 2, 3).is_err());
}

#[test]
fn kde_examples() {
    assert!(close(
        silverman_bandwidth_from(1.0, 1.349, 100),
        0.9 * 100f64.powf(-0.2),
        1e-12
    ));
    assert!(close(
        silverman_bandwidth_from(1.0, 1.349, 100),
        0.3583,
        1e-4
    ));

    let grid = linspace(-10.0, 12.0, 2201);
    let y = kde_density(&[0.0, 2.0], &grid).unwrap();
    for (k, v) in y.iter().enumerate() {
        let mirror = y[grid.len() - 1 - k];
        // grid is symmetric about 1
        assert!(close(*v, mirror, 1e-12));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..5.0)).collect();
    let grid = linspace(-10.0, 15.0, 5001);
    let y = kde_density(&x, &grid).unwrap();
    let integral: f64 = y.windows(2).map(|w| 0.5 * (w[0] + w[1]) * 0.005).sum();
    assert!(close(integral, 1.0, 1e-3));
    assert!(kde_density(&[1.0], &grid).is_err());
    assert!(kde_density(&[1.0, 1.0], &grid).is_err());
}

proptest! {
    #[test]
    fn incomplete_beta_reflection(x in 0.0f64..=1.0, a in 0.05f64..50.0, b in 0.05f64..50.0) {
        let s = regularized_incomplete_beta(x, a, b).unwrap()
            + regularized_incomplete_beta(1.0 - x, b, a).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12, "sum {}", s);
    }

    #[test]
    fn p_values_are_probabilities(
        a in proptest::collection::vec(-10.0f64..10.0, 6..30),
        shift in -3.0f64..3.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.5 + shift + (i % 3) as f64).collect();
        for r in [paired_t_test(&a, &b), wilcoxon_signed_rank(&a, &b), mann_whitney_u(&a, &b), shapiro_wilk(&a)]
            .into_iter()
            .flatten()
        {
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }
    }

    #[test]
    fn paired_tests_ignore_a_common_offset(
        pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 6..20),
        c in -100.0f64..100.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        // Offsets that are exact in binary keep the differences identical.
        let c = (c * 8.0).round() / 8.0;
        let a2: Vec<f64> = a.iter().map(|v| v + c).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + c).collect();
        let t1 = paired_t_test(&a, &b).unwrap();
        let t2 = paired_t_test(&a2, &b2).unwrap();
        prop_assert!((t1.statistic - t2.statistic).abs() < 1e-6 * (1.0 + t1.statistic.abs()));
        prop_assert!((t1.p_value - t2.p_value).abs() < 1e-6);
        if let (Ok(w1), Ok(w2)) = (wilcoxon_signed_rank(&a, &b), wilcoxon_signed_rank(&a2, &b2)) {
            prop_assert_eq!(w1.statistic, w2.statistic);
            prop_assert!((w1.p_value - w2.p_value).abs() < 1e-12);
        }
    }

    #[test]
    fn describe_and_anova_ignore_order(seed in 0u64..1000) {
        let mut obs = crossed_dataset(seed, 4);
        let t1 = two_way_anova(&obs, 2, 3).unwrap();
        let values: Vec<f64> = obs.iter().map(|o| o.value).collect();
        let d1 = describe(&values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..obs.len()).rev() {
            obs.swap(i, rng.random_range(0..=i));
        }
        let t2 = two_way_anova(&obs, 2, 3).unwrap();
        let values: Vec<f64> = obs.iter().map(|o| o.value).collect();
        let d2 = describe(&values).unwrap();
        prop_assert!((t1.ss_ab - t2.ss_ab).abs() < 1e-9 && (t1.ss_error - t2.ss_error).abs() < 1e-9);
        prop_assert!((d1.median - d2.median).abs() < 1e-15 && (d1.q3 - d2.q3).abs() < 1e-15);
        prop_assert!((d1.mean - d2.mean).abs() < 1e-12);
    }
}
