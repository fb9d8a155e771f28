//! Property suite run on every `cargo test`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dtrwql::inference::m_from_alpha;
use dtrwql::kernel::Profiler;
use dtrwql::linmodel::{opt_action, pseudo_outcome, q_value, wls_fit, ThetaHat};
use dtrwql::qlearn::{fit_dtr, MethodConfig, MiConfig};
use dtrwql::sa::{tilt_sample, Discrete};
use dtrwql::simbench::{generate, run_study, Design, SimDesign};
use dtrwql::stats::{chi2_cdf, chi2_quantile, wilcoxon_rank_sum, RngStream};

fn stage2_history(y1: f64, a1: f64, x21: f64, x22: f64) -> HashMap<String, f64> {
    HashMap::from([
        ("Y1".to_string(), y1),
        ("A1".to_string(), a1),
        ("X2_1".to_string(), x21),
        ("X2_2".to_string(), x22),
    ])
}

// (a) with nothing missing every method reduces to the same least squares
proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn no_missingness_all_methods_identical(seed in 0u64..10_000, n in 150usize..300) {
        let d = Design::Sim1;
        let real = generate(SimDesign { design: d, n }, &RngStream::new(seed)).unwrap();
        let specs = d.qspecs();
        let methods = [
            MethodConfig::all(),
            MethodConfig::naive(),
            MethodConfig::cc(),
            MethodConfig::mi(MiConfig { m: 3, ..MiConfig::default() }),
            MethodConfig::wq_ee(d.instruments()),
            MethodConfig::wq_sa([(1, 1.0)]),
        ];
        let fits: Vec<_> = methods
            .iter()
            .map(|c| fit_dtr(&real.full, &specs, c, &RngStream::new(seed).child("fit", 0)).unwrap())
            .collect();
        for f in &fits[1..] {
            for t in 1..=2 {
                prop_assert_eq!(&f.theta(t).unwrap().beta, &fits[0].theta(t).unwrap().beta);
                prop_assert_eq!(&f.theta(t).unwrap().psi, &fits[0].theta(t).unwrap().psi);
            }
        }
    }
}

// (b) pseudo-outcome against the two-point maximum
proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn pseudo_outcome_is_two_point_max(
        beta in prop::collection::vec(-5.0..5.0f64, 5),
        psi in prop::collection::vec(-5.0..5.0f64, 3),
        y1 in -5.0..5.0f64,
        a1 in prop::bool::ANY,
        x21 in -3.0..3.0f64,
        x22 in 0.0..2.0f64,
    ) {
        let spec = &Design::Sim1.qspecs()[1];
        let theta = ThetaHat { stage: 2, beta, psi };
        let h = stage2_history(y1, if a1 { 1.0 } else { -1.0 }, x21, x22);
        let oracle = q_value(spec, &theta, &h, 1.0).unwrap().max(q_value(spec, &theta, &h, -1.0).unwrap());
        let got = pseudo_outcome(spec, &theta, &h).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
    }
}

// (c) two far-apart cells with a tiny bandwidth: each unit only sees its own cell
proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn separated_cells_closed_form(
        cells in prop::collection::vec((prop::bool::ANY, prop::bool::ANY, -2.0..2.0f64), 6..40),
        gamma in -1.5..1.5f64,
    ) {
        let mut cells = cells;
        // every cell needs a respondent
        cells[0] = (false, true, cells[0].2);
        cells[1] = (true, true, cells[1].2);
        let u: Vec<f64> = cells.iter().map(|c| if c.0 { 100.0 } else { 0.0 }).collect();
        let r: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let y: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let prof = Profiler::new(std::slice::from_ref(&u), &y, &r, &[0.01]).unwrap();
        let table = prof.profile(gamma).unwrap();
        for i in 0..u.len() {
            let same = |j: usize| u[j] == u[i];
            let n0 = (0..u.len()).filter(|&j| same(j) && !r[j]).count() as f64;
            let den: f64 = (0..u.len()).filter(|&j| same(j) && r[j]).map(|j| (gamma * (y[j] - prof.center)).exp()).sum();
            let want = n0 / den;
            prop_assert!((table.exp_s[i] - want).abs() <= 1e-9 * (1.0 + want), "unit {}: {} vs {}", i, table.exp_s[i], want);
        }
    }
}

// (d) tilting a three-point law reweights each mass by exp(γ′ y)
proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn three_point_tilt_enumeration(
        probs in prop::collection::vec(0.1..1.0f64, 3),
        values in (-1.5..-0.5f64, -0.4..0.4f64, 0.5..1.5f64),
        gamma in -1.0..1.0f64,
        seed in 0u64..1000,
    ) {
        let v = vec![values.0, values.1, values.2];
        let q = Discrete::new(v.clone(), &probs).unwrap();
        let mut rng = RngStream::new(seed).rng();
        let draws = tilt_sample(0.0, &q, gamma, 40_000, &mut rng).unwrap();
        let w: Vec<f64> = probs.iter().zip(&v).map(|(p, y)| p * (gamma * y).exp()).collect();
        let total: f64 = w.iter().sum();
        for k in 0..3 {
            let freq = draws.iter().filter(|&&d| d == v[k]).count() as f64 / draws.len() as f64;
            prop_assert!((freq - w[k] / total).abs() < 0.02, "point {}: {} vs {}", k, freq, w[k] / total);
        }
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect())
        .collect()
}

// (e) every tie-free arrangement of up to five against up to five values
#[test]
fn wilcoxon_exact_matches_enumeration() {
    for n1 in 1..=5 {
        for n2 in 1..=5 {
            let n = n1 + n2;
            let all = subsets(n, n1);
            let sums: Vec<usize> = all.iter().map(|s| s.iter().map(|i| i + 1).sum()).collect();
            for (s, &w) in all.iter().zip(&sums) {
                let lower = sums.iter().filter(|&&v| v <= w).count() as f64;
                let upper = sums.iter().filter(|&&v| v >= w).count() as f64;
                let oracle = (2.0 * lower.min(upper) / sums.len() as f64).min(1.0);
                let x: Vec<f64> = s.iter().map(|&i| i as f64).collect();
                let y: Vec<f64> = (0..n).filter(|i| !s.contains(i)).map(|i| i as f64).collect();
                let p = wilcoxon_rank_sum(&x, &y);
                assert!((p - oracle).abs() < 1e-12, "n1={n1} n2={n2} x={x:?}: {p} vs {oracle}");
            }
        }
    }
}

// (f)
proptest! {
    #[test]
    fn m_from_alpha_identities(n in 1usize..20_000, alpha in 0.0..=1.0f64, p in 0.0..=1.0f64, q in 0.0..=1.0f64) {
        prop_assert_eq!(m_from_alpha(n, alpha, 0.0), n);
        prop_assert_eq!(m_from_alpha(n, 0.0, p), n);
        let m = m_from_alpha(n, alpha, p);
        prop_assert!(m >= 1 && m <= n);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(m_from_alpha(n, alpha, hi) <= m_from_alpha(n, alpha, lo));
        prop_assert!(m_from_alpha(n, 1.0, p) <= m_from_alpha(n, alpha, p));
    }
}

// (g)
#[test]
fn chi2_quantile_cdf_round_trip() {
    for k in 1..100 {
        let p = k as f64 / 100.0;
        let x = chi2_quantile(p, 1).unwrap();
        assert!((chi2_cdf(x) - p).abs() < 1e-8, "p={p}");
        // one degree of freedom: F(x) = erf(√(x/2))
        assert!((statrs::function::erf::erf((x / 2.0).sqrt()) - p).abs() < 1e-8, "p={p}");
    }
}

// (h)
proptest! {
    #[test]
    fn wls_matches_normal_equations(
        xs in prop::collection::vec(-3.0..3.0f64, 40),
        y in prop::collection::vec(-10.0..10.0f64, 20),
        w in prop::collection::vec(0.1..5.0f64, 20),
    ) {
        let x = DMatrix::from_fn(20, 3, |r, c| if c == 0 { 1.0 } else { xs[2 * r + c - 1] });
        let wm = DMatrix::from_diagonal(&DVector::from_column_slice(&w));
        let xtwx = x.transpose() * &wm * &x;
        prop_assume!(xtwx.clone().symmetric_eigenvalues().min() > 1e-3);
        let oracle = xtwx.lu().solve(&(x.transpose() * &wm * DVector::from_column_slice(&y))).unwrap();
        let got = wls_fit(&x, &y, &w).unwrap();
        for j in 0..3 {
            prop_assert!((got[j] - oracle[j]).abs() < 1e-10 * (1.0 + oracle[j].abs()));
        }
    }
}

// (i)
proptest! {
    #[test]
    fn recommendation_invariant_to_positive_scaling(
        psi in prop::collection::vec(-5.0..5.0f64, 3),
        c in 1e-3..1e3f64,
        a1 in prop::bool::ANY,
        x22 in 0.0..2.0f64,
    ) {
        let spec = &Design::Sim1.qspecs()[1];
        let h = stage2_history(0.3, if a1 { 1.0 } else { -1.0 }, 0.1, x22);
        let th = |p: Vec<f64>| ThetaHat { stage: 2, beta: vec![0.0; 5], psi: p };
        let scaled: Vec<f64> = psi.iter().map(|v| v * c).collect();
        prop_assert_eq!(opt_action(spec, &th(psi), &h).unwrap(), opt_action(spec, &th(scaled), &h).unwrap());
    }
}

// (j)
#[test]
fn study_identical_across_thread_counts() {
    let d = Design::Sim1;
    let methods = [MethodConfig::cc(), MethodConfig::wq_ee(d.instruments())];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_study(SimDesign { design: d, n: 200 }, &methods, 4, 2000, &RngStream::new(77), None).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.records, three.records);
    assert_eq!(one.rows, three.rows);
}
