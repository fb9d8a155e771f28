//! Backward induction, imputation, bootstrap and the simulation designs.

use nalgebra::{DMatrix, DVector};

use dtrwql::inference::{bootstrap_ci, p_nonregu_hat, select_alpha, BootPlan, Target};
use dtrwql::linmodel::{Component, QSpec};
use dtrwql::qlearn::{cross_validate_value, fit_dtr, pmm_impute, pseudo_slice, MethodConfig, MiConfig};
use dtrwql::simbench::{draw_latent, evaluate_regime, generate, realize, Design, RegimeFn, SimDesign, TrueRegime};
use dtrwql::stats::RngStream;
use dtrwql::Dataset;

fn sim(design: Design, n: usize, seed: u64) -> dtrwql::simbench::Realized {
    generate(SimDesign { design, n }, &RngStream::new(seed)).unwrap()
}

fn ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let x = DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
    let xt = x.transpose();
    (&xt * &x).lu().solve(&(&xt * DVector::from_column_slice(y))).unwrap().iter().copied().collect()
}

#[test]
fn all_matches_backward_ols_oracle() {
    let real = sim(Design::Sim1, 400, 1);
    let ds = &real.full;
    let (s1, s2) = (ds.stage(1).unwrap(), ds.stage(2).unwrap());
    let n = ds.n();
    // stage 2: [1, Y1, A1, X2_1, X2_2 | A2, A2 A1, A2 X2_2]
    let row2 = |i: usize, a2: f64| {
        let (a1, x21, x22) = (s1.a()[i], s2.column(0)[i], s2.column(1)[i]);
        vec![1.0, s1.y()[i], a1, x21, x22, a2, a2 * a1, a2 * x22]
    };
    let y: Vec<f64> = (0..n).map(|i| ds.final_outcome(i)).collect();
    let th2 = ols(&(0..n).map(|i| row2(i, s2.a()[i])).collect::<Vec<_>>(), &y);
    let ypse: Vec<f64> = (0..n)
        .map(|i| {
            let r = row2(i, 1.0);
            let q0: f64 = (0..5).map(|k| r[k] * th2[k]).sum();
            let q1: f64 = (5..8).map(|k| r[k] * th2[k]).sum();
            q0 + q1.abs()
        })
        .collect();
    let th1 = ols(
        &(0..n)
            .map(|i| {
                let (a1, x12) = (s1.a()[i], s1.column(1)[i]);
                vec![1.0, s1.column(0)[i], x12, a1, a1 * x12]
            })
            .collect::<Vec<_>>(),
        &ypse,
    );
    let fit = fit_dtr(ds, &Design::Sim1.qspecs(), &MethodConfig::all(), &RngStream::new(0)).unwrap();
    for (got, want) in [(fit.theta(2).unwrap().stacked(), th2), (fit.theta(1).unwrap().stacked(), th1)] {
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn final_stage_cc_equals_wq_ee() {
    let d = Design::Sim1;
    let real = sim(d, 500, 2);
    let cc = fit_dtr(&real.masked, &d.qspecs(), &MethodConfig::cc(), &RngStream::new(0)).unwrap();
    let ee = fit_dtr(&real.masked, &d.qspecs(), &MethodConfig::wq_ee(d.instruments()), &RngStream::new(0)).unwrap();
    assert_eq!(cc.theta(2).unwrap(), ee.theta(2).unwrap());
    assert_ne!(cc.theta(1).unwrap(), ee.theta(1).unwrap());
}

#[test]
fn mi_is_average_of_imputed_fits() {
    let d = Design::Sim1;
    let real = sim(d, 300, 3);
    let mi = MiConfig { m: 4, ..MiConfig::default() };
    let stream = RngStream::new(9);
    let fit = fit_dtr(&real.masked, &d.qspecs(), &MethodConfig::mi(mi), &stream).unwrap();
    let imputed = pmm_impute(&real.masked, mi.m, mi.k, mi.cycles, &stream.child("mi", 0)).unwrap();
    let fits: Vec<_> = imputed
        .iter()
        .map(|ds| fit_dtr(ds, &d.qspecs(), &MethodConfig::all(), &RngStream::new(0)).unwrap())
        .collect();
    for t in 1..=2 {
        let want: Vec<f64> = (0..fits[0].theta(t).unwrap().stacked().len())
            .map(|k| fits.iter().map(|f| f.theta(t).unwrap().stacked()[k]).sum::<f64>() / mi.m as f64)
            .collect();
        for (g, w) in fit.theta(t).unwrap().stacked().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }
}

#[test]
fn pmm_keeps_observed_cells_and_copies_donors() {
    let real = sim(Design::Sim1, 300, 4);
    let ds = &real.masked;
    let imputed = pmm_impute(ds, 3, 5, 5, &RngStream::new(1)).unwrap();
    for imp in &imputed {
        assert!(imp.is_fully_observed());
        for t in 1..=2 {
            let (before, after) = (ds.stage(t).unwrap(), imp.stage(t).unwrap());
            assert_eq!(before.column(0), after.column(0));
            let obs = before.observed(1);
            let donors: Vec<f64> = (0..ds.n()).filter(|&i| obs[i]).map(|i| before.column(1)[i]).collect();
            for i in 0..ds.n() {
                if obs[i] {
                    assert_eq!(before.column(1)[i], after.column(1)[i]);
                } else {
                    assert!(donors.contains(&after.column(1)[i]));
                }
            }
        }
    }
}

#[test]
fn pmm_recovers_mcar_mean() {
    let real = sim(Design::Sim1, 2000, 5);
    let full = &real.full;
    let truth: Vec<f64> = full.stage(2).unwrap().column(0).to_vec();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    // every third row hidden, unrelated to any value
    let ds = full.mask_covariates(|t, j, i| t == 2 && j == 0 && i % 3 == 0);
    let imputed = pmm_impute(&ds, 5, 5, 5, &RngStream::new(2)).unwrap();
    let sd = (truth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / truth.len() as f64).sqrt();
    for imp in &imputed {
        let col = imp.stage(2).unwrap().column(0);
        let m = col.iter().sum::<f64>() / col.len() as f64;
        assert!((m - mean).abs() < 3.0 * sd / (col.len() as f64 / 3.0).sqrt(), "{m} vs {mean}");
    }
}

#[test]
fn pseudo_response_follows_next_stage_completeness() {
    // the stage-2 spec reads every stage-2 covariate
    let d = Design::Sim1;
    let real = sim(d, 600, 6);
    let slice = pseudo_slice(&real.masked, &d.qspecs(), &MethodConfig::cc(), 1, &RngStream::new(0)).unwrap();
    for (k, &i) in slice.rows.iter().enumerate() {
        assert_eq!(slice.r[k], real.r[1][i]);
    }
}

#[test]
fn naive_drops_partially_observed_terms() {
    let d = Design::Sim1;
    let real = sim(d, 300, 7);
    let fit = fit_dtr(&real.masked, &d.qspecs(), &MethodConfig::naive(), &RngStream::new(0)).unwrap();
    let terms = |t: usize| fit.stage(t).unwrap().qspec.blip.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    assert_eq!(terms(1), vec!["1"]);
    assert_eq!(terms(2), vec!["1", "A1"]);
}

#[test]
fn recommendations_follow_blip_sign() {
    let d = Design::Sim1;
    let real = sim(d, 300, 8);
    let fit = fit_dtr(&real.full, &d.qspecs(), &MethodConfig::all(), &RngStream::new(0)).unwrap();
    let psi = &fit.theta(1).unwrap().psi;
    let s1 = real.full.stage(1).unwrap();
    for i in 0..real.full.n() {
        let blip = psi[0] + psi[1] * s1.column(1)[i];
        let want = if blip > 0.0 { 1.0 } else { -1.0 };
        assert_eq!(fit.recommend(&real.full, i, 1).unwrap(), want);
    }
}

#[test]
fn cv_is_defined_at_the_single_test_row_boundary() {
    let d = Design::Sim1;
    let real = sim(d, 200, 9);
    let frac = 1.0 - 1.0 / 200.0;
    let r = cross_validate_value(&real.full, &d.qspecs(), &MethodConfig::cc(), 1, frac, &RngStream::new(1)).unwrap();
    assert_eq!(r.splits.len(), 1);
    assert!(r.skipped == 1 || r.mean_improvement.is_finite());
}

#[test]
fn p_nonregu_vanishes_in_the_regular_case() {
    let d = Design::Sim1;
    let small = p_nonregu_hat(&sim(d, 300, 10).full, &d.qspecs(), &MethodConfig::cc(), 0.001).unwrap();
    let large = p_nonregu_hat(&sim(d, 20_000, 11).full, &d.qspecs(), &MethodConfig::cc(), 0.001).unwrap();
    assert!(large < 0.02, "p_hat {small} -> {large}");
    assert!(large <= small);
}

fn one_stage(n: usize, seed: u64, slope: f64) -> Dataset {
    use rand::Rng;
    let mut rng = RngStream::new(seed).rng();
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0).collect();
    let a: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * x[i] + a[i] * (slope + 0.3 * x[i]) + rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let st = dtrwql::Stage::new(vec!["1".into()], vec![x], vec![vec![true; n]], a, y).unwrap();
    Dataset::new((0..n).map(|i| format!("p{i}")).collect(), vec![st]).unwrap()
}

fn one_stage_spec() -> Vec<QSpec> {
    vec![QSpec::parse(1, &["1", "X1_1"], &["1", "X1_1"]).unwrap()]
}

#[test]
fn bootstrap_width_matches_normal_theory() {
    let ds = one_stage(400, 12, 1.0);
    let specs = one_stage_spec();
    let target = Target::coefficient(&specs[0], Component::Blip, 0).unwrap();
    let b = bootstrap_ci(&ds, &specs, &MethodConfig::cc(), 2000, 400, std::slice::from_ref(&target), &RngStream::new(3)).unwrap();
    let ci = &b.params[0];
    // HC0 standard error of the same coefficient
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let (x, a) = (ds.stage(1).unwrap().column(0)[i], ds.stage(1).unwrap().a()[i]);
            vec![1.0, x, a, a * x]
        })
        .collect();
    let x = DMatrix::from_fn(400, 4, |r, c| rows[r][c]);
    let y = ds.stage(1).unwrap().y();
    let theta = dtrwql::linmodel::wls_fit(&x, y, &[1.0; 400]).unwrap();
    let cov = dtrwql::linmodel::wls_sandwich(&x, y, &[1.0; 400], &theta).unwrap();
    let width = 2.0 * 1.959_964 * cov[(2, 2)].sqrt();
    assert!(((ci.hi - ci.lo) / width - 1.0).abs() < 0.1, "{} vs {width}", ci.hi - ci.lo);
    assert!(ci.lo <= ci.estimate && ci.estimate <= ci.hi);
}

#[test]
fn bootstrap_of_constant_statistic_has_zero_width() {
    // y is an exact linear function of the design
    let n = 60;
    let x: Vec<f64> = (0..n).map(|i| i as f64 / 10.0).collect();
    let a: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let y: Vec<f64> = (0..n).map(|i| 2.0 + x[i] + a[i] * 0.5).collect();
    let st = dtrwql::Stage::new(vec!["1".into()], vec![x], vec![vec![true; n]], a, y).unwrap();
    let ds = Dataset::new((0..n).map(|i| format!("p{i}")).collect(), vec![st]).unwrap();
    let specs = one_stage_spec();
    let t = Target::coefficient(&specs[0], Component::Blip, 0).unwrap();
    let b = bootstrap_ci(&ds, &specs, &MethodConfig::cc(), 50, n, &[t], &RngStream::new(1)).unwrap();
    assert!((b.params[0].hi - b.params[0].lo).abs() < 1e-9);
    assert!((b.params[0].lo - 0.5).abs() < 1e-9);
}

#[test]
fn select_alpha_single_grid_value_and_determinism() {
    let d = Design::Sim1;
    let real = sim(d, 150, 13);
    let specs = d.qspecs();
    let plan = BootPlan { alpha_grid: vec![1.0], b1: 4, b2: 10, ..BootPlan::default() };
    let t = Target::coefficient(&specs[0], Component::Blip, 0).unwrap();
    let a = select_alpha(&real.full, &specs, &MethodConfig::cc(), &plan, &t, &RngStream::new(5)).unwrap();
    let b = select_alpha(&real.full, &specs, &MethodConfig::cc(), &plan, &t, &RngStream::new(5)).unwrap();
    assert_eq!(a.alpha, 1.0);
    assert_eq!(a, b);
}

#[test]
fn sim1_generative_moments() {
    let real = sim(Design::Sim1, 20_000, 14);
    let (s1, s2) = (real.full.stage(1).unwrap(), real.full.stage(2).unwrap());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let x12 = s1.column(1);
    assert!((mean(x12) - 1.0).abs() < 0.02);
    let var = x12.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / x12.len() as f64;
    assert!((var - 1.0 / 3.0).abs() < 0.02);
    let (a, b) = (s1.column(0), s2.column(0));
    let (ma, mb) = (mean(a), mean(b));
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    let corr = cov / (mean(&a.iter().map(|x| (x - ma).powi(2)).collect::<Vec<_>>()).sqrt() * mean(&b.iter().map(|y| (y - mb).powi(2)).collect::<Vec<_>>()).sqrt());
    assert!((corr - 0.5).abs() < 0.03);
    let treat = real.optimal[0].iter().filter(|&&a| a == 1.0).count() as f64 / 20_000.0;
    assert!((treat - 0.5).abs() < 0.02);
}

#[test]
fn sim4_prefix_equals_sim1() {
    let s = RngStream::new(15);
    let one = generate(SimDesign { design: Design::Sim1, n: 300 }, &s).unwrap();
    let four = generate(SimDesign { design: Design::Sim4, n: 300 }, &s).unwrap();
    for t in 1..=2 {
        let (a, b) = (one.full.stage(t).unwrap(), four.full.stage(t).unwrap());
        for j in 0..2 {
            assert_eq!(a.column(j), b.column(j));
        }
        assert_eq!(a.a(), b.a());
        assert_eq!(a.y(), b.y());
        assert_eq!(one.r[t - 1], four.r[t - 1]);
    }
}

#[test]
fn generate_is_deterministic() {
    let a = sim(Design::Sim3, 200, 16);
    let b = sim(Design::Sim3, 200, 16);
    assert_eq!(dtrwql::io::headers(&a.masked), dtrwql::io::headers(&b.masked));
    let (mut x, mut y) = (Vec::new(), Vec::new());
    dtrwql::io::write_csv(&a.masked, &mut x).unwrap();
    dtrwql::io::write_csv(&b.masked, &mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn regime_values_match_closed_form() {
    let d = Design::Sim1;
    let best = evaluate_regime(d, &TrueRegime(d), 200_000, &RngStream::new(17)).unwrap();
    assert!((best.value - 3.0).abs() < 0.03, "value {}", best.value);
    // A1 = A2 = a with E[a] = 0: E[Y1] = 2E[a] + 1 = 1 and
    // E[Y2] = E[a(1 - a + X2_2)] - E[a] - 0.5 E[X2_2] = -1 - 0.5 = -1.5
    let coin = RegimeFn(|ds: &Dataset, _t: usize| -> dtrwql::Result<Vec<f64>> {
        Ok((0..ds.n()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect())
    });
    let flip = evaluate_regime(d, &coin, 200_000, &RngStream::new(17)).unwrap();
    assert!((flip.value + 0.5).abs() < 0.03, "value {}", flip.value);
}

#[test]
fn rollout_leaves_baseline_draws_alone() {
    let latent = draw_latent(Design::Sim1, 100, &RngStream::new(18));
    let a = realize(&latent, None).unwrap();
    let b = realize(&latent, Some(&TrueRegime(Design::Sim1))).unwrap();
    assert_eq!(a.full.stage(1).unwrap().column(0), b.full.stage(1).unwrap().column(0));
    assert!(b.full.stage(2).unwrap().a().iter().all(|&v| v == 1.0));
}
