//! Bootstrap inference for the blip parameters.
//!
//! The stage-1 estimator is non-regular when the stage-2 blip is near zero
//! for a positive share of patients, so stage-1 intervals use an
//! `m`-out-of-`n` bootstrap with `m` driven by the estimated share
//! `p̂_nonregu`. The resampling exponent `α` is chosen by a double bootstrap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linmodel::{wls_fit, wls_sandwich, Component, QSpec};
use crate::qlearn::{fit_dtr, stage_regression, DtrFit, MethodConfig};
use crate::stats::{chi2_quantile, quantile_sorted, sd, RngStream};

/// A linear functional `cᵀθ_t` of the stacked stage-`t` coefficients
/// `θ_t = (β_t, ψ_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub stage: usize,
    pub c: Vec<f64>,
}

impl Target {
    /// A single coefficient of a stage's Q-function.
    pub fn coefficient(qspec: &QSpec, component: Component, index: usize) -> Result<Target> {
        let (d0, d1) = (qspec.d0(), qspec.d1());
        let (pos, term, prefix) = match component {
            Component::TreatmentFree if index < d0 => (index, &qspec.treatment_free[index], "beta"),
            Component::Blip if index < d1 => (d0 + index, &qspec.blip[index], "psi"),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "coefficient {index} out of range for stage {}",
                    qspec.stage
                )))
            }
        };
        let mut c = vec![0.0; d0 + d1];
        c[pos] = 1.0;
        Ok(Target {
            name: format!("{prefix}{}[{term}]", qspec.stage),
            stage: qspec.stage,
            c,
        })
    }

    /// Every blip coefficient of every stage.
    pub fn all_blips(qspecs: &[QSpec]) -> Vec<Target> {
        let mut v = Vec::new();
        for q in qspecs {
            for j in 0..q.d1() {
                v.push(Target::coefficient(q, Component::Blip, j).expect("index in range"));
            }
        }
        v.sort_by_key(|t| t.stage);
        v
    }

    pub fn evaluate(&self, fit: &DtrFit) -> Result<f64> {
        let th = fit.theta(self.stage)?.stacked();
        if th.len() != self.c.len() {
            return Err(Error::InvalidArgument(format!(
                "target `{}` has {} weights but stage {} has {} coefficients",
                self.name,
                self.c.len(),
                self.stage,
                th.len()
            )));
        }
        Ok(self.c.iter().zip(&th).map(|(a, b)| a * b).sum())
    }
}

/// Settings of the bootstrap procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootPlan {
    /// Replications for the final intervals.
    pub b: usize,
    pub alpha_grid: Vec<f64>,
    pub b1: usize,
    pub b2: usize,
    pub nu: f64,
    pub level: f64,
    /// Skip the double bootstrap and use this `α`.
    pub fixed_alpha: Option<f64>,
    /// Use the complete-case subsample size instead of `n` in `m`.
    pub m_from_complete: bool,
}

impl Default for BootPlan {
    fn default() -> Self {
        BootPlan {
            b: 500,
            alpha_grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
            b1: 200,
            b2: 200,
            nu: 0.001,
            level: 0.95,
            fixed_alpha: None,
            m_from_complete: false,
        }
    }
}

impl BootPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.b < 2 || self.b1 < 1 || self.b2 < 2 {
            return bad("bootstrap needs b >= 2, b1 >= 1 and b2 >= 2");
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return bad("nu must lie in (0,1)");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0,1)");
        }
        if self.alpha_grid.is_empty()
            || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a))
            || self.alpha_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("alpha_grid must be nonempty, strictly ascending and inside [0,1]");
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad("fixed_alpha must lie in [0,1]");
            }
        }
        Ok(())
    }
}

/// Share of rows whose squared stage blip lies inside its `1 − ν` noise band:
/// the mean of `𝕀[n q² ≤ hΣhᵀ χ²₁,₁₋ν]` over the rows of `h`.
///
/// `blips` holds `q_{2,1}(h; ψ̂)` per row, `h` the blip features per row and
/// `sigma` the plug-in `n Cov(ψ̂)`.
pub fn p_nonregu(n: usize, blips: &[f64], h: &[Vec<f64>], sigma: &nalgebra::DMatrix<f64>, nu: f64) -> Result<f64> {
    if blips.is_empty() {
        return Err(Error::InvalidArgument("p_nonregu: no rows".into()));
    }
    let crit = chi2_quantile(1.0 - nu, 1)?;
    let inside = blips
        .iter()
        .zip(h)
        .filter(|(q, hr)| {
            let v = nalgebra::DVector::from_column_slice(hr);
            let quad = (v.transpose() * sigma * &v)[(0, 0)];
            n as f64 * q.powi(2) <= quad * crit
        })
        .count();
    Ok(inside as f64 / blips.len() as f64)
}

/// `p̂_nonregu` of the stage-2 fit, with `Σ̂` the HC0 sandwich of the stage-2
/// regression scaled by the number of rows entering it.
pub fn p_nonregu_hat(ds: &Dataset, qspecs: &[QSpec], cfg: &MethodConfig, nu: f64) -> Result<f64> {
    if ds.n_stages() < 2 {
        return Err(Error::InvalidArgument("non-regularity needs at least two stages".into()));
    }
    let (design, _) = stage_regression(ds, qspecs, cfg, 2)?;
    let theta = wls_fit(&design.x, &design.y, &design.w)?;
    let cov = wls_sandwich(&design.x, &design.y, &design.w, &theta)?;
    let d0 = design.d0;
    let d1 = theta.len() - d0;
    let n = design.y.len();
    let sigma = cov.view((d0, d0), (d1, d1)).into_owned() * n as f64;
    let psi = &theta[d0..];
    let mut blips = Vec::with_capacity(n);
    let mut hs = Vec::with_capacity(n);
    let a2 = ds.stage(2)?.a();
    for (r, &i) in design.rows.iter().enumerate() {
        // design stores a·φ1 and a = ±1
        let h: Vec<f64> = (0..d1).map(|k| design.x[(r, d0 + k)] * a2[i]).collect();
        blips.push(h.iter().zip(psi).map(|(x, p)| x * p).sum());
        hs.push(h);
    }
    p_nonregu(n, &blips, &hs, &sigma, nu)
}

/// Resample size `⌈n^{(1+α(1−p̂))/(1+α)}⌉`, clamped to `[1, n]`.
pub fn m_from_alpha(n: usize, alpha: f64, p_hat: f64) -> usize {
    let e = (1.0 + alpha * (1.0 - p_hat)) / (1.0 + alpha);
    let v = (n as f64).powf(e);
    // n^1 computed through powf can land a hair above n
    let r = v.round();
    let m = if (v - r).abs() <= 1e-9 * v.max(1.0) { r } else { v.ceil() };
    (m as usize).clamp(1, n.max(1))
}

/// Percentile interval of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCi {
    pub name: String,
    pub stage: usize,
    pub estimate: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootResult {
    pub params: Vec<ParamCi>,
    pub failures: usize,
    /// Replicate estimates, one vector per target.
    pub replicates: Option<Vec<Vec<f64>>>,
}

impl BootResult {
    pub fn get(&self, name: &str) -> Option<&ParamCi> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["parameter", "estimate", "sd", "lo", "hi", "m", "B"])?;
        for p in &self.params {
            wr.write_record([
                p.name.clone(),
                format!("{:.10}", p.estimate),
                format!("{:.10}", p.sd),
                format!("{:.10}", p.lo),
                format!("{:.10}", p.hi),
                p.m.to_string(),
                p.b.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn resample(n: usize, m: usize, stream: &RngStream) -> Vec<usize> {
    let mut rng = stream.rng();
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

/// `b` replicate values of every target at resample size `m`; `None` marks a
/// failed replicate.
fn replicate(
    ds: &Dataset,
    qspecs: &[QSpec],
    cfg: &MethodConfig,
    b: usize,
    m: usize,
    targets: &[Target],
    stream: &RngStream,
) -> Vec<Option<Vec<f64>>> {
    (0..b)
        .into_par_iter()
        .map(|k| {
            let s = stream.child("resample", k as u64);
            let rows = resample(ds.n(), m, &s);
            let bs = ds.select_rows(&rows);
            let fit = fit_dtr(&bs, qspecs, cfg, &s.child("fit", 0)).ok()?;
            targets.iter().map(|t| t.evaluate(&fit).ok()).collect()
        })
        .collect()
}

fn percentile_ci(values: &mut [f64], level: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(values, tail), quantile_sorted(values, 1.0 - tail))
}

/// Percentile bootstrap intervals resampling whole patients.
///
/// Targets at the final stage use `n`-out-of-`n` resamples; the others use
/// `m`-out-of-`n`. The full pipeline, missingness models included, is refit
/// on every resample. More than 20% failed replicates abort.
pub fn bootstrap_ci(
    ds: &Dataset,
    qspecs: &[QSpec],
    cfg: &MethodConfig,
    b: usize,
    m: usize,
    targets: &[Target],
    stream: &RngStream,
) -> Result<BootResult> {
    let n = ds.n();
    if b < 2 || m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("bootstrap needs b >= 2 and 1 <= m <= n, got b={b}, m={m}, n={n}")));
    }
    let fit = fit_dtr(ds, qspecs, cfg, &stream.child("original", 0))?;
    let estimates: Vec<f64> = targets.iter().map(|t| t.evaluate(&fit)).collect::<Result<_>>()?;
    let big_t = ds.n_stages();
    let size_of = |t: &Target| if t.stage == big_t { n } else { m };
    let mut sizes: Vec<usize> = targets.iter().map(size_of).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let mut reps: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    let mut failures = 0;
    for &size in &sizes {
        let idx: Vec<usize> = (0..targets.len()).filter(|&k| size_of(&targets[k]) == size).collect();
        let sub: Vec<Target> = idx.iter().map(|&k| targets[k].clone()).collect();
        let out = replicate(ds, qspecs, cfg, b, size, &sub, &stream.child("size", size as u64));
        let failed = out.iter().filter(|r| r.is_none()).count();
        if failed * 5 > b {
            return Err(Error::BootstrapFailures { failed, total: b });
        }
        failures += failed;
        for r in out.into_iter().flatten() {
            for (j, &k) in idx.iter().enumerate() {
                reps[k].push(r[j]);
            }
        }
    }

    let params = targets
        .iter()
        .zip(&estimates)
        .zip(reps.iter())
        .map(|((t, &est), r)| {
            let mut v = r.clone();
            let (lo, hi) = percentile_ci(&mut v, 0.95);
            ParamCi {
                name: t.name.clone(),
                stage: t.stage,
                estimate: est,
                sd: sd(r),
                lo,
                hi,
                m: size_of(t),
                b: r.len(),
            }
        })
        .collect();
    Ok(BootResult {
        params,
        failures,
        replicates: Some(reps),
    })
}

/// Outcome of the double bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    /// `(α, estimated coverage)` for every grid value tried.
    pub coverage: Vec<(f64, f64)>,
    /// First-level resamples dropped because their fit failed.
    pub dropped: usize,
}

/// Double-bootstrap choice of `α` for a stage-1 contrast.
///
/// First-level `n`-out-of-`n` resamples and their `p̂_nonregu` are drawn once
/// and reused across the grid. For each `α` in ascending order, every
/// first-level resample spawns `b2` nested `m̂`-out-of-`n` resamples whose
/// percentile interval is checked against the original estimate. The first
/// `α` reaching the nominal coverage is returned, else the largest.
pub fn select_alpha(ds: &Dataset, qspecs: &[QSpec], cfg: &MethodConfig, plan: &BootPlan, target: &Target, stream: &RngStream) -> Result<AlphaSelection> {
    plan.validate()?;
    let n = ds.n();
    let fit = fit_dtr(ds, qspecs, cfg, &stream.child("original", 0))?;
    let original = target.evaluate(&fit)?;

    struct First {
        data: Dataset,
        p_hat: f64,
        n_eff: usize,
    }
    let firsts: Vec<Option<First>> = (0..plan.b1)
        .into_par_iter()
        .map(|k| {
            let s = stream.child("first", k as u64);
            let data = ds.select_rows(&resample(n, n, &s));
            let p_hat = p_nonregu_hat(&data, qspecs, cfg, plan.nu).ok()?;
            let n_eff = if plan.m_from_complete { data.complete_upto(2).ok()?.count() } else { n };
            Some(First { data, p_hat, n_eff })
        })
        .collect();
    let dropped = firsts.iter().filter(|f| f.is_none()).count();
    let firsts: Vec<(usize, First)> = firsts.into_iter().enumerate().filter_map(|(k, f)| f.map(|f| (k, f))).collect();
    if firsts.is_empty() {
        return Err(Error::BootstrapFailures { failed: dropped, total: plan.b1 });
    }

    let mut coverage = Vec::new();
    for (ai, &alpha) in plan.alpha_grid.iter().enumerate() {
        let covered: Vec<Option<bool>> = firsts
            .par_iter()
            .map(|(k, f)| {
                let m = m_from_alpha(f.n_eff, alpha, f.p_hat).min(n);
                let s = stream.child("alpha", ai as u64).child("first", *k as u64);
                let vals: Vec<f64> = replicate(&f.data, qspecs, cfg, plan.b2, m, std::slice::from_ref(target), &s)
                    .into_iter()
                    .flatten()
                    .map(|r| r[0])
                    .collect();
                if vals.len() < 2 {
                    return None;
                }
                let mut v = vals;
                let (lo, hi) = percentile_ci(&mut v, plan.level);
                Some(lo <= original && original <= hi)
            })
            .collect();
        let valid: Vec<bool> = covered.into_iter().flatten().collect();
        let rate = if valid.is_empty() {
            0.0
        } else {
            valid.iter().filter(|&&c| c).count() as f64 / valid.len() as f64
        };
        coverage.push((alpha, rate));
        if rate >= plan.level {
            return Ok(AlphaSelection { alpha, coverage, dropped });
        }
    }
    let alpha = *plan.alpha_grid.last().expect("grid nonempty");
    Ok(AlphaSelection { alpha, coverage, dropped })
}
