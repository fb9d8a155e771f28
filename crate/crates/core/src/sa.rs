//! Sensitivity-analysis weights (WQ-SA) for a fixed tilt `γ′`, and the
//! simulation-based screen that calibrates plausible values of `γ′`.
//!
//! With no instrument available, `s′(h, a)` is profiled over the full stage
//! history `g = (h_t, a_t)` at a user-supplied `γ′`. Calibration compares the
//! observed pseudo-outcome estimates with replications simulated under each
//! candidate `γ′` and keeps the candidates whose median Wilcoxon p-value over
//! Monte Carlo replicates exceeds a threshold.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ee::{ipw_weights, PseudoSlice};
use crate::error::{Error, Result};
use crate::kernel::{Kde, KernelConfig, NadarayaWatson, Profiler, SHatTable};
use crate::linmodel::{wls_fit, QSpec, Var};
use crate::qlearn::{self, MethodConfig};
use crate::stats::{median, wilcoxon_rank_sum, RngStream};

/// Every variable of `(H_t, A_t)`: covariates of stages `1..=t`, treatments
/// `A_1..A_t` and outcomes `Y_1..Y_{t−1}`.
pub fn full_conditioning_set(ds: &Dataset, t: usize) -> Result<Vec<Var>> {
    ds.check_stage(t)?;
    let mut out = Vec::new();
    for s in 1..=t {
        for name in ds.stage(s)?.names() {
            out.push(Var::Covariate {
                stage: s,
                name: name.clone(),
            });
        }
        out.push(Var::Treatment(s));
        if s < t {
            out.push(Var::Outcome(s));
        }
    }
    Ok(out)
}

/// WQ-SA settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SAConfig {
    pub stage: usize,
    pub gamma_prime: f64,
    pub kernel: KernelConfig,
}

/// Response probabilities and weights under a fixed `γ′`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SAWeights {
    pub gamma_prime: f64,
    pub pi_hat: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub clipped: usize,
    pub capped: usize,
    pub bandwidths: Vec<f64>,
}

fn sa_profiler(ds: &Dataset, slice: &PseudoSlice, stage: usize, kernel: &KernelConfig) -> Result<Profiler> {
    let g = slice.columns(ds, &full_conditioning_set(ds, stage)?)?;
    let c = kernel.bandwidths_for(&g)?;
    Profiler::new(&g, &slice.y, &slice.r, &c)
}

/// `π̂` and IPW weights under `γ′`, conditioning on all of `(h_t, a_t)`.
pub fn weights_sa(ds: &Dataset, slice: &PseudoSlice, cfg: &SAConfig) -> Result<SAWeights> {
    if !cfg.gamma_prime.is_finite() {
        return Err(Error::InvalidArgument("gamma_prime must be finite".into()));
    }
    if slice.is_empty() {
        return Err(Error::Degenerate(format!("stage {}: no complete-history units", cfg.stage)));
    }
    let profiler = sa_profiler(ds, slice, cfg.stage, &cfg.kernel)?;
    let table = profiler.profile(cfg.gamma_prime)?;
    let (weights, pi_hat, clipped) = ipw_weights(slice, &table, cfg.kernel.weight_cap);
    Ok(SAWeights {
        gamma_prime: cfg.gamma_prime,
        pi_hat,
        weights,
        clipped,
        capped: table.capped,
        bandwidths: profiler.bandwidths.clone(),
    })
}

/// A distribution that can be sampled for proposals.
pub trait Proposal {
    fn draw(&self, rng: &mut dyn RngCore) -> f64;
}

impl Proposal for Kde {
    fn draw(&self, rng: &mut dyn RngCore) -> f64 {
        self.sample(rng)
    }
}

/// A finite distribution on `values` with the given masses.
#[derive(Debug, Clone)]
pub struct Discrete {
    values: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl Discrete {
    pub fn new(values: Vec<f64>, probs: &[f64]) -> Result<Self> {
        let index = WeightedIndex::new(probs).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Discrete { values, index })
    }
}

impl Proposal for Discrete {
    fn draw(&self, rng: &mut dyn RngCore) -> f64 {
        self.values[self.index.sample(rng)]
    }
}

/// A pool of proposal draws reweighted by `exp(γ′ ε)`.
///
/// Because `exp(γ′ (m + ε)) ∝ exp(γ′ ε)` for a fixed location `m`, one pool
/// serves every unit that shares the residual law.
pub struct TiltedPool {
    draws: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl TiltedPool {
    pub fn new(proposal: &dyn Proposal, gamma_prime: f64, size: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let draws: Vec<f64> = (0..size.max(1)).map(|_| proposal.draw(rng)).collect();
        let logw: Vec<f64> = draws.iter().map(|e| gamma_prime * e).collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let index = WeightedIndex::new(&w).map_err(|_| {
            Error::Degenerate(format!(
                "importance weights degenerate at gamma' = {gamma_prime}; review gamma' or the outcome scale"
            ))
        })?;
        Ok(TiltedPool { draws, index })
    }

    pub fn draw(&self, rng: &mut dyn RngCore) -> f64 {
        self.draws[self.index.sample(rng)]
    }
}

/// Sampling–importance–resampling from `p(y) ∝ exp(γ′ y) q(y − mean)`, where
/// `q` is the proposal law of residuals. The pool holds `max(1000, 50·count)`
/// proposals.
pub fn tilt_sample(
    mean: f64,
    proposal: &dyn Proposal,
    gamma_prime: f64,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let pool = TiltedPool::new(proposal, gamma_prime, pool_size(count), rng)?;
    Ok((0..count).map(|_| mean + pool.draw(rng)).collect())
}

fn pool_size(count: usize) -> usize {
    1000usize.max(50 * count)
}

/// Calibration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub grid: Vec<f64>,
    pub mcr: usize,
    pub threshold: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            grid: (0..8).map(f64::from).collect(),
            mcr: 1000,
            threshold: 0.05,
        }
    }
}

/// Median Wilcoxon p-values per candidate `γ′`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub stage: usize,
    pub grid: Vec<f64>,
    pub median_p: Vec<f64>,
    pub plausible: Vec<bool>,
    pub mcr: usize,
    pub threshold: f64,
    /// Smallest interval containing the plausible set.
    pub hull: Option<(f64, f64)>,
    /// The plausible set skips grid points inside its hull.
    pub non_convex: bool,
}

impl CalibrationResult {
    fn new(stage: usize, grid: Vec<f64>, median_p: Vec<f64>, mcr: usize, threshold: f64) -> Self {
        let plausible: Vec<bool> = median_p.iter().map(|&p| p > threshold).collect();
        let members: Vec<f64> = grid.iter().zip(&plausible).filter(|(_, &k)| k).map(|(g, _)| *g).collect();
        let hull = if members.is_empty() {
            None
        } else {
            let lo = members.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some((lo, hi))
        };
        let non_convex = match hull {
            Some((lo, hi)) => grid
                .iter()
                .zip(&plausible)
                .any(|(&g, &k)| !k && g >= lo && g <= hi),
            None => false,
        };
        CalibrationResult {
            stage,
            grid,
            median_p,
            plausible,
            mcr,
            threshold,
            hull,
            non_convex,
        }
    }

    /// Median p-value at a grid value, if present.
    pub fn median_at(&self, gamma_prime: f64) -> Option<f64> {
        self.grid
            .iter()
            .position(|&g| g == gamma_prime)
            .map(|k| self.median_p[k])
    }

    pub fn is_plausible(&self, gamma_prime: f64) -> bool {
        self.grid
            .iter()
            .position(|&g| g == gamma_prime)
            .is_some_and(|k| self.plausible[k])
    }

    /// `gamma_prime, median_p, plausible` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["gamma_prime", "median_p", "plausible"])?;
        for k in 0..self.grid.len() {
            wr.write_record([
                self.grid[k].to_string(),
                format!("{:.6}", self.median_p[k]),
                self.plausible[k].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Calibrate `γ′` on a stage slice whose observed pseudo-outcomes are given.
/// `qspec` is the assumed stage-`t` Q-function used in the refit step.
pub fn calibrate_slice(
    ds: &Dataset,
    slice: &PseudoSlice,
    qspec: &QSpec,
    cal: &CalibrationConfig,
    kernel: &KernelConfig,
    stream: &RngStream,
) -> Result<CalibrationResult> {
    let t = qspec.stage;
    if cal.grid.is_empty() {
        return Err(Error::InvalidArgument("calibration grid is empty".into()));
    }
    let obs: Vec<usize> = (0..slice.len()).filter(|&k| slice.r[k]).collect();
    let mis: Vec<usize> = (0..slice.len()).filter(|&k| !slice.r[k]).collect();
    if obs.len() < 3 {
        return Err(Error::Degenerate(format!(
            "stage {t}: {} respondents is too few for kernel estimates",
            obs.len()
        )));
    }
    let y_obs: Vec<f64> = obs.iter().map(|&k| slice.y[k]).collect();

    // step (2): respondent conditional mean and residual density
    let g = slice.columns(ds, &full_conditioning_set(ds, t)?)?;
    let g_obs: Vec<Vec<f64>> = g.iter().map(|c| obs.iter().map(|&k| c[k]).collect()).collect();
    let nw = NadarayaWatson::fit(&g_obs, &y_obs)?;
    let row = |k: usize| -> Vec<f64> { g.iter().map(|c| c[k]).collect() };
    let resid: Vec<f64> = obs.iter().zip(&y_obs).map(|(&k, y)| y - nw.predict(&row(k))).collect();
    let resid_kde = Kde::fit(&resid)?;
    let m_mis: Vec<f64> = mis.iter().map(|&k| nw.predict(&row(k))).collect();

    // Q-function design over the slice, for the step (4) refit
    let bound = qspec.bind(ds)?;
    let design: Vec<Vec<f64>> = slice
        .rows
        .iter()
        .map(|&i| {
            let a = ds.stages()[t - 1].a()[i];
            bound.design_row(ds, i, a).ok_or_else(|| Error::MissingFeature {
                row: i,
                column: bound.first_missing(ds, i).unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    let d = design[0].len();
    let x = nalgebra::DMatrix::from_fn(design.len(), d, |r, c| design[r][c]);
    let ones = vec![1.0; design.len()];

    let profiler = Profiler::new(&g, &slice.y, &slice.r, &kernel.bandwidths_for(&g)?)?;

    let mut median_p = Vec::with_capacity(cal.grid.len());
    for (gi, &gp) in cal.grid.iter().enumerate() {
        // step (1)
        let table: SHatTable = profiler.profile(gp)?;
        let gstream = stream.child("gamma", gi as u64);
        let pvals: Vec<f64> = (0..cal.mcr)
            .into_par_iter()
            .map(|rep| -> Result<f64> {
                let mut rng = gstream.child("mcr", rep as u64).rng();
                // step (3): impute the missing pseudo-outcomes from the tilted law
                let mut y_star = slice.y.clone();
                if !mis.is_empty() {
                    let pool = TiltedPool::new(&resid_kde, gp, pool_size(mis.len()), &mut rng)?;
                    for (&k, m) in mis.iter().zip(&m_mis) {
                        y_star[k] = m + pool.draw(&mut rng);
                    }
                }
                // step (4): refit the assumed Q-function and its residual density
                let theta = wls_fit(&x, &y_star, &ones)?;
                let fitted: Vec<f64> = design
                    .iter()
                    .map(|r| r.iter().zip(&theta).map(|(a, b)| a * b).sum())
                    .collect();
                let res: Vec<f64> = y_star.iter().zip(&fitted).map(|(y, f)| y - f).collect();
                let kde = Kde::fit(&res)?;
                // step (5): replicate, then thin by the response model
                let mut rep_obs = Vec::with_capacity(slice.len());
                for (k, f) in fitted.iter().enumerate() {
                    let y2 = f + kde.sample(&mut rng);
                    let pi = table.pi(k, y2);
                    if rng.random::<f64>() < pi {
                        rep_obs.push(y2);
                    }
                }
                // step (6)
                Ok(wilcoxon_rank_sum(&rep_obs, &y_obs))
            })
            .collect::<Result<_>>()?;
        // step (7)
        median_p.push(median(&pvals));
    }
    Ok(CalibrationResult::new(t, cal.grid.clone(), median_p, cal.mcr, cal.threshold))
}

/// Calibrate `γ′_t` from raw data: fit stages after `t` with `later`, form the
/// observed pseudo-outcome estimates, and screen the grid.
pub fn calibrate_gamma(
    ds: &Dataset,
    qspecs: &[QSpec],
    stage: usize,
    later: &MethodConfig,
    cal: &CalibrationConfig,
    stream: &RngStream,
) -> Result<CalibrationResult> {
    let slice = qlearn::pseudo_slice(ds, qspecs, later, stage, stream)?;
    let qspec = qspecs
        .iter()
        .find(|q| q.stage == stage)
        .ok_or_else(|| Error::Config(format!("no Q-function spec for stage {stage}")))?;
    calibrate_slice(ds, &slice, qspec, cal, &later.kernel, &stream.child("calibrate", stage as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_tilt_ratio() {
        let q = Discrete::new(vec![0.0, 1.0], &[0.5, 0.5]).unwrap();
        let mut rng = RngStream::new(1).rng();
        let s = tilt_sample(0.0, &q, 2f64.ln(), 20_000, &mut rng).unwrap();
        let ones = s.iter().filter(|&&v| v == 1.0).count() as f64;
        let ratio = ones / (s.len() as f64 - ones);
        assert!((ratio - 2.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn zero_tilt_keeps_proposal() {
        let q = Discrete::new(vec![-1.0, 0.0, 3.0], &[0.2, 0.5, 0.3]).unwrap();
        let mut rng = RngStream::new(2).rng();
        let s = tilt_sample(0.0, &q, 0.0, 50_000, &mut rng).unwrap();
        let p3 = s.iter().filter(|&&v| v == 3.0).count() as f64 / s.len() as f64;
        assert!((p3 - 0.3).abs() < 0.02);
    }

    #[test]
    fn hull_and_convexity() {
        let r = CalibrationResult::new(1, vec![0.0, 1.0, 2.0, 3.0], vec![0.2, 0.01, 0.3, 0.02], 10, 0.05);
        assert_eq!(r.plausible, vec![true, false, true, false]);
        assert_eq!(r.hull, Some((0.0, 2.0)));
        assert!(r.non_convex);
        let r = CalibrationResult::new(1, vec![0.0, 1.0], vec![0.01, 0.02], 10, 0.05);
        assert_eq!(r.hull, None);
        assert!(!r.non_convex);
    }
}
