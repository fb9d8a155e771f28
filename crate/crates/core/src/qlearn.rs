//! Backward-induction Q-learning with missing covariates.
//!
//! Stage `T` is fit by least squares on the complete-history units. For each
//! earlier stage the pseudo-outcome `Ŷ_pse,t = max_a Q̂_{t+1}` is formed
//! wherever the stage-`(t+1)` features are observed, and the stage-`t` model is
//! fit by weighted least squares. Methods differ only in how the stage-`t`
//! weights (or the data) are prepared:
//!
//! | method  | stage-`t` data and weights                                   |
//! |---------|--------------------------------------------------------------|
//! | `all`   | fully observed data, weight 1                                 |
//! | `naive` | terms reading partially observed covariates dropped           |
//! | `cc`    | `𝕀(R̄_T = 1)`: only patients with no missing covariate         |
//! | `mi`    | predictive-mean-matching imputations, coefficients averaged   |
//! | `wq_ee` | `r̂_pse 𝕀(R̄_t = 1) / π̂` with `γ̂_t` from instrument moments    |
//! | `wq_sa` | `r̂_pse 𝕀(R̄_t = 1) / π̂` at a fixed sensitivity value `γ′_t`  |

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ee::{cc_weights, fit_gamma_ee, GammaSearch, InstrumentSpec, PseudoSlice};
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::linmodel::{action_from_blip, wls_fit, BoundSpec, QSpec, Term, ThetaHat, Var};
use crate::sa::{weights_sa, SAConfig};
use crate::stats::RngStream;

/// Estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    All,
    Naive,
    Cc,
    Mi,
    WqEe,
    WqSa,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::All,
        Method::Naive,
        Method::Cc,
        Method::Mi,
        Method::WqEe,
        Method::WqSa,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::All => "all",
            Method::Naive => "naive",
            Method::Cc => "cc",
            Method::Mi => "mi",
            Method::WqEe => "wq_ee",
            Method::WqSa => "wq_sa",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which columns predict a missing covariate in the imputation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiPredictors {
    /// Every other covariate, treatment and outcome.
    #[default]
    All,
    /// Every other covariate only.
    Covariates,
}

/// Multiple-imputation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub m: usize,
    pub k: usize,
    pub cycles: usize,
    pub predictors: MiPredictors,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            m: 25,
            k: 5,
            cycles: 10,
            predictors: MiPredictors::All,
        }
    }
}

/// Method plus the parameters it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Per-stage instruments (`wq_ee`).
    #[serde(default)]
    pub instruments: Vec<InstrumentSpec>,
    /// Per-stage sensitivity values `γ′_t` (`wq_sa`).
    #[serde(default)]
    pub gamma_prime: BTreeMap<usize, f64>,
    #[serde(default)]
    pub mi: MiConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub search: GammaSearch,
}

impl MethodConfig {
    fn plain(method: Method) -> Self {
        MethodConfig {
            method,
            instruments: Vec::new(),
            gamma_prime: BTreeMap::new(),
            mi: MiConfig::default(),
            kernel: KernelConfig::default(),
            search: GammaSearch::default(),
        }
    }

    pub fn all() -> Self {
        Self::plain(Method::All)
    }

    pub fn naive() -> Self {
        Self::plain(Method::Naive)
    }

    pub fn cc() -> Self {
        Self::plain(Method::Cc)
    }

    pub fn mi(mi: MiConfig) -> Self {
        MethodConfig { mi, ..Self::plain(Method::Mi) }
    }

    pub fn wq_ee(instruments: Vec<InstrumentSpec>) -> Self {
        MethodConfig {
            instruments,
            ..Self::plain(Method::WqEe)
        }
    }

    pub fn wq_sa(gamma_prime: impl IntoIterator<Item = (usize, f64)>) -> Self {
        MethodConfig {
            gamma_prime: gamma_prime.into_iter().collect(),
            ..Self::plain(Method::WqSa)
        }
    }

    pub fn with_kernel(mut self, kernel: KernelConfig) -> Self {
        self.kernel = kernel;
        self
    }

    /// Check that the method-specific parameters are present and no others.
    pub fn validate(&self, n_stages: usize) -> Result<()> {
        let m = self.method;
        if m != Method::WqEe && !self.instruments.is_empty() {
            return Err(Error::Config(format!("`instruments` given for method `{m}`")));
        }
        if m != Method::WqSa && !self.gamma_prime.is_empty() {
            return Err(Error::Config(format!("`gamma_prime` given for method `{m}`")));
        }
        match m {
            Method::WqEe if n_stages > 1 && self.instruments.is_empty() => {
                Err(Error::Config("method `wq_ee` needs instruments for the earlier stages".into()))
            }
            Method::WqSa if n_stages > 1 && self.gamma_prime.is_empty() => {
                Err(Error::Config("method `wq_sa` needs `gamma_prime` for the earlier stages".into()))
            }
            Method::Mi if self.mi.m == 0 || self.mi.k == 0 => {
                Err(Error::Config("multiple imputation needs m >= 1 and k >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// How the stage weights were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissSummary {
    /// Final stage, or no missingness model needed.
    Unweighted,
    CompleteCase,
    Ee {
        gamma_hat: f64,
        first_step_gamma: f64,
        clipped: usize,
        capped: usize,
        pseudo_inverse: bool,
        all_respond: bool,
    },
    Sa {
        gamma_prime: f64,
        clipped: usize,
        capped: usize,
    },
    /// The missingness model failed; complete-case weights were used.
    Fallback { reason: String },
    Imputed { m: usize },
}

/// One fitted stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    pub stage: usize,
    pub qspec: QSpec,
    pub theta: ThetaHat,
    /// Units with `R̄_t = 1`.
    pub n_complete: usize,
    /// Units entering the regression with positive weight.
    pub n_used: usize,
    pub weight_sum: f64,
    pub missingness: MissSummary,
}

/// A fitted regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtrFit {
    pub method: Method,
    /// Stages in order `1..=T`.
    pub stages: Vec<StageFit>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl DtrFit {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, t: usize) -> Result<&StageFit> {
        self.stages
            .get(t.wrapping_sub(1))
            .ok_or(Error::StageOutOfRange { stage: t, stages: self.stages.len() })
    }

    pub fn theta(&self, t: usize) -> Result<&ThetaHat> {
        Ok(&self.stage(t)?.theta)
    }

    /// Recommended action for row `i` of `ds` at stage `t`.
    pub fn recommend(&self, ds: &Dataset, i: usize, t: usize) -> Result<f64> {
        let st = self.stage(t)?;
        let bound = st.qspec.bind(ds)?;
        recommend_bound(&bound, &st.theta, ds, i)
    }

    /// Recommended actions for every row at stage `t`.
    pub fn recommend_all(&self, ds: &Dataset, t: usize) -> Result<Vec<f64>> {
        let st = self.stage(t)?;
        let bound = st.qspec.bind(ds)?;
        (0..ds.n()).map(|i| recommend_bound(&bound, &st.theta, ds, i)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }

    /// `stage, component, term, estimate` rows.
    pub fn write_coefficients<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "stage", "component", "term", "estimate"])?;
        for st in &self.stages {
            let rows = st
                .qspec
                .treatment_free
                .iter()
                .zip(&st.theta.beta)
                .map(|(t, v)| ("treatment_free", t, v))
                .chain(st.qspec.blip.iter().zip(&st.theta.psi).map(|(t, v)| ("blip", t, v)));
            for (comp, term, v) in rows {
                wr.write_record([
                    self.method.tag().to_string(),
                    st.stage.to_string(),
                    comp.to_string(),
                    term.to_string(),
                    format!("{v:.10}"),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn recommend_bound(bound: &BoundSpec, theta: &ThetaHat, ds: &Dataset, i: usize) -> Result<f64> {
    bound
        .blip_value(ds, i, theta)
        .map(action_from_blip)
        .ok_or_else(|| Error::MissingFeature {
            row: i,
            column: bound.first_missing(ds, i).unwrap_or_default(),
        })
}

/// `recommend` as a free function.
pub fn recommend(fit: &DtrFit, ds: &Dataset, i: usize, t: usize) -> Result<f64> {
    fit.recommend(ds, i, t)
}

fn specs_by_stage(qspecs: &[QSpec], n_stages: usize) -> Result<Vec<QSpec>> {
    (1..=n_stages)
        .map(|t| {
            let found: Vec<&QSpec> = qspecs.iter().filter(|q| q.stage == t).collect();
            match found.as_slice() {
                [q] => Ok((*q).clone()),
                [] => Err(Error::Config(format!("no Q-function spec for stage {t}"))),
                _ => Err(Error::Config(format!("more than one Q-function spec for stage {t}"))),
            }
        })
        .collect()
}

/// Per-patient pseudo-outcome `max_a Q̂_{t+1}` (`None` when a stage-`(t+1)`
/// feature is missing).
pub fn pseudo_outcomes(ds: &Dataset, next: &StageFit) -> Result<Vec<Option<f64>>> {
    let bound = next.qspec.bind(ds)?;
    Ok((0..ds.n())
        .map(|i| {
            let q0 = bound.tf_value(ds, i, &next.theta)?;
            let q1 = bound.blip_value(ds, i, &next.theta)?;
            Some(q0 + q1.abs())
        })
        .collect())
}

/// Rows entering a stage regression: positive weight, observed response and
/// observed features.
#[derive(Debug, Clone)]
pub struct StageDesign {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    /// Dataset row of each design row.
    pub rows: Vec<usize>,
    pub d0: usize,
}

pub fn stage_design(ds: &Dataset, qspec: &QSpec, y: &[Option<f64>], w: &[f64]) -> Result<StageDesign> {
    let bound = qspec.bind(ds)?;
    let a = ds.stage(qspec.stage)?.a();
    let d = bound.d0() + bound.d1();
    let mut design = Vec::new();
    let mut out = StageDesign {
        x: DMatrix::zeros(0, d),
        y: Vec::new(),
        w: Vec::new(),
        rows: Vec::new(),
        d0: bound.d0(),
    };
    for i in 0..ds.n() {
        if w[i] <= 0.0 {
            continue;
        }
        let Some(yi) = y[i] else { continue };
        let Some(r) = bound.design_row(ds, i, a[i]) else { continue };
        design.push(r);
        out.y.push(yi);
        out.w.push(w[i]);
        out.rows.push(i);
    }
    out.x = DMatrix::from_fn(design.len(), d, |r, c| design[r][c]);
    Ok(out)
}

/// Weighted fit of one stage's Q-function on the rows with positive weight.
pub fn fit_stage(ds: &Dataset, qspec: &QSpec, y: &[Option<f64>], w: &[f64]) -> Result<(ThetaHat, usize, f64)> {
    let sd = stage_design(ds, qspec, y, w)?;
    let theta = wls_fit(&sd.x, &sd.y, &sd.w)?;
    let sum = sd.w.iter().sum();
    Ok((ThetaHat::from_stacked(qspec.stage, sd.d0, &theta), sd.rows.len(), sum))
}

/// The regression that `fit_dtr` solves at stage `t`. Methods that do not
/// reweight (`mi`) use the complete-case regression; `naive` uses its
/// reduced data and specs.
pub fn stage_regression(ds: &Dataset, qspecs: &[QSpec], cfg: &MethodConfig, t: usize) -> Result<(StageDesign, QSpec)> {
    ds.check_stage(t)?;
    let specs = specs_by_stage(qspecs, ds.n_stages())?;
    let (ds, specs, cfg) = match cfg.method {
        Method::Naive => {
            let (r, s) = naive_reduction(ds, &specs)?;
            (std::borrow::Cow::Owned(r), s, cfg.clone())
        }
        Method::Mi => (std::borrow::Cow::Borrowed(ds), specs, MethodConfig::cc()),
        _ => (std::borrow::Cow::Borrowed(ds), specs, cfg.clone()),
    };
    let ds = ds.as_ref();
    let mask = ds.complete_upto(t)?;
    let (y, w) = if t == ds.n_stages() {
        let y: Vec<Option<f64>> = (0..ds.n()).map(|i| Some(ds.final_outcome(i))).collect();
        (y, mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
    } else {
        let fits = backward(ds, &specs, &cfg, t + 1, &mut Vec::new())?;
        let y_pse = pseudo_outcomes(ds, &fits[0])?;
        let y: Vec<Option<f64>> = y_pse.iter().zip(&mask.mask).map(|(y, &m)| if m { *y } else { None }).collect();
        let slice = PseudoSlice::new(&mask.mask, &y);
        let sw = stage_weights(ds, t, &slice, &cfg)?;
        (y, sw.w)
    };
    let qspec = specs[t - 1].clone();
    Ok((stage_design(ds, &qspec, &y, &w)?, qspec))
}

struct StageWeights {
    w: Vec<f64>,
    summary: MissSummary,
    warning: Option<String>,
}

fn stage_weights(ds: &Dataset, t: usize, slice: &PseudoSlice, cfg: &MethodConfig) -> Result<StageWeights> {
    let cc = |summary| StageWeights {
        w: cc_weights(slice),
        summary,
        warning: None,
    };
    match cfg.method {
        Method::All | Method::Naive | Method::Mi => Ok(cc(MissSummary::Unweighted)),
        Method::Cc => {
            let full = ds.complete_upto(ds.n_stages())?;
            let w = cc_weights(slice)
                .into_iter()
                .zip(&full.mask)
                .map(|(w, &m)| if m { w } else { 0.0 })
                .collect();
            Ok(StageWeights {
                w,
                summary: MissSummary::CompleteCase,
                warning: None,
            })
        }
        Method::WqEe => {
            if slice.n_nonrespondents() == 0 {
                return Ok(cc(MissSummary::CompleteCase));
            }
            let inst = cfg
                .instruments
                .iter()
                .find(|s| s.stage == t)
                .ok_or_else(|| Error::Config(format!("method `wq_ee` has no instruments for stage {t}")))?;
            match fit_gamma_ee(ds, slice, inst, &cfg.search, &cfg.kernel) {
                Ok(fit) => Ok(StageWeights {
                    summary: MissSummary::Ee {
                        gamma_hat: fit.gamma_hat,
                        first_step_gamma: fit.first_step_gamma,
                        clipped: fit.clipped,
                        capped: fit.capped,
                        pseudo_inverse: fit.pseudo_inverse,
                        all_respond: fit.all_respond,
                    },
                    warning: fit
                        .pseudo_inverse
                        .then(|| format!("stage {t}: GMM weight matrix singular; pseudo-inverse used")),
                    w: fit.weights,
                }),
                Err(e @ (Error::Config(_) | Error::UnknownColumn(_))) => Err(e),
                Err(e) => {
                    let reason = e.to_string();
                    Ok(StageWeights {
                        w: cc_weights(slice),
                        warning: Some(format!("stage {t}: WQ-EE failed ({reason}); complete-case weights used")),
                        summary: MissSummary::Fallback { reason },
                    })
                }
            }
        }
        Method::WqSa => {
            if slice.n_nonrespondents() == 0 {
                return Ok(cc(MissSummary::CompleteCase));
            }
            let gp = *cfg
                .gamma_prime
                .get(&t)
                .ok_or_else(|| Error::Config(format!("method `wq_sa` has no gamma_prime for stage {t}")))?;
            let sa = weights_sa(
                ds,
                slice,
                &SAConfig {
                    stage: t,
                    gamma_prime: gp,
                    kernel: cfg.kernel.clone(),
                },
            )?;
            Ok(StageWeights {
                w: sa.weights,
                summary: MissSummary::Sa {
                    gamma_prime: gp,
                    clipped: sa.clipped,
                    capped: sa.capped,
                },
                warning: None,
            })
        }
    }
}

/// Backward induction from stage `T` down to `down_to`, with the weights of
/// `cfg` (only the weighting methods `all`, `cc`, `wq_ee`, `wq_sa` apply
/// here). Returns fits for stages `down_to..=T`, in increasing stage order.
fn backward(ds: &Dataset, specs: &[QSpec], cfg: &MethodConfig, down_to: usize, warnings: &mut Vec<String>) -> Result<Vec<StageFit>> {
    let big_t = ds.n_stages();
    let mut fits: Vec<StageFit> = Vec::new();
    for t in (down_to..=big_t).rev() {
        let qspec = &specs[t - 1];
        let mask = ds.complete_upto(t)?;
        let (y, w, summary) = if t == big_t {
            let y: Vec<Option<f64>> = (0..ds.n()).map(|i| Some(ds.final_outcome(i))).collect();
            let w = mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            (y, w, MissSummary::Unweighted)
        } else {
            let next = fits.last().expect("later stage fitted first");
            let y_pse = pseudo_outcomes(ds, next)?;
            let y: Vec<Option<f64>> = y_pse.iter().zip(&mask.mask).map(|(y, &m)| if m { *y } else { None }).collect();
            let slice = PseudoSlice::new(&mask.mask, &y);
            let sw = stage_weights(ds, t, &slice, cfg)?;
            if let Some(msg) = sw.warning {
                log::warn!("{msg}");
                warnings.push(msg);
            }
            (y, sw.w, sw.summary)
        };
        let (theta, n_used, weight_sum) = fit_stage(ds, qspec, &y, &w)?;
        fits.push(StageFit {
            stage: t,
            qspec: qspec.clone(),
            theta,
            n_complete: mask.count(),
            n_used,
            weight_sum,
            missingness: summary,
        });
    }
    fits.reverse();
    Ok(fits)
}

/// The stage-`t` pseudo-outcome slice after fitting stages `t+1..=T` with `cfg`.
/// For `t = T` the slice holds the final outcome.
pub fn pseudo_slice(ds: &Dataset, qspecs: &[QSpec], cfg: &MethodConfig, t: usize, _stream: &RngStream) -> Result<PseudoSlice> {
    ds.check_stage(t)?;
    let specs = specs_by_stage(qspecs, ds.n_stages())?;
    let mask = ds.complete_upto(t)?;
    if t == ds.n_stages() {
        let y: Vec<Option<f64>> = (0..ds.n()).map(|i| Some(ds.final_outcome(i))).collect();
        return Ok(PseudoSlice::new(&mask.mask, &y));
    }
    let mut warnings = Vec::new();
    let fits = backward(ds, &specs, cfg, t + 1, &mut warnings)?;
    let y_pse = pseudo_outcomes(ds, &fits[0])?;
    Ok(PseudoSlice::new(&mask.mask, &y_pse))
}

/// Feature terms that read none of the given covariates.
fn drop_terms(terms: &[Term], dropped: &[(usize, String)]) -> Vec<Term> {
    terms
        .iter()
        .filter(|t| {
            !t.0.iter().any(|v| match v {
                Var::Covariate { stage, name } => dropped.iter().any(|(s, n)| s == stage && n == name),
                _ => false,
            })
        })
        .cloned()
        .collect()
}

/// The naive reduction: remove partially observed covariates and every
/// feature term that reads one.
pub fn naive_reduction(ds: &Dataset, specs: &[QSpec]) -> Result<(Dataset, Vec<QSpec>)> {
    let dropped: Vec<(usize, String)> = ds
        .partially_observed()
        .into_iter()
        .map(|(t, j)| (t, ds.stages()[t - 1].names()[j].clone()))
        .collect();
    let reduced = ds.drop_covariates(|t, name| dropped.iter().any(|(s, n)| *s == t && n == name));
    let specs = specs
        .iter()
        .map(|q| QSpec::new(q.stage, drop_terms(&q.treatment_free, &dropped), drop_terms(&q.blip, &dropped)))
        .collect::<Result<Vec<_>>>()?;
    Ok((reduced, specs))
}

/// Fit a regime by backward induction.
pub fn fit_dtr(ds: &Dataset, qspecs: &[QSpec], cfg: &MethodConfig, stream: &RngStream) -> Result<DtrFit> {
    cfg.validate(ds.n_stages())?;
    let specs = specs_by_stage(qspecs, ds.n_stages())?;
    let mut warnings = Vec::new();
    let stages = match cfg.method {
        Method::All => {
            if !ds.is_fully_observed() {
                return Err(Error::InvalidArgument(
                    "method `all` needs a dataset with no missing covariate cells".into(),
                ));
            }
            backward(ds, &specs, cfg, 1, &mut warnings)?
        }
        Method::Naive => {
            let (reduced, rspecs) = naive_reduction(ds, &specs)?;
            backward(&reduced, &rspecs, cfg, 1, &mut warnings)?
        }
        Method::Cc | Method::WqEe | Method::WqSa => backward(ds, &specs, cfg, 1, &mut warnings)?,
        Method::Mi => fit_mi(ds, &specs, cfg, stream, &mut warnings)?,
    };
    Ok(DtrFit {
        method: cfg.method,
        stages,
        seed: stream.seed,
        warnings,
    })
}

fn fit_mi(ds: &Dataset, specs: &[QSpec], cfg: &MethodConfig, stream: &RngStream, warnings: &mut Vec<String>) -> Result<Vec<StageFit>> {
    let m = cfg.mi.m;
    let plain = MethodConfig::all();
    let per_imp: Vec<Vec<StageFit>> = if ds.is_fully_observed() {
        let f = backward(ds, specs, &plain, 1, warnings)?;
        vec![f; m]
    } else {
        let imputed = pmm_impute_with(ds, &cfg.mi, &stream.child("mi", 0))?;
        imputed
            .par_iter()
            .map(|d| backward(d, specs, &plain, 1, &mut Vec::new()))
            .collect::<Result<_>>()?
    };
    let mut out = per_imp[0].clone();
    for st in out.iter_mut() {
        st.missingness = MissSummary::Imputed { m };
        st.n_complete = ds.complete_upto(st.stage)?.count();
    }
    // incremental mean: identical fits average to themselves bit for bit
    for (k, fits) in per_imp.iter().enumerate().skip(1) {
        let kf = (k + 1) as f64;
        for (acc, f) in out.iter_mut().zip(fits) {
            for (a, b) in acc.theta.beta.iter_mut().zip(&f.theta.beta) {
                *a += (b - *a) / kf;
            }
            for (a, b) in acc.theta.psi.iter_mut().zip(&f.theta.psi) {
                *a += (b - *a) / kf;
            }
        }
    }
    Ok(out)
}

/// One column of the imputation model: its address and current values.
struct ImpColumn {
    stage: usize,
    j: usize,
    observed: Vec<bool>,
}

/// Regression of `target` on `predictors` (column-major) over `rows`,
/// greedily dropping predictors that make the design rank deficient.
/// Returns the kept predictor indices, `β̂`, `(XᵀX)⁻¹` and the residual SS.
fn imputation_regression(
    predictors: &[Vec<f64>],
    target: &[f64],
    rows: &[usize],
) -> Result<(Vec<usize>, Vec<f64>, DMatrix<f64>, f64)> {
    let mut kept: Vec<usize> = Vec::new();
    let build = |cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len() + 1, |r, c| if c == 0 { 1.0 } else { predictors[cols[c - 1]][rows[r]] });
    let y: Vec<f64> = rows.iter().map(|&i| target[i]).collect();
    let ones = vec![1.0; rows.len()];
    for p in 0..predictors.len() {
        let mut trial = kept.clone();
        trial.push(p);
        if wls_fit(&build(&trial), &y, &ones).is_ok() {
            kept = trial;
        } else {
            log::warn!("imputation model: predictor {p} collinear, dropped");
        }
    }
    let x = build(&kept);
    let beta = wls_fit(&x, &y, &ones)?;
    let xtx_inv = (x.transpose() * &x)
        .try_inverse()
        .ok_or(Error::SingularDesign { nullity: 1, columns: x.ncols() })?;
    let fitted = &x * DVector::from_column_slice(&beta);
    let rss = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((kept, beta, xtx_inv, rss))
}

/// Multiple imputation of missing covariate cells by chained equations with
/// predictive mean matching.
///
/// Each incomplete column is regressed on every other covariate, treatment and
/// outcome. Donors are the `k` observed rows whose predictions (at `β̂`) are
/// closest to the missing row's prediction at a posterior draw `β̇`; one donor
/// is chosen uniformly and its observed value copied.
pub fn pmm_impute(ds: &Dataset, m: usize, k: usize, cycles: usize, stream: &RngStream) -> Result<Vec<Dataset>> {
    let cfg = MiConfig {
        m,
        k,
        cycles,
        predictors: MiPredictors::All,
    };
    pmm_impute_with(ds, &cfg, stream)
}

/// [`pmm_impute`] with an explicit predictor set.
pub fn pmm_impute_with(ds: &Dataset, cfg: &MiConfig, stream: &RngStream) -> Result<Vec<Dataset>> {
    let MiConfig { m, k, cycles, predictors } = *cfg;
    let targets: Vec<ImpColumn> = ds
        .partially_observed()
        .into_iter()
        .map(|(stage, j)| ImpColumn {
            stage,
            j,
            observed: ds.stages()[stage - 1].observed(j).to_vec(),
        })
        .collect();
    for c in &targets {
        let donors = c.observed.iter().filter(|&&o| o).count();
        if donors < k {
            return Err(Error::InsufficientDonors {
                column: format!("X{}_{}", c.stage, ds.stages()[c.stage - 1].names()[c.j]),
                donors,
                k,
            });
        }
    }
    (0..m)
        .into_par_iter()
        .map(|imp| impute_once(ds, &targets, k, cycles, predictors, &stream.child("imputation", imp as u64)))
        .collect()
}

fn impute_once(ds: &Dataset, targets: &[ImpColumn], k: usize, cycles: usize, predictors: MiPredictors, stream: &RngStream) -> Result<Dataset> {
    let mut rng = stream.rng();
    let n = ds.n();
    // every variable as a column: covariates, treatments, outcomes
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut addr: Vec<Option<(usize, usize)>> = Vec::new();
    for (s, st) in ds.stages().iter().enumerate() {
        for j in 0..st.p() {
            cols.push(st.column(j).to_vec());
            addr.push(Some((s + 1, j)));
        }
        if predictors == MiPredictors::All {
            cols.push(st.a().to_vec());
            addr.push(None);
            cols.push(st.y().to_vec());
            addr.push(None);
        }
    }
    let target_idx: Vec<usize> = targets
        .iter()
        .map(|c| addr.iter().position(|a| *a == Some((c.stage, c.j))).expect("target column present"))
        .collect();

    // start from random observed values
    for (c, &ci) in targets.iter().zip(&target_idx) {
        let pool: Vec<f64> = (0..n).filter(|&i| c.observed[i]).map(|i| cols[ci][i]).collect();
        for i in 0..n {
            if !c.observed[i] {
                cols[ci][i] = pool[rng.random_range(0..pool.len())];
            }
        }
    }

    for _ in 0..cycles {
        for (c, &ci) in targets.iter().zip(&target_idx) {
            let obs: Vec<usize> = (0..n).filter(|&i| c.observed[i]).collect();
            let mis: Vec<usize> = (0..n).filter(|&i| !c.observed[i]).collect();
            let others: Vec<Vec<f64>> = (0..cols.len()).filter(|&p| p != ci).map(|p| cols[p].clone()).collect();
            let (kept, beta, xtx_inv, rss) = imputation_regression(&others, &cols[ci], &obs)?;
            let df = obs.len().saturating_sub(beta.len()).max(1) as f64;
            // posterior draw of (σ, β)
            let chi: f64 = ChiSquared::new(df).expect("positive df").sample(&mut rng);
            let sigma = (rss / chi).sqrt();
            let chol = xtx_inv
                .clone()
                .cholesky()
                .ok_or(Error::SingularDesign { nullity: 1, columns: beta.len() })?;
            let z = DVector::from_fn(beta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta_dot = DVector::from_column_slice(&beta) + chol.l() * z * sigma;
            let predict = |b: &[f64], i: usize| b[0] + kept.iter().enumerate().map(|(q, &p)| b[q + 1] * others[p][i]).sum::<f64>();
            let bd: Vec<f64> = beta_dot.iter().copied().collect();
            let mut donor_pred: Vec<(f64, usize)> = obs.iter().map(|&i| (predict(&beta, i), i)).collect();
            donor_pred.sort_by(|a, b| a.0.total_cmp(&b.0));
            let keys: Vec<f64> = donor_pred.iter().map(|d| d.0).collect();
            for &i in &mis {
                let target = predict(&bd, i);
                let donors = nearest_k(&keys, target, k);
                let pick = donors[rng.random_range(0..donors.len())];
                cols[ci][i] = cols[ci][donor_pred[pick].1];
            }
        }
    }

    let mut out = ds.clone();
    for (c, &ci) in targets.iter().zip(&target_idx) {
        for i in 0..n {
            if !c.observed[i] {
                out.set_covariate(c.stage, c.j, i, cols[ci][i]);
            }
        }
    }
    Ok(out)
}

/// Indices of the `k` entries of ascending `keys` closest to `x`.
fn nearest_k(keys: &[f64], x: f64, k: usize) -> Vec<usize> {
    let k = k.min(keys.len());
    let mut hi = keys.partition_point(|&v| v < x);
    let mut lo = hi;
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let take_lo = if lo == 0 {
            false
        } else if hi == keys.len() {
            true
        } else {
            x - keys[lo - 1] <= keys[hi] - x
        };
        if take_lo {
            lo -= 1;
            out.push(lo);
        } else {
            out.push(hi);
            hi += 1;
        }
    }
    out
}

/// Result of [`cross_validate_value`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_improvement: f64,
    /// Per split: `(value under regime, observed mean, improvement)`;
    /// `None` for skipped splits.
    pub splits: Vec<Option<(f64, f64, f64)>>,
    pub skipped: usize,
}

/// Split-sample estimate of the improvement of the fitted regime over the
/// observed treatments.
///
/// For each split the regime is fit on a random `train_frac` share of the
/// patients. On the test patients with complete stage-1 covariates, the value
/// is the mean of `Q̂_1(h_1, d̂_1(h_1))` and the comparison is the mean
/// observed final outcome of the same patients.
pub fn cross_validate_value(
    ds: &Dataset,
    qspecs: &[QSpec],
    cfg: &MethodConfig,
    splits: usize,
    train_frac: f64,
    stream: &RngStream,
) -> Result<CvResult> {
    if splits == 0 || !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument("need splits >= 1 and 0 < train_frac < 1".into()));
    }
    let n = ds.n();
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let results: Vec<Option<(f64, f64, f64)>> = (0..splits)
        .into_par_iter()
        .map(|s| -> Result<Option<(f64, f64, f64)>> {
            let sstream = stream.child("split", s as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut sstream.child("shuffle", 0).rng());
            let (train, test) = idx.split_at(n_train);
            let train_ds = ds.select_rows(train);
            let fit = match fit_dtr(&train_ds, qspecs, cfg, &sstream.child("fit", 0)) {
                Ok(f) => f,
                Err(e @ Error::Config(_)) => return Err(e),
                Err(_) => return Ok(None),
            };
            let test_ds = ds.select_rows(test);
            let st = fit.stage(1)?;
            let bound = st.qspec.bind(&test_ds)?;
            let mask = test_ds.complete_upto(1)?;
            let (mut v, mut o, mut cnt) = (0.0, 0.0, 0usize);
            for i in mask.rows() {
                let (Some(q0), Some(q1)) = (bound.tf_value(&test_ds, i, &st.theta), bound.blip_value(&test_ds, i, &st.theta)) else {
                    continue;
                };
                v += q0 + q1.abs();
                o += test_ds.final_outcome(i);
                cnt += 1;
            }
            if cnt == 0 {
                return Ok(None);
            }
            let (v, o) = (v / cnt as f64, o / cnt as f64);
            Ok(Some((v, o, v - o)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = results.iter().flatten().map(|r| r.2).collect();
    let skipped = results.len() - kept.len();
    let mean_improvement = if kept.is_empty() { f64::NAN } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    Ok(CvResult {
        mean_improvement,
        splits: results,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_k_picks_closest() {
        let keys = [0.0, 1.0, 2.0, 3.0, 10.0];
        let mut got = nearest_k(&keys, 2.2, 3);
        got.sort();
        assert_eq!(got, vec![1, 2, 3]);
        let mut got = nearest_k(&keys, 100.0, 2);
        got.sort();
        assert_eq!(got, vec![3, 4]);
        assert_eq!(nearest_k(&keys, -5.0, 1), vec![0]);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.tag()).unwrap(), m);
        }
        assert!(Method::parse("bogus").is_err());
    }

    #[test]
    fn validate_rejects_misplaced_parameters() {
        assert!(MethodConfig::wq_ee(vec![]).validate(2).is_err());
        assert!(MethodConfig::wq_sa(Vec::new()).validate(2).is_err());
        let mut c = MethodConfig::cc();
        c.gamma_prime.insert(1, 1.0);
        assert!(c.validate(2).is_err());
        assert!(MethodConfig::cc().validate(2).is_ok());
    }
}
