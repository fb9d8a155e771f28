//! Simulation designs, regime evaluation and the Monte Carlo study runner.
//!
//! A cohort is generated in two steps. [`Latent`] holds every exogenous draw:
//! covariates, outcome noise and the uniforms behind the response and
//! treatment coin flips. [`realize`] then walks the stages, assigning
//! treatments either from the observational propensity model or from a
//! regime, so that a fitted regime is evaluated on the same noise as the
//! truth it is compared with.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Stage};
use crate::ee::InstrumentSpec;
use crate::error::{Error, Result};
use crate::linmodel::{QSpec, Var};
use crate::qlearn::{fit_dtr, DtrFit, Method, MethodConfig, MissSummary, MiConfig};
use crate::stats::{mean, sd, RngStream};

/// Generative design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum Design {
    Sim1,
    /// Instrument `X1_1` leaks into the stage-2 response model with weight `gz`.
    Sim2Gz { gz: f64 },
    /// Response model with a `(X1_2 − 1) y_pse,1` interaction of weight `guy`.
    Sim2Int { guy: f64 },
    Sim3,
    Sim4,
}

impl Design {
    pub fn tag(&self) -> &'static str {
        match self {
            Design::Sim1 => "sim1",
            Design::Sim2Gz { .. } => "sim2_gz",
            Design::Sim2Int { .. } => "sim2_int",
            Design::Sim3 => "sim3",
            Design::Sim4 => "sim4",
        }
    }

    /// Parse a tag; `param` is `γ_z` or `γ_uy` for the two Sim-2 variants.
    pub fn parse(tag: &str, param: Option<f64>) -> Result<Design> {
        let need = |name: &str| param.ok_or_else(|| Error::Config(format!("design `{tag}` needs `{name}`")));
        let d = match tag {
            "sim1" => Design::Sim1,
            "sim2_gz" => Design::Sim2Gz { gz: need("gz")? },
            "sim2_int" => Design::Sim2Int { guy: need("guy")? },
            "sim3" => Design::Sim3,
            "sim4" => Design::Sim4,
            _ => return Err(Error::Config(format!("unknown design `{tag}`"))),
        };
        if param.is_some() && matches!(d, Design::Sim1 | Design::Sim3 | Design::Sim4) {
            return Err(Error::Config(format!("design `{tag}` takes no parameter")));
        }
        d.check()?;
        Ok(d)
    }

    /// Only the tabulated parameter values are accepted.
    pub fn check(&self) -> Result<()> {
        match *self {
            Design::Sim2Gz { gz } if ![-0.4, -0.2, 0.2, 0.4].contains(&gz) => {
                Err(Error::Config(format!("gz must be one of -0.4, -0.2, 0.2, 0.4 (got {gz})")))
            }
            Design::Sim2Int { guy } if ![-0.2, -0.1, 0.1, 0.2].contains(&guy) => {
                Err(Error::Config(format!("guy must be one of -0.2, -0.1, 0.1, 0.2 (got {guy})")))
            }
            _ => Ok(()),
        }
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            Design::Sim2Gz { gz } => Some(gz),
            Design::Sim2Int { guy } => Some(guy),
            _ => None,
        }
    }

    pub fn n_stages(&self) -> usize {
        if matches!(self, Design::Sim4) {
            3
        } else {
            2
        }
    }

    /// Working Q-function models; they contain the true models.
    pub fn qspecs(&self) -> Vec<QSpec> {
        let mut v = vec![
            QSpec::parse(1, &["1", "X1_1", "X1_2"], &["1", "X1_2"]).expect("valid spec"),
            QSpec::parse(2, &["1", "Y1", "A1", "X2_1", "X2_2"], &["1", "A1", "X2_2"]).expect("valid spec"),
        ];
        if self.n_stages() == 3 {
            v.push(QSpec::parse(3, &["1", "Y1", "Y2", "X3_1"], &["1", "X3_2"]).expect("valid spec"));
        }
        v
    }

    /// True blip coefficients per stage, ordered as in [`Design::qspecs`].
    pub fn true_psi(&self) -> Vec<Vec<f64>> {
        let mut v = match self {
            Design::Sim3 => vec![vec![-1.0, 1.0], vec![1.0, -1.0, 1.0]],
            _ => vec![vec![1.0, -1.0], vec![1.0, -1.0, 1.0]],
        };
        if self.n_stages() == 3 {
            v.push(vec![-1.0, 1.0]);
        }
        v
    }

    /// True tilt `γ_t` of the pseudo-outcome response model, where one exists.
    pub fn true_gamma(&self, t: usize) -> Option<f64> {
        match (self, t) {
            (Design::Sim3, 1) => Some(1.0),
            (Design::Sim2Int { .. }, _) => None,
            (_, 1) => Some(-1.0),
            (Design::Sim4, 2) => Some(-1.0),
            _ => None,
        }
    }

    /// Nonresponse instruments for the earlier stages. Empty for `sim3`,
    /// which has none.
    pub fn instruments(&self) -> Vec<InstrumentSpec> {
        let s1 = InstrumentSpec::new(
            1,
            vec![Var::parse("X1_2").expect("label"), Var::Treatment(1)],
            vec![Var::parse("X1_1").expect("label")],
        );
        match self {
            Design::Sim3 => Vec::new(),
            Design::Sim4 => vec![
                s1,
                InstrumentSpec::new(
                    2,
                    Vec::new(),
                    vec![Var::parse("X2_1").expect("label"), Var::parse("X2_2").expect("label")],
                ),
            ],
            _ => vec![s1],
        }
    }

    /// The comparison set: all, naive, cc, mi, and wq_ee (or wq_sa at the
    /// true `γ′` for `sim3`).
    pub fn default_methods(&self) -> Vec<MethodConfig> {
        let weighted = match self {
            Design::Sim3 => MethodConfig::wq_sa([(1, 1.0)]),
            _ => MethodConfig::wq_ee(self.instruments()),
        };
        vec![
            MethodConfig::all(),
            MethodConfig::naive(),
            MethodConfig::cc(),
            MethodConfig::mi(MiConfig::default()),
            weighted,
        ]
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param() {
            Some(p) => write!(f, "{}({p})", self.tag()),
            None => f.write_str(self.tag()),
        }
    }
}

/// A design at a sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub design: Design,
    pub n: usize,
}

/// Exogenous draws for a cohort.
#[derive(Debug, Clone)]
pub struct Latent {
    pub design: Design,
    pub n: usize,
    /// `x[t-1][j][i]`, all cells.
    pub x: Vec<Vec<Vec<f64>>>,
    /// Outcome noise per stage.
    pub eps: Vec<Vec<f64>>,
    /// Uniforms for the response indicators.
    pub u_r: Vec<Vec<f64>>,
    /// Uniforms for the observational treatment draws.
    pub u_a: Vec<Vec<f64>>,
}

fn uniforms(stream: &RngStream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn normals(stream: &RngStream, n: usize, sd: f64) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draw the exogenous part of a cohort. Each variable has its own stream,
/// so stages shared between designs get identical values.
pub fn draw_latent(design: Design, n: usize, stream: &RngStream) -> Latent {
    // (X1_1, X2_1) bivariate normal with correlation 0.5
    let z1 = normals(&stream.child("baseline", 1), n, 1.0);
    let z2 = normals(&stream.child("baseline", 2), n, 1.0);
    let x11 = z1.clone();
    let x21: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * a + 0.75f64.sqrt() * b).collect();
    let mut x = vec![
        vec![x11, uniforms(&stream.child("stage", 1).child("x2", 0), n, 0.0, 2.0)],
        vec![x21, uniforms(&stream.child("stage", 2).child("x2", 0), n, 0.0, 2.0)],
    ];
    let mut eps = vec![
        normals(&stream.child("stage", 1).child("eps", 0), n, 3f64.sqrt()),
        normals(&stream.child("stage", 2).child("eps", 0), n, 1.0),
    ];
    if design.n_stages() == 3 {
        let s3 = stream.child("stage", 3);
        x.push(vec![normals(&s3.child("x1", 0), n, 1.0), uniforms(&s3.child("x2", 0), n, 0.0, 2.0)]);
        eps.push(normals(&s3.child("eps", 0), n, 1.0));
    }
    let stages = design.n_stages();
    let u_r = (1..=stages).map(|t| uniforms(&stream.child("stage", t as u64).child("r", 0), n, 0.0, 1.0)).collect();
    let u_a = (1..=stages).map(|t| uniforms(&stream.child("stage", t as u64).child("a", 0), n, 0.0, 1.0)).collect();
    Latent { design, n, x, eps, u_r, u_a }
}

/// Source of the treatments during [`realize`].
pub trait Regime: Sync {
    /// Actions at stage `t` for every row; `ds` holds the history so far.
    fn actions(&self, ds: &Dataset, t: usize) -> Result<Vec<f64>>;
}

impl Regime for DtrFit {
    fn actions(&self, ds: &Dataset, t: usize) -> Result<Vec<f64>> {
        self.recommend_all(ds, t)
    }
}

/// The design's true optimal regime.
#[derive(Debug, Clone, Copy)]
pub struct TrueRegime(pub Design);

impl Regime for TrueRegime {
    fn actions(&self, ds: &Dataset, t: usize) -> Result<Vec<f64>> {
        Ok((0..ds.n()).map(|i| true_optimal(self.0, ds, i, t)).collect())
    }
}

/// A regime given by a closure.
pub struct RegimeFn<F>(pub F);

impl<F: Fn(&Dataset, usize) -> Result<Vec<f64>> + Sync> Regime for RegimeFn<F> {
    fn actions(&self, ds: &Dataset, t: usize) -> Result<Vec<f64>> {
        (self.0)(ds, t)
    }
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn sign_rule(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// True optimal action at stage `t` given the realized history of row `i`.
pub fn true_optimal(design: Design, ds: &Dataset, i: usize, t: usize) -> f64 {
    let s = &ds.stages()[t - 1];
    match t {
        1 => {
            let x12 = s.column(1)[i];
            match design {
                Design::Sim3 => sign_rule(-1.0 + x12),
                _ => sign_rule(1.0 - x12),
            }
        }
        2 => {
            let a1 = ds.stages()[0].a()[i];
            sign_rule(1.0 - a1 + s.column(1)[i])
        }
        _ => sign_rule(-1.0 + s.column(1)[i]),
    }
}

/// A generated cohort.
#[derive(Debug, Clone)]
pub struct Realized {
    /// Every covariate observed.
    pub full: Dataset,
    /// Covariate `X_t_2` hidden where `R_t = 0`.
    pub masked: Dataset,
    /// Response indicators per stage.
    pub r: Vec<Vec<bool>>,
    /// True optimal actions per stage at the realized histories.
    pub optimal: Vec<Vec<f64>>,
}

/// Walk the stages of a latent cohort. With `regime = None` treatments follow
/// the observational propensity model; otherwise the regime's actions are
/// forced.
pub fn realize(latent: &Latent, regime: Option<&dyn Regime>) -> Result<Realized> {
    let n = latent.n;
    let design = latent.design;
    let big_t = design.n_stages();
    let ids: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
    let stages = (0..big_t)
        .map(|t| {
            Stage::new(
                vec!["1".into(), "2".into()],
                latent.x[t].clone(),
                vec![vec![true; n], vec![true; n]],
                vec![1.0; n],
                vec![0.0; n],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new_unchecked(ids, stages)?;
    let mut r_all = Vec::with_capacity(big_t);
    let mut opt_all = Vec::with_capacity(big_t);

    for t in 1..=big_t {
        let x = &latent.x;
        let (u_r, u_a, eps) = (&latent.u_r[t - 1], &latent.u_a[t - 1], &latent.eps[t - 1]);
        let hist_a: Vec<Vec<f64>> = ds.stages()[..t - 1].iter().map(|s| s.a().to_vec()).collect();
        let hist_y: Vec<Vec<f64>> = ds.stages()[..t - 1].iter().map(|s| s.y().to_vec()).collect();
        let prev_a = |k: usize, i: usize| hist_a[k - 1][i];
        let prev_y = |k: usize, i: usize| hist_y[k - 1][i];

        let p_respond: Vec<f64> = (0..n)
            .map(|i| match (design, t) {
                (Design::Sim3, 1) => expit(1.0 + x[0][1][i]),
                (_, 1) => 1.0 / (1.0 + (-3.0 + x[0][1][i]).exp()),
                (Design::Sim3, 2) => {
                    let arg = 2.5 - (2.0 * x[0][0][i]).exp() - 0.5 * x[0][1][i]
                        + prev_a(1, i)
                        + prev_y(1, i)
                        + x[1][0][i]
                        + 0.5 * x[1][1][i];
                    1.0 / (1.0 + arg.exp())
                }
                (Design::Sim2Gz { gz }, 2) => {
                    let (a1, y_pse) = (prev_a(1, i), sim1_pseudo(x, prev_a(1, i), prev_y(1, i), i));
                    1.0 / (1.0 + (gz * x[0][0][i] + 0.5 * x[0][1][i] - 2.0 * a1 - y_pse).exp())
                }
                (Design::Sim2Int { guy }, 2) => {
                    let (a1, y_pse) = (prev_a(1, i), sim1_pseudo(x, prev_a(1, i), prev_y(1, i), i));
                    let arg = 0.5 * x[0][1][i] - 2.0 * a1 - y_pse + guy * (x[0][1][i] - 1.0) * y_pse;
                    1.0 / (1.0 + arg.exp())
                }
                (_, 2) => {
                    let arg = -1.0 + 0.5 * x[0][1][i] - prev_y(1, i) - x[1][0][i] - 0.5 * x[1][1][i];
                    1.0 / (1.0 + arg.exp())
                }
                _ => {
                    let arg = -prev_y(1, i) - prev_y(2, i) - 0.5 * x[2][0][i] - (x[2][1][i] - 1.0).abs();
                    1.0 / (1.0 + arg.exp())
                }
            })
            .collect();
        let r: Vec<bool> = u_r.iter().zip(&p_respond).map(|(u, p)| u < p).collect();

        let a: Vec<f64> = match regime {
            Some(reg) => reg.actions(&ds, t)?,
            None => (0..n)
                .map(|i| {
                    let ri = if r[i] { 1.0 } else { 0.0 };
                    let lin = match (design, t) {
                        (Design::Sim3, 1) => 1.0 - x[0][0][i] - x[0][1][i] + ri,
                        (_, 1) => -1.0 + x[0][0][i] + x[0][1][i] - ri,
                        (Design::Sim3, 2) => -1.0 + x[0][0][i] - 2.0 * prev_a(1, i) + x[1][0][i],
                        (_, 2) => -1.0 - x[0][0][i] - x[0][1][i] + prev_y(1, i) + x[1][0][i] - ri,
                        _ => -1.0 + x[2][0][i] + x[2][1][i],
                    };
                    if u_a[i] < expit(lin) {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect(),
        };
        if a.len() != n {
            return Err(Error::InvalidArgument("regime returned the wrong number of actions".into()));
        }
        ds.set_treatments(t, a.clone());
        let y: Vec<f64> = (0..n)
            .map(|i| match (design, t) {
                (Design::Sim3, 1) => a[i] * (1.0 + x[0][1][i]) - 2.0 - 0.5 * x[0][0][i] - x[0][1][i] + eps[i],
                (_, 1) => a[i] * (3.0 - x[0][1][i]) + 1.5 + 0.5 * x[0][0][i] - 0.5 * x[0][1][i] + eps[i],
                (_, 2) => {
                    let a1 = prev_a(1, i);
                    a[i] * (1.0 - a1 + x[1][1][i]) - a1 + x[1][0][i] - 0.5 * x[1][1][i] + eps[i]
                }
                _ => -0.5 + a[i] * (-1.0 + x[2][1][i]) + 0.5 * x[2][0][i] + eps[i],
            })
            .collect();
        ds.set_outcomes(t, y);
        opt_all.push((0..n).map(|i| true_optimal(design, &ds, i, t)).collect());
        r_all.push(r);
    }

    let masked = ds.mask_covariates(|t, j, i| j == 1 && !r_all[t - 1][i]);
    Ok(Realized {
        full: ds,
        masked,
        r: r_all,
        optimal: opt_all,
    })
}

/// `1 − 2a_1 + y_1 + x_2,1 + 0.5 x_2,2`, the stage-1 pseudo-outcome under the
/// optimal stage-2 action of Sims 1 and 2.
fn sim1_pseudo(x: &[Vec<Vec<f64>>], a1: f64, y1: f64, i: usize) -> f64 {
    1.0 - 2.0 * a1 + y1 + x[1][0][i] + 0.5 * x[1][1][i]
}

/// Generate a cohort under the observational treatment model.
pub fn generate(sim: SimDesign, stream: &RngStream) -> Result<Realized> {
    sim.design.check()?;
    realize(&draw_latent(sim.design, sim.n, stream), None)
}

/// Value and correct-classification rates of a regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub value: f64,
    /// Share of patients given the optimal action at every stage.
    pub opt_pct: f64,
    pub stage_opt: Vec<f64>,
}

/// Roll a regime out on a latent cohort and score it.
pub fn evaluate_on(latent: &Latent, regime: &dyn Regime) -> Result<EvalResult> {
    let real = realize(latent, Some(regime))?;
    let n = latent.n;
    let ds = &real.full;
    let value = (0..n).map(|i| ds.final_outcome(i)).sum::<f64>() / n as f64;
    let hits: Vec<Vec<bool>> = (1..=ds.n_stages())
        .map(|t| ds.stages()[t - 1].a().iter().zip(&real.optimal[t - 1]).map(|(a, o)| a == o).collect())
        .collect();
    let stage_opt = hits.iter().map(|h| h.iter().filter(|&&b| b).count() as f64 / n as f64).collect();
    let all = (0..n).filter(|&i| hits.iter().all(|h| h[i])).count();
    Ok(EvalResult {
        value,
        opt_pct: all as f64 / n as f64,
        stage_opt,
    })
}

/// Value and classification rates of `regime` on a fresh cohort of `n_eval`
/// patients generated without missingness.
pub fn evaluate_regime(design: Design, regime: &dyn Regime, n_eval: usize, stream: &RngStream) -> Result<EvalResult> {
    evaluate_on(&draw_latent(design, n_eval, stream), regime)
}

/// Short label distinguishing configurations of the same method.
pub fn method_label(cfg: &MethodConfig) -> String {
    match cfg.method {
        Method::WqSa => {
            let g: Vec<String> = cfg.gamma_prime.values().map(|g| format!("{g}")).collect();
            format!("wq_sa({})", g.join(","))
        }
        m => m.tag().to_string(),
    }
}

/// One method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: String,
    pub eval: Option<EvalResult>,
    /// `ψ̂` per stage, in the design's spec order. `NaN` marks a term the
    /// method does not estimate.
    pub psi: Vec<Vec<f64>>,
    pub gamma_hat: Vec<Option<f64>>,
    pub fallback: bool,
    pub error: Option<String>,
}

/// Mean and standard deviation across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    pub fn of(v: &[f64]) -> Moments {
        if v.is_empty() {
            return Moments { mean: f64::NAN, sd: f64::NAN };
        }
        Moments { mean: mean(v), sd: sd(v) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub value: Moments,
    pub opt_pct: Moments,
    pub stage_opt: Vec<Moments>,
    /// `(label, bias, sd)` of each blip coefficient.
    pub psi: Vec<(String, Moments)>,
    pub gamma_hat: Vec<(usize, Moments)>,
    pub ok: usize,
    pub failures: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub design: Design,
    pub n: usize,
    pub reps: usize,
    pub rows: Vec<MethodSummary>,
    #[serde(skip)]
    pub records: Vec<RepRecord>,
}

impl StudyTable {
    pub fn row(&self, method: &str) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Long format: `method, metric, mean, sd`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "metric", "mean", "sd"])?;
        let mut put = |m: &str, metric: &str, v: Moments| {
            wr.write_record([m.to_string(), metric.to_string(), format!("{:.6}", v.mean), format!("{:.6}", v.sd)])
        };
        for r in &self.rows {
            put(&r.method, "value", r.value)?;
            put(&r.method, "opt_pct", r.opt_pct)?;
            for (t, s) in r.stage_opt.iter().enumerate() {
                put(&r.method, &format!("opt_stage{}", t + 1), *s)?;
            }
            for (label, m) in &r.psi {
                put(&r.method, &format!("bias_{label}"), *m)?;
            }
            for (t, g) in &r.gamma_hat {
                put(&r.method, &format!("gamma_hat{t}"), *g)?;
            }
            put(&r.method, "failures", Moments { mean: r.failures as f64, sd: 0.0 })?;
            put(&r.method, "fallbacks", Moments { mean: r.fallbacks as f64, sd: 0.0 })?;
        }
        wr.flush()?;
        Ok(())
    }

    /// One row per replicate and method.
    pub fn write_replicates<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let stages = self.design.n_stages();
        let mut header = vec!["rep".to_string(), "method".into(), "value".into(), "opt_pct".into()];
        header.extend((1..=stages).map(|t| format!("opt_stage{t}")));
        for (t, p) in self.design.true_psi().iter().enumerate() {
            header.extend((0..p.len()).map(|j| format!("psi{}_{j}", t + 1)));
        }
        header.push("error".into());
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.rep.to_string(), r.method.clone()];
            match &r.eval {
                Some(e) => {
                    row.push(format!("{:.6}", e.value));
                    row.push(format!("{:.6}", e.opt_pct));
                    row.extend(e.stage_opt.iter().map(|v| format!("{v:.6}")));
                }
                None => row.extend(std::iter::repeat_n(String::from("NA"), 2 + stages)),
            }
            for (t, p) in self.design.true_psi().iter().enumerate() {
                for j in 0..p.len() {
                    row.push(r.psi.get(t).and_then(|v| v.get(j)).map_or("NA".into(), |v| format!("{v:.6}")));
                }
            }
            row.push(r.error.clone().unwrap_or_default());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `ψ̂` of a fit laid out against the full design spec; blip terms the fit
/// lacks (the naive reduction) become `NaN`.
fn psi_against(design: Design, fit: &DtrFit) -> Vec<Vec<f64>> {
    design
        .qspecs()
        .iter()
        .map(|q| {
            let st = &fit.stages[q.stage - 1];
            q.blip
                .iter()
                .map(|term| {
                    st.qspec
                        .blip
                        .iter()
                        .position(|t| t == term)
                        .map_or(f64::NAN, |k| st.theta.psi[k])
                })
                .collect()
        })
        .collect()
}

fn run_one(design: Design, cfg: &MethodConfig, real: &Realized, eval: &Latent, stream: &RngStream, rep: usize) -> RepRecord {
    let label = method_label(cfg);
    let data = if cfg.method == Method::All { &real.full } else { &real.masked };
    let empty = |error| RepRecord {
        rep,
        method: label.clone(),
        eval: None,
        psi: Vec::new(),
        gamma_hat: Vec::new(),
        fallback: false,
        error: Some(error),
    };
    let fit = match fit_dtr(data, &design.qspecs(), cfg, stream) {
        Ok(f) => f,
        Err(e) => return empty(e.to_string()),
    };
    let result = match evaluate_on(eval, &fit) {
        Ok(r) => r,
        Err(e) => return empty(e.to_string()),
    };
    let gamma_hat = fit
        .stages
        .iter()
        .map(|s| match s.missingness {
            MissSummary::Ee { gamma_hat, .. } => Some(gamma_hat),
            _ => None,
        })
        .collect();
    let fallback = fit.stages.iter().any(|s| matches!(s.missingness, MissSummary::Fallback { .. }));
    RepRecord {
        rep,
        method: label,
        eval: Some(result),
        psi: psi_against(design, &fit),
        gamma_hat,
        fallback,
        error: None,
    }
}

/// Monte Carlo study: `reps` cohorts of size `n`, every method fit on each
/// (`all` on the unmasked cohort, the rest on the masked one), and every
/// fitted regime scored on one shared evaluation cohort of `n_eval`.
///
/// Failed fits are excluded from the summaries and counted. When `out` is
/// given, `study.csv` and `replicates.csv` are written there.
pub fn run_study(
    sim: SimDesign,
    methods: &[MethodConfig],
    reps: usize,
    n_eval: usize,
    stream: &RngStream,
    out: Option<&Path>,
) -> Result<StudyTable> {
    if reps == 0 {
        return Err(Error::InvalidArgument("a study needs reps >= 1".into()));
    }
    sim.design.check()?;
    for m in methods {
        m.validate(sim.design.n_stages())?;
    }
    let eval = draw_latent(sim.design, n_eval, &stream.child("evaluation", 0));
    let records: Vec<RepRecord> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<RepRecord>> {
            let rs = stream.child("rep", rep as u64);
            let real = generate(sim, &rs.child("data", 0))?;
            Ok(methods
                .iter()
                .enumerate()
                .map(|(k, cfg)| run_one(sim.design, cfg, &real, &eval, &rs.child("method", k as u64), rep))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let truth = sim.design.true_psi();
    let specs = sim.design.qspecs();
    let rows = methods
        .iter()
        .map(|cfg| {
            let label = method_label(cfg);
            let mine: Vec<&RepRecord> = records.iter().filter(|r| r.method == label).collect();
            let ok: Vec<&RepRecord> = mine.iter().copied().filter(|r| r.eval.is_some()).collect();
            for r in mine.iter().filter(|r| r.error.is_some()) {
                log::warn!("rep {} {}: {}", r.rep, r.method, r.error.as_deref().unwrap_or(""));
            }
            let pick = |f: &dyn Fn(&EvalResult) -> f64| -> Moments {
                Moments::of(&ok.iter().map(|r| f(r.eval.as_ref().expect("ok"))).collect::<Vec<_>>())
            };
            let stage_opt = (0..sim.design.n_stages()).map(|t| pick(&|e| e.stage_opt[t])).collect();
            let mut psi = Vec::new();
            for (t, q) in specs.iter().enumerate() {
                for (j, term) in q.blip.iter().enumerate() {
                    let errs: Vec<f64> = ok.iter().map(|r| r.psi[t][j] - truth[t][j]).filter(|v| v.is_finite()).collect();
                    if !errs.is_empty() {
                        psi.push((format!("psi{}[{term}]", t + 1), Moments::of(&errs)));
                    }
                }
            }
            let gamma_hat = (0..sim.design.n_stages())
                .filter_map(|t| {
                    let g: Vec<f64> = ok.iter().filter_map(|r| r.gamma_hat.get(t).copied().flatten()).collect();
                    (!g.is_empty()).then(|| (t + 1, Moments::of(&g)))
                })
                .collect();
            MethodSummary {
                method: label,
                value: pick(&|e| e.value),
                opt_pct: pick(&|e| e.opt_pct),
                stage_opt,
                psi,
                gamma_hat,
                ok: ok.len(),
                failures: mine.len() - ok.len(),
                fallbacks: ok.iter().filter(|r| r.fallback).count(),
            }
        })
        .collect();

    let table = StudyTable {
        design: sim.design,
        n: sim.n,
        reps,
        rows,
        records,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        table.write_csv(std::fs::File::create(dir.join("study.csv"))?)?;
        table.write_replicates(std::fs::File::create(dir.join("replicates.csv"))?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_two_optimum_always_treat() {
        let real = generate(SimDesign { design: Design::Sim1, n: 300 }, &RngStream::new(3)).unwrap();
        assert!(real.optimal[1].iter().all(|&a| a == 1.0));
    }

    #[test]
    fn masked_cells_follow_response() {
        let real = generate(SimDesign { design: Design::Sim4, n: 200 }, &RngStream::new(5)).unwrap();
        for t in 1..=3 {
            let obs = real.masked.stage(t).unwrap().observed(1);
            assert_eq!(obs, real.r[t - 1].as_slice());
            assert!(real.masked.stage(t).unwrap().observed(0).iter().all(|&o| o));
        }
    }

    #[test]
    fn true_regime_scores_one() {
        let e = evaluate_regime(Design::Sim3, &TrueRegime(Design::Sim3), 2000, &RngStream::new(9)).unwrap();
        assert_eq!(e.opt_pct, 1.0);
        assert!(e.stage_opt.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn design_parameters_checked() {
        assert!(Design::parse("sim2_gz", Some(0.4)).is_ok());
        assert!(Design::parse("sim2_gz", Some(0.3)).is_err());
        assert!(Design::parse("sim2_int", None).is_err());
        assert!(Design::parse("sim1", Some(1.0)).is_err());
    }
}
