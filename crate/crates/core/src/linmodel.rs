//! Linear Q-functions: feature maps, weighted least squares, Q-values,
//! pseudo-outcomes and optimal actions.
//!
//! A stage-`t` Q-function is `Q_t(h, a) = φ₀(h)·β + a φ₁(h)·ψ`, where `φ₀` is
//! the treatment-free feature map and `φ₁` the blip feature map. Both are
//! lists of [`Term`]s; intercepts are ordinary terms.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{parse_header, ColumnRole};

/// A history variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    Covariate { stage: usize, name: String },
    Treatment(usize),
    Outcome(usize),
}

impl Var {
    /// Parse `X<t>_<name>`, `A<t>` or `Y<t>`.
    pub fn parse(s: &str) -> Result<Var> {
        match parse_header(s.trim()) {
            Some(ColumnRole::Covariate { stage, name }) => Ok(Var::Covariate { stage, name }),
            Some(ColumnRole::Treatment { stage }) => Ok(Var::Treatment(stage)),
            Some(ColumnRole::Outcome { stage }) => Ok(Var::Outcome(stage)),
            _ => Err(Error::UnknownColumn(s.to_string())),
        }
    }

    pub fn stage(&self) -> usize {
        match self {
            Var::Covariate { stage, .. } => *stage,
            Var::Treatment(t) | Var::Outcome(t) => *t,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Covariate { stage, name } => write!(f, "X{stage}_{name}"),
            Var::Treatment(t) => write!(f, "A{t}"),
            Var::Outcome(t) => write!(f, "Y{t}"),
        }
    }
}

/// A feature term: the product of its factors. No factors means intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term(pub Vec<Var>);

impl Term {
    pub fn intercept() -> Term {
        Term(Vec::new())
    }

    pub fn var(v: Var) -> Term {
        Term(vec![v])
    }

    /// Parse `1`, a variable name, or a `*`-separated product of names.
    pub fn parse(s: &str) -> Result<Term> {
        let s = s.trim();
        if s == "1" {
            return Ok(Term::intercept());
        }
        s.split('*').map(Var::parse).collect::<Result<Vec<_>>>().map(Term)
    }

    pub fn is_intercept(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        for (k, v) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, "*")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Which half of the Q-function a term belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TreatmentFree,
    Blip,
}

/// One row of the flat serialized form of a [`QSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QSpecRecord {
    pub stage: usize,
    pub component: Component,
    pub term: String,
}

/// Feature maps for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSpec {
    pub stage: usize,
    pub treatment_free: Vec<Term>,
    pub blip: Vec<Term>,
}

impl QSpec {
    /// Build a spec, checking that it only reads the stage-`t` history:
    /// covariates up to stage `t`, treatments and outcomes before `t`.
    pub fn new(stage: usize, treatment_free: Vec<Term>, blip: Vec<Term>) -> Result<Self> {
        if stage == 0 {
            return Err(Error::InvalidArgument("stages are numbered from 1".into()));
        }
        if treatment_free.is_empty() || blip.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage}: both feature maps need at least one term"
            )));
        }
        for term in treatment_free.iter().chain(&blip) {
            for v in &term.0 {
                let ok = match v {
                    Var::Covariate { stage: s, .. } => *s <= stage,
                    Var::Treatment(s) | Var::Outcome(s) => *s < stage,
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "stage {stage} feature `{term}` reads `{v}`, which is not part of the stage-{stage} history"
                    )));
                }
            }
        }
        Ok(QSpec {
            stage,
            treatment_free,
            blip,
        })
    }

    /// Build a spec from term strings, e.g. `["1", "X1_1"]`.
    pub fn parse(stage: usize, treatment_free: &[&str], blip: &[&str]) -> Result<Self> {
        let tf = treatment_free.iter().map(|s| Term::parse(s)).collect::<Result<_>>()?;
        let bl = blip.iter().map(|s| Term::parse(s)).collect::<Result<_>>()?;
        QSpec::new(stage, tf, bl)
    }

    pub fn d0(&self) -> usize {
        self.treatment_free.len()
    }

    pub fn d1(&self) -> usize {
        self.blip.len()
    }

    pub fn records(&self) -> Vec<QSpecRecord> {
        let rec = |component, t: &Term| QSpecRecord {
            stage: self.stage,
            component,
            term: t.to_string(),
        };
        self.treatment_free
            .iter()
            .map(|t| rec(Component::TreatmentFree, t))
            .chain(self.blip.iter().map(|t| rec(Component::Blip, t)))
            .collect()
    }

    /// Rebuild per-stage specs from flat records, ordered by stage.
    pub fn from_records(records: &[QSpecRecord]) -> Result<Vec<QSpec>> {
        let mut by_stage: std::collections::BTreeMap<usize, (Vec<Term>, Vec<Term>)> = Default::default();
        for r in records {
            let e = by_stage.entry(r.stage).or_default();
            let term = Term::parse(&r.term)?;
            match r.component {
                Component::TreatmentFree => e.0.push(term),
                Component::Blip => e.1.push(term),
            }
        }
        by_stage
            .into_iter()
            .map(|(t, (tf, bl))| QSpec::new(t, tf, bl))
            .collect()
    }

    /// Every variable read by either feature map.
    pub fn variables(&self) -> Vec<&Var> {
        let mut out: Vec<&Var> = Vec::new();
        for term in self.treatment_free.iter().chain(&self.blip) {
            for v in &term.0 {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }

    /// Resolve the spec against a dataset's columns.
    pub fn bind(&self, ds: &Dataset) -> Result<BoundSpec> {
        ds.check_stage(self.stage)?;
        let slot = |v: &Var| -> Result<Slot> {
            ds.check_stage(v.stage())?;
            Ok(match v {
                Var::Covariate { stage, name } => {
                    let j = ds
                        .stage(*stage)?
                        .column_index(name)
                        .ok_or_else(|| Error::UnknownColumn(v.to_string()))?;
                    Slot::Cov(*stage, j)
                }
                Var::Treatment(t) => Slot::A(*t),
                Var::Outcome(t) => Slot::Y(*t),
            })
        };
        let bind_terms = |terms: &[Term]| -> Result<Vec<Vec<Slot>>> {
            terms
                .iter()
                .map(|t| t.0.iter().map(slot).collect::<Result<Vec<_>>>())
                .collect()
        };
        Ok(BoundSpec {
            stage: self.stage,
            tf: bind_terms(&self.treatment_free)?,
            blip: bind_terms(&self.blip)?,
            labels: self.variables().iter().map(|v| v.to_string()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Cov(usize, usize),
    A(usize),
    Y(usize),
}

/// A [`QSpec`] with its variables resolved to dataset columns. Evaluating a
/// bound spec avoids name lookups in hot loops.
#[derive(Debug, Clone)]
pub struct BoundSpec {
    pub stage: usize,
    tf: Vec<Vec<Slot>>,
    blip: Vec<Vec<Slot>>,
    labels: Vec<String>,
}

impl BoundSpec {
    fn slot_value(ds: &Dataset, i: usize, s: Slot) -> Option<f64> {
        let st = &ds.stages()[match s {
            Slot::Cov(t, _) | Slot::A(t) | Slot::Y(t) => t - 1,
        }];
        match s {
            Slot::Cov(_, j) => st.x(j, i),
            Slot::A(_) => Some(st.a()[i]),
            Slot::Y(_) => Some(st.y()[i]),
        }
    }

    fn fill(ds: &Dataset, i: usize, terms: &[Vec<Slot>], out: &mut Vec<f64>) -> bool {
        out.clear();
        for term in terms {
            let mut v = 1.0;
            for &s in term {
                match Self::slot_value(ds, i, s) {
                    Some(x) => v *= x,
                    None => return false,
                }
            }
            out.push(v);
        }
        true
    }

    /// Fill `phi0` and `phi1` for row `i`; false if a used cell is missing.
    pub fn features_into(&self, ds: &Dataset, i: usize, phi0: &mut Vec<f64>, phi1: &mut Vec<f64>) -> bool {
        Self::fill(ds, i, &self.tf, phi0) && Self::fill(ds, i, &self.blip, phi1)
    }

    /// `(φ₀(h_i), φ₁(h_i))`, or `None` if a used cell is missing.
    pub fn features(&self, ds: &Dataset, i: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let (mut p0, mut p1) = (Vec::new(), Vec::new());
        self.features_into(ds, i, &mut p0, &mut p1).then_some((p0, p1))
    }

    /// Name of the first missing variable for row `i`, if any.
    pub fn first_missing(&self, ds: &Dataset, i: usize) -> Option<String> {
        let all = self.tf.iter().chain(&self.blip).flatten();
        for &s in all {
            if Self::slot_value(ds, i, s).is_none() {
                if let Slot::Cov(t, j) = s {
                    return Some(format!("X{}_{}", t, ds.stages()[t - 1].names()[j]));
                }
            }
        }
        None
    }

    pub fn d0(&self) -> usize {
        self.tf.len()
    }

    pub fn d1(&self) -> usize {
        self.blip.len()
    }

    /// Variables read by the spec, as column labels.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Blip `φ₁(h_i)·ψ` for row `i`.
    pub fn blip_value(&self, ds: &Dataset, i: usize, theta: &ThetaHat) -> Option<f64> {
        let mut v = 0.0;
        for (term, psi) in self.blip.iter().zip(&theta.psi) {
            let mut f = 1.0;
            for &s in term {
                f *= Self::slot_value(ds, i, s)?;
            }
            v += f * psi;
        }
        Some(v)
    }

    /// Treatment-free part `φ₀(h_i)·β` for row `i`.
    pub fn tf_value(&self, ds: &Dataset, i: usize, theta: &ThetaHat) -> Option<f64> {
        let mut v = 0.0;
        for (term, b) in self.tf.iter().zip(&theta.beta) {
            let mut f = 1.0;
            for &s in term {
                f *= Self::slot_value(ds, i, s)?;
            }
            v += f * b;
        }
        Some(v)
    }

    /// Q-design row `[φ₀, a φ₁]` for row `i` at action `a`.
    pub fn design_row(&self, ds: &Dataset, i: usize, a: f64) -> Option<Vec<f64>> {
        let (mut p0, p1) = self.features(ds, i)?;
        p0.extend(p1.iter().map(|v| a * v));
        Some(p0)
    }
}

/// Fitted coefficients `θ_t = (β_t, ψ_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaHat {
    pub stage: usize,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl ThetaHat {
    /// Split a stacked `(β, ψ)` vector.
    pub fn from_stacked(stage: usize, d0: usize, theta: &[f64]) -> Self {
        ThetaHat {
            stage,
            beta: theta[..d0].to_vec(),
            psi: theta[d0..].to_vec(),
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.psi).copied().collect()
    }
}

/// Read access to one patient's history.
pub trait History {
    fn get(&self, v: &Var) -> Option<f64>;
}

/// A dataset row viewed as a history.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub ds: &'a Dataset,
    pub i: usize,
}

impl History for Row<'_> {
    fn get(&self, v: &Var) -> Option<f64> {
        let st = self.ds.stage(v.stage()).ok()?;
        match v {
            Var::Covariate { name, .. } => st.x(st.column_index(name)?, self.i),
            Var::Treatment(_) => Some(st.a()[self.i]),
            Var::Outcome(_) => Some(st.y()[self.i]),
        }
    }
}

/// A history given as `label -> value` pairs, e.g. `"X1_2" -> 0.5`.
/// Absent labels are missing.
impl History for HashMap<String, f64> {
    fn get(&self, v: &Var) -> Option<f64> {
        HashMap::get(self, &v.to_string()).copied()
    }
}

fn eval_terms(terms: &[Term], coef: &[f64], h: &dyn History) -> std::result::Result<f64, String> {
    let mut total = 0.0;
    for (term, c) in terms.iter().zip(coef) {
        let mut f = 1.0;
        for v in &term.0 {
            f *= h.get(v).ok_or_else(|| v.to_string())?;
        }
        total += f * c;
    }
    Ok(total)
}

fn check_dims(spec: &QSpec, theta: &ThetaHat) -> Result<()> {
    if theta.beta.len() != spec.d0() || theta.psi.len() != spec.d1() {
        return Err(Error::InvalidArgument(format!(
            "coefficient dims ({}, {}) do not match spec ({}, {})",
            theta.beta.len(),
            theta.psi.len(),
            spec.d0(),
            spec.d1()
        )));
    }
    Ok(())
}

fn missing(column: String) -> Error {
    Error::MissingFeature { row: 0, column }
}

/// `φ₀(h)·β + a φ₁(h)·ψ`.
pub fn q_value(spec: &QSpec, theta: &ThetaHat, h: &dyn History, a: f64) -> Result<f64> {
    check_dims(spec, theta)?;
    let q0 = eval_terms(&spec.treatment_free, &theta.beta, h).map_err(missing)?;
    let q1 = eval_terms(&spec.blip, &theta.psi, h).map_err(missing)?;
    Ok(q0 + a * q1)
}

/// `φ₀(h)·β + |φ₁(h)·ψ|` when every used feature is observed, else `None`.
pub fn pseudo_outcome(spec: &QSpec, theta: &ThetaHat, h: &dyn History) -> Option<f64> {
    let q0 = eval_terms(&spec.treatment_free, &theta.beta, h).ok()?;
    let q1 = eval_terms(&spec.blip, &theta.psi, h).ok()?;
    Some(q0 + q1.abs())
}

/// Sign rule for a blip value: `+1` iff strictly positive.
pub fn action_from_blip(blip: f64) -> f64 {
    if blip > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `+1` if `φ₁(h)·ψ > 0`, else `-1`.
pub fn opt_action(spec: &QSpec, theta: &ThetaHat, h: &dyn History) -> Result<f64> {
    check_dims(spec, theta)?;
    let q1 = eval_terms(&spec.blip, &theta.psi, h).map_err(missing)?;
    Ok(action_from_blip(q1))
}

/// Weighted least squares `argmin Σ wᵢ (yᵢ − xᵢᵀθ)²` through a
/// column-pivoted QR of the `√w`-scaled design.
///
/// The design is rank deficient when a diagonal entry of `R` falls below
/// `1e-10` times the largest column norm.
pub fn wls_fit(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let d = x.ncols();
    if x.nrows() != y.len() || y.len() != w.len() {
        return Err(Error::InvalidArgument("wls_fit: dimension mismatch".into()));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("wls_fit: weights must be finite and nonnegative".into()));
    }
    let rows: Vec<usize> = (0..y.len()).filter(|&i| w[i] > 0.0).collect();
    if rows.len() < d {
        return Err(Error::SingularDesign {
            nullity: d - rows.len(),
            columns: d,
        });
    }
    let m = rows.len();
    let sw: Vec<f64> = rows.iter().map(|&i| w[i].sqrt()).collect();
    let a = DMatrix::from_fn(m, d, |r, c| sw[r] * x[(rows[r], c)]);
    let mut b = DVector::from_iterator(m, rows.iter().zip(&sw).map(|(&i, s)| s * y[i]));

    let max_norm = (0..d).map(|c| a.column(c).norm()).fold(0.0, f64::max);
    let tol = 1e-10 * max_norm;
    let qr = a.col_piv_qr();
    let r = qr.r();
    let rank = (0..d).filter(|&k| r[(k, k)].abs() > tol).count();
    if max_norm == 0.0 || rank < d {
        return Err(Error::SingularDesign {
            nullity: d - rank,
            columns: d,
        });
    }
    qr.q_tr_mul(&mut b);
    let mut sol = r
        .view((0, 0), (d, d))
        .solve_upper_triangular(&b.rows(0, d))
        .ok_or(Error::SingularDesign { nullity: 1, columns: d })?;
    qr.p().inv_permute_rows(&mut sol);
    let theta: Vec<f64> = sol.iter().copied().collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularDesign { nullity: 1, columns: d });
    }
    Ok(theta)
}

/// Heteroskedasticity-robust (HC0) sandwich covariance of a WLS fit:
/// `(XᵀWX)⁻¹ (Σ wᵢ² eᵢ² xᵢxᵢᵀ) (XᵀWX)⁻¹`.
pub fn wls_sandwich(x: &DMatrix<f64>, y: &[f64], w: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    let mut bread = DMatrix::<f64>::zeros(d, d);
    let mut meat = DMatrix::<f64>::zeros(d, d);
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let xi = x.row(i).transpose();
        let e = y[i] - xi.dot(&DVector::from_column_slice(theta));
        let outer = &xi * xi.transpose();
        bread += &outer * w[i];
        meat += &outer * (w[i] * w[i] * e * e);
    }
    let inv = bread
        .try_inverse()
        .ok_or(Error::SingularDesign { nullity: 1, columns: d })?;
    Ok(&inv * meat * &inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xmat(rows: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), 2, |r, c| rows[r][c])
    }

    #[test]
    fn exact_line() {
        let x = xmat(&[[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]);
        let th = wls_fit(&x, &[0.0, 1.0, 2.0], &[1.0; 3]).unwrap();
        assert!(th[0].abs() < 1e-12 && (th[1] - 1.0).abs() < 1e-12);
        let th = wls_fit(&x, &[0.0, 1.0, 2.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!(th[0].abs() < 1e-12 && (th[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_columns_report_nullity() {
        let x = DMatrix::from_fn(5, 3, |r, c| if c == 2 { 2.0 * r as f64 } else if c == 1 { r as f64 } else { 1.0 });
        match wls_fit(&x, &[1.0, 2.0, 3.0, 4.0, 6.0], &[1.0; 5]) {
            Err(Error::SingularDesign { nullity, columns }) => {
                assert_eq!(nullity, 1);
                assert_eq!(columns, 3);
            }
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn term_round_trip() {
        for s in ["1", "X1_2", "A1", "Y2", "X2_1*A1", "X1_a*X1_b*Y1"] {
            assert_eq!(Term::parse(s).unwrap().to_string(), s);
        }
        assert!(Term::parse("Z3").is_err());
    }

    #[test]
    fn spec_rejects_future_variables() {
        assert!(QSpec::parse(1, &["1", "Y1"], &["1"]).is_err());
        assert!(QSpec::parse(1, &["1"], &["A1"]).is_err());
        assert!(QSpec::parse(1, &["1", "X2_1"], &["1"]).is_err());
        assert!(QSpec::parse(2, &["1", "Y1", "A1", "X2_1"], &["1", "A1"]).is_ok());
    }

    #[test]
    fn records_round_trip() {
        let s1 = QSpec::parse(1, &["1", "X1_1"], &["1", "X1_2"]).unwrap();
        let s2 = QSpec::parse(2, &["1", "Y1", "A1*X2_1"], &["1", "A1"]).unwrap();
        let recs: Vec<_> = s1.records().into_iter().chain(s2.records()).collect();
        assert_eq!(QSpec::from_records(&recs).unwrap(), vec![s1, s2]);
    }

    #[test]
    fn stage_two_truth_blip() {
        // θ₂ = (ψ20, ψ2A, ψ22) = (1, -1, 1)
        let spec = QSpec::parse(2, &["1", "A1", "X2_1", "X2_2"], &["1", "A1", "X2_2"]).unwrap();
        let th = ThetaHat { stage: 2, beta: vec![0.0, -1.0, 1.0, -0.5], psi: vec![1.0, -1.0, 1.0] };
        let mut h = HashMap::new();
        h.insert("A1".to_string(), 1.0);
        h.insert("X2_1".to_string(), 0.3);
        h.insert("X2_2".to_string(), 0.4);
        let diff = q_value(&spec, &th, &h, 1.0).unwrap() - q_value(&spec, &th, &h, -1.0).unwrap();
        assert!((diff - 2.0 * (1.0 - 1.0 + 0.4)).abs() < 1e-12);
        assert_eq!(opt_action(&spec, &th, &h).unwrap(), 1.0);
    }

    #[test]
    fn stage_one_truth_rule() {
        let spec = QSpec::parse(1, &["1", "X1_1", "X1_2"], &["1", "X1_2"]).unwrap();
        let th = ThetaHat { stage: 1, beta: vec![1.5, 0.5, -0.5], psi: vec![1.0, -1.0] };
        let mut h = HashMap::new();
        h.insert("X1_1".to_string(), 0.0);
        h.insert("X1_2".to_string(), 0.5);
        assert_eq!(opt_action(&spec, &th, &h).unwrap(), 1.0);
        h.insert("X1_2".to_string(), 1.5);
        assert_eq!(opt_action(&spec, &th, &h).unwrap(), -1.0);
        h.insert("X1_2".to_string(), 1.0);
        assert_eq!(opt_action(&spec, &th, &h).unwrap(), -1.0);
    }

    #[test]
    fn missing_feature_is_unavailable() {
        let spec = QSpec::parse(1, &["1", "X1_1"], &["1"]).unwrap();
        let th = ThetaHat { stage: 1, beta: vec![1.0, 1.0], psi: vec![0.0] };
        let h: HashMap<String, f64> = HashMap::new();
        assert!(pseudo_outcome(&spec, &th, &h).is_none());
        assert!(matches!(q_value(&spec, &th, &h, 1.0), Err(Error::MissingFeature { .. })));
    }
}
