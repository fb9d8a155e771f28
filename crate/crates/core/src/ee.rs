//! Tilt estimation with a nonresponse instrument (WQ-EE).
//!
//! With the history split as `(u, z)`, the tilt `γ` of the response model
//! `logit P(R = 0 | u, z, y) = s(u) + γ y` is identified by the moments
//!
//! ```text
//! B(γ) = Ê[ 𝕀(R̄_t = 1) l(z) { r / π̂_γ(u, y) − 1 } ] = 0
//! ```
//!
//! and estimated by two-step GMM: `γ̂⁽¹⁾ = argmin B Bᵀ`, then
//! `γ̂ = argmin B W Bᵀ` with `W` the inverse of the averaged `b bᵀ` at `γ̂⁽¹⁾`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{clipped_inverse, KernelConfig, Profiler, SHatTable};
use crate::linmodel::{History, Row, Term, Var};

/// Instrument declaration for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub stage: usize,
    /// Conditioning set for the kernel estimate of `s(u)`.
    pub u: Vec<Var>,
    /// Instrument columns `z`.
    pub instruments: Vec<Var>,
    /// Basis `l(z)`; `None` means intercept plus each instrument.
    #[serde(default)]
    pub basis: Option<Vec<Term>>,
}

impl InstrumentSpec {
    pub fn new(stage: usize, u: Vec<Var>, instruments: Vec<Var>) -> Self {
        InstrumentSpec {
            stage,
            u,
            instruments,
            basis: None,
        }
    }

    /// Parse from column labels such as `["X1_2", "A1"]` and `["X1_1"]`.
    pub fn parse(stage: usize, u: &[&str], instruments: &[&str]) -> Result<Self> {
        let u = u.iter().map(|s| Var::parse(s)).collect::<Result<_>>()?;
        let z = instruments.iter().map(|s| Var::parse(s)).collect::<Result<_>>()?;
        Ok(InstrumentSpec::new(stage, u, z))
    }

    /// The basis terms `l(z)`.
    pub fn basis_terms(&self) -> Vec<Term> {
        match &self.basis {
            Some(b) => b.clone(),
            None => std::iter::once(Term::intercept())
                .chain(self.instruments.iter().cloned().map(Term::var))
                .collect(),
        }
    }

    /// Structural checks: `L ≥ 2`, `u` and `z` disjoint, basis reads only `z`,
    /// and nothing beyond `(H_t, A_t)`.
    pub fn check(&self) -> Result<()> {
        let t = self.stage;
        let basis = self.basis_terms();
        if basis.len() < 2 {
            return Err(Error::UnderIdentified(format!(
                "stage {t}: basis has L = {} < 2 functions",
                basis.len()
            )));
        }
        for z in &self.instruments {
            if self.u.contains(z) {
                return Err(Error::Config(format!("stage {t}: `{z}` is in both u and the instruments")));
            }
        }
        for term in &basis {
            for v in &term.0 {
                if !self.instruments.contains(v) {
                    return Err(Error::Config(format!(
                        "stage {t}: basis term `{term}` reads `{v}`, which is not an instrument"
                    )));
                }
            }
        }
        for v in self.u.iter().chain(&self.instruments) {
            let ok = match v {
                Var::Covariate { stage, .. } | Var::Treatment(stage) => *stage <= t,
                Var::Outcome(stage) => *stage < t,
            };
            if !ok {
                return Err(Error::Config(format!("stage {t}: `{v}` is not part of (H_{t}, A_{t})")));
            }
        }
        Ok(())
    }
}

/// The complete-history units of one stage with their pseudo-outcomes.
#[derive(Debug, Clone)]
pub struct PseudoSlice {
    /// Number of patients in the dataset (the averaging denominator).
    pub n_total: usize,
    /// Dataset rows with `R̄_t = 1`.
    pub rows: Vec<usize>,
    /// Pseudo-outcome for each slice unit (`0.0` where unavailable).
    pub y: Vec<f64>,
    /// Pseudo-outcome availability `r̂_pse`.
    pub r: Vec<bool>,
}

impl PseudoSlice {
    /// Build from per-patient pseudo-outcomes (`None` = unavailable) and the
    /// stage-`t` complete-history mask.
    pub fn new(mask: &[bool], y_pse: &[Option<f64>]) -> Self {
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        PseudoSlice {
            n_total: mask.len(),
            y: rows.iter().map(|&i| y_pse[i].unwrap_or(0.0)).collect(),
            r: rows.iter().map(|&i| y_pse[i].is_some()).collect(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_nonrespondents(&self) -> usize {
        self.r.iter().filter(|&&r| !r).count()
    }

    /// Column-major values of `vars` over the slice units.
    pub fn columns(&self, ds: &Dataset, vars: &[Var]) -> Result<Vec<Vec<f64>>> {
        vars.iter()
            .map(|v| {
                self.rows
                    .iter()
                    .map(|&i| {
                        Row { ds, i }.get(v).ok_or_else(|| Error::MissingFeature {
                            row: i,
                            column: v.to_string(),
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Row-major values of basis terms over the slice units.
    pub fn basis(&self, ds: &Dataset, terms: &[Term]) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .map(|&i| {
                terms
                    .iter()
                    .map(|t| {
                        t.0.iter().try_fold(1.0, |acc, v| {
                            Row { ds, i }.get(v).map(|x| acc * x).ok_or_else(|| Error::MissingFeature {
                                row: i,
                                column: v.to_string(),
                            })
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// IPW weights over all patients from a profiled table: `r̂ 𝕀(R̄_t = 1) / π̂`
/// with `1/π̂` capped. Returns `(weights, pi_hat, clipped)`; `pi_hat` is
/// `None` where the pseudo-outcome is unavailable or the history incomplete.
pub fn ipw_weights(slice: &PseudoSlice, table: &SHatTable, cap: f64) -> (Vec<f64>, Vec<Option<f64>>, usize) {
    let mut w = vec![0.0; slice.n_total];
    let mut pi = vec![None; slice.n_total];
    let mut clipped = 0;
    for (k, &i) in slice.rows.iter().enumerate() {
        if slice.r[k] {
            let p = table.pi(k, slice.y[k]);
            let (inv, c) = clipped_inverse(p, cap);
            clipped += c as usize;
            w[i] = inv;
            pi[i] = Some(p);
        }
    }
    (w, pi, clipped)
}

/// Complete-case weights `r̂ 𝕀(R̄_t = 1)`.
pub fn cc_weights(slice: &PseudoSlice) -> Vec<f64> {
    let mut w = vec![0.0; slice.n_total];
    for (k, &i) in slice.rows.iter().enumerate() {
        if slice.r[k] {
            w[i] = 1.0;
        }
    }
    w
}

/// Search settings for the one-dimensional `γ` minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSearch {
    pub lower: f64,
    pub upper: f64,
    pub grid: usize,
    pub tol: f64,
    /// Interpret the interval on the standardized pseudo-outcome scale.
    pub standardized: bool,
}

impl Default for GammaSearch {
    fn default() -> Self {
        GammaSearch {
            lower: -5.0,
            upper: 5.0,
            grid: 41,
            tol: 1e-4,
            standardized: true,
        }
    }
}

/// Two-step GMM fit of the tilt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EEFit {
    pub stage: usize,
    pub gamma_hat: f64,
    pub first_step_gamma: f64,
    pub weight_matrix: Vec<Vec<f64>>,
    pub objective_first: f64,
    /// Second-step objective at `γ̂`.
    pub objective_second: f64,
    /// Second-step objective evaluated at `γ̂⁽¹⁾`.
    pub objective_second_at_first: f64,
    pub pi_hat: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub clipped: usize,
    pub capped: usize,
    /// `W` was singular and replaced by a pseudo-inverse.
    pub pseudo_inverse: bool,
    /// No nonrespondents: `π̂ ≡ 1` and the moments vanish for every `γ`.
    pub all_respond: bool,
    pub bandwidths: Vec<f64>,
}

/// Precomputed state for evaluating `B(γ)` repeatedly.
pub struct MomentEngine<'a> {
    slice: &'a PseudoSlice,
    profiler: Profiler,
    basis: Vec<Vec<f64>>,
}

impl<'a> MomentEngine<'a> {
    pub fn new(ds: &Dataset, slice: &'a PseudoSlice, inst: &InstrumentSpec, kernel: &KernelConfig) -> Result<Self> {
        inst.check()?;
        if slice.is_empty() {
            return Err(Error::Degenerate(format!("stage {}: no complete-history units", inst.stage)));
        }
        let terms = inst.basis_terms();
        let basis = slice.basis(ds, &terms)?;
        let informative = (0..terms.len()).any(|j| {
            let first = basis[0][j];
            !terms[j].is_intercept() && basis.iter().any(|row| row[j] != first)
        });
        if !informative {
            return Err(Error::UnderIdentified(format!(
                "stage {}: the instrument basis spans only constants",
                inst.stage
            )));
        }
        let u = slice.columns(ds, &inst.u)?;
        let c = kernel.bandwidths_for(&u)?;
        let profiler = Profiler::new(&u, &slice.y, &slice.r, &c)?;
        Ok(MomentEngine { slice, profiler, basis })
    }

    pub fn profiler(&self) -> &Profiler {
        &self.profiler
    }

    /// Per-unit moment contributions `b_k = l(z_k)(r_k/π̂_k − 1)` and the table.
    fn contributions(&self, gamma: f64) -> Result<(Vec<Vec<f64>>, SHatTable)> {
        let table = self.profiler.profile(gamma)?;
        let b = (0..self.slice.len())
            .map(|k| {
                let f = if self.slice.r[k] {
                    1.0 / table.pi(k, self.slice.y[k]) - 1.0
                } else {
                    -1.0
                };
                self.basis[k].iter().map(|l| l * f).collect()
            })
            .collect();
        Ok((b, table))
    }

    /// `B(γ)`, averaged over all `n` patients.
    pub fn moments(&self, gamma: f64) -> Result<Vec<f64>> {
        let (b, _) = self.contributions(gamma)?;
        let l = self.basis[0].len();
        let n = self.slice.n_total as f64;
        let mut out = vec![0.0; l];
        for row in &b {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out.into_iter().map(|v| v / n).collect())
    }

    /// `mean(b bᵀ)` at `γ`.
    pub fn second_moment(&self, gamma: f64) -> Result<DMatrix<f64>> {
        let (b, _) = self.contributions(gamma)?;
        let l = self.basis[0].len();
        let mut s = DMatrix::<f64>::zeros(l, l);
        for row in &b {
            let v = DVector::from_column_slice(row);
            s += &v * v.transpose();
        }
        Ok(s / self.slice.n_total as f64)
    }
}

fn quad(b: &[f64], w: Option<&DMatrix<f64>>) -> f64 {
    let v = DVector::from_column_slice(b);
    match w {
        None => v.dot(&v),
        Some(w) => v.dot(&(w * &v)),
    }
}

/// Inverse of a symmetric PSD matrix, falling back to an eigen pseudo-inverse
/// when it is numerically singular. The flag reports the fallback.
pub fn psd_inverse(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-10 * max.max(f64::MIN_POSITIVE);
    let singular = eig.eigenvalues.iter().any(|&l| l <= tol);
    let inv_vals = eig.eigenvalues.map(|l| if l > tol { 1.0 / l } else { 0.0 });
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    // symmetrize against rounding
    let inv = (&inv + inv.transpose()) * 0.5;
    (inv, singular)
}

/// Grid scan followed by golden-section refinement. Returns `(argmin, min)`.
pub fn minimize_1d(f: &(dyn Fn(f64) -> f64 + Sync), lower: f64, upper: f64, grid: usize, tol: f64) -> Option<(f64, f64)> {
    let grid = grid.max(3);
    let step = (upper - lower) / (grid - 1) as f64;
    let values: Vec<f64> = (0..grid)
        .into_par_iter()
        .map(|k| {
            let v = f(lower + step * k as f64);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let (kbest, vbest) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    if !vbest.is_finite() {
        return None;
    }
    let mut a = lower + step * kbest.saturating_sub(1) as f64;
    let mut b = lower + step * (kbest + 1).min(grid - 1) as f64;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let g = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let (mut fc, mut fd) = (g(c), g(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = g(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = g(x);
    let grid_x = lower + step * kbest as f64;
    Some(if fx <= vbest { (x, fx) } else { (grid_x, vbest) })
}

/// Two-step GMM estimate of `γ_t` and the resulting IPW weights.
pub fn fit_gamma_ee(
    ds: &Dataset,
    slice: &PseudoSlice,
    inst: &InstrumentSpec,
    search: &GammaSearch,
    kernel: &KernelConfig,
) -> Result<EEFit> {
    let engine = MomentEngine::new(ds, slice, inst, kernel)?;
    let l = inst.basis_terms().len();
    if slice.n_nonrespondents() == 0 {
        let table = engine.profiler.profile(0.0)?;
        let (weights, pi_hat, clipped) = ipw_weights(slice, &table, kernel.weight_cap);
        return Ok(EEFit {
            stage: inst.stage,
            gamma_hat: 0.0,
            first_step_gamma: 0.0,
            weight_matrix: vec![vec![0.0; l]; l],
            objective_first: 0.0,
            objective_second: 0.0,
            objective_second_at_first: 0.0,
            pi_hat,
            weights,
            clipped,
            capped: table.capped,
            pseudo_inverse: false,
            all_respond: true,
            bandwidths: engine.profiler.bandwidths.clone(),
        });
    }
    let scale = if search.standardized { engine.profiler.scale } else { 1.0 };
    let (lo, hi) = (search.lower / scale, search.upper / scale);
    let tol = search.tol / scale;

    let obj1 = |g: f64| engine.moments(g).map(|b| quad(&b, None)).unwrap_or(f64::INFINITY);
    let (g1, q1) = minimize_1d(&obj1, lo, hi, search.grid, tol).ok_or(Error::Overflow { gamma: hi })?;

    let (w, pseudo_inverse) = psd_inverse(&engine.second_moment(g1)?);
    let obj2 = |g: f64| engine.moments(g).map(|b| quad(&b, Some(&w))).unwrap_or(f64::INFINITY);
    let (mut g2, mut q2) = minimize_1d(&obj2, lo, hi, search.grid, tol).ok_or(Error::Overflow { gamma: hi })?;
    let q2_at_g1 = obj2(g1);
    if q2_at_g1 < q2 {
        g2 = g1;
        q2 = q2_at_g1;
    }

    let table = engine.profiler.profile(g2)?;
    let (weights, pi_hat, clipped) = ipw_weights(slice, &table, kernel.weight_cap);
    Ok(EEFit {
        stage: inst.stage,
        gamma_hat: g2,
        first_step_gamma: g1,
        weight_matrix: (0..l).map(|r| (0..l).map(|c| w[(r, c)]).collect()).collect(),
        objective_first: q1,
        objective_second: q2,
        objective_second_at_first: q2_at_g1,
        pi_hat,
        weights,
        clipped,
        capped: table.capped,
        pseudo_inverse,
        all_respond: false,
        bandwidths: engine.profiler.bandwidths.clone(),
    })
}

/// The weights of a fitted tilt model, one per patient.
pub fn ipw_weights_ee(fit: &EEFit) -> Vec<f64> {
    fit.weights.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_min() {
        let f = |x: f64| (x - 1.234).powi(2) + 3.0;
        let (x, v) = minimize_1d(&f, -5.0, 5.0, 41, 1e-6).unwrap();
        assert!((x - 1.234).abs() < 1e-5);
        assert!((v - 3.0).abs() < 1e-9);
    }

    #[test]
    fn all_infinite_is_none() {
        let f = |_x: f64| f64::NAN;
        assert!(minimize_1d(&f, -1.0, 1.0, 5, 1e-3).is_none());
    }

    #[test]
    fn pinv_flags_rank_deficiency() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, flag) = psd_inverse(&s);
        assert!(flag);
        // Moore-Penrose: S S⁺ S = S
        let back = &s * &inv * &s;
        assert!((back - s).norm() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (inv, flag) = psd_inverse(&s);
        assert!(!flag);
        assert!((&s * inv - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn basis_must_have_two_functions() {
        let inst = InstrumentSpec::parse(1, &["X1_2"], &[]).unwrap();
        assert!(matches!(inst.check(), Err(Error::UnderIdentified(_))));
    }

    #[test]
    fn instrument_in_u_rejected() {
        let inst = InstrumentSpec::parse(1, &["X1_2"], &["X1_2"]).unwrap();
        assert!(matches!(inst.check(), Err(Error::Config(_))));
    }
}
