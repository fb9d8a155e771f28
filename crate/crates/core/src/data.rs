//! Longitudinal cohort data with per-cell missingness.
//!
//! A [`Dataset`] is a rectangular, wide-format cohort: one row per patient and,
//! for every stage `t`, a block of covariates `X_t`, a binary treatment `A_t`
//! coded `-1/+1`, and an outcome `Y_t`. Missingness is tracked with a boolean
//! mask parallel to the values; a missing cell never carries a sentinel.
//!
//! Stages are numbered from 1 throughout the public API.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the final response `y_pse,T` is formed from the stage outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalOutcome {
    /// `Y_1 + ... + Y_T`.
    #[default]
    Sum,
    /// `Y_T` only.
    Last,
}

/// One stage of the cohort, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    names: Vec<String>,
    x: Vec<Vec<f64>>,
    x_obs: Vec<Vec<bool>>,
    a: Vec<f64>,
    a_obs: Vec<bool>,
    y: Vec<f64>,
    y_obs: Vec<bool>,
}

impl Stage {
    /// Build a stage from covariate columns with observation masks, a
    /// treatment vector and an outcome vector (both fully observed).
    ///
    /// Values under a `false` mask entry are ignored and stored as `0.0`.
    pub fn new(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        observed: Vec<Vec<bool>>,
        a: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = a.len();
        let stage = Stage {
            a_obs: vec![true; n],
            y_obs: vec![true; y.len()],
            names,
            x: columns,
            x_obs: observed,
            a,
            y,
        };
        stage.check_shape(n)?;
        Ok(stage.scrub())
    }

    /// Like [`Stage::new`] but with explicit masks for treatment and outcome.
    /// Used for raw data that has not been validated yet.
    #[allow(clippy::too_many_arguments)]
    pub fn new_raw(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        observed: Vec<Vec<bool>>,
        a: Vec<f64>,
        a_obs: Vec<bool>,
        y: Vec<f64>,
        y_obs: Vec<bool>,
    ) -> Result<Self> {
        let n = a.len();
        let stage = Stage {
            names,
            x: columns,
            x_obs: observed,
            a,
            a_obs,
            y,
            y_obs,
        };
        stage.check_shape(n)?;
        Ok(stage.scrub())
    }

    fn check_shape(&self, n: usize) -> Result<()> {
        let p = self.names.len();
        if self.x.len() != p || self.x_obs.len() != p {
            return Err(Error::Validation(format!(
                "{} covariate names but {} columns / {} masks",
                p,
                self.x.len(),
                self.x_obs.len()
            )));
        }
        let ragged = self.x.iter().any(|c| c.len() != n)
            || self.x_obs.iter().any(|c| c.len() != n)
            || self.a_obs.len() != n
            || self.y.len() != n
            || self.y_obs.len() != n;
        if ragged {
            return Err(Error::Validation("stage is not rectangular".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if !seen.insert(name) {
                return Err(Error::Validation(format!("duplicate covariate `{name}`")));
            }
        }
        Ok(())
    }

    fn scrub(mut self) -> Self {
        for (col, obs) in self.x.iter_mut().zip(&self.x_obs) {
            for (v, &o) in col.iter_mut().zip(obs) {
                if !o {
                    *v = 0.0;
                }
            }
        }
        self
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Number of covariates `p_t`.
    pub fn p(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Covariate `j` of patient `i`, or `None` when missing.
    pub fn x(&self, j: usize, i: usize) -> Option<f64> {
        self.x_obs[j][i].then(|| self.x[j][i])
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.x[j]
    }

    pub fn observed(&self, j: usize) -> &[bool] {
        &self.x_obs[j]
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a_observed(&self) -> &[bool] {
        &self.a_obs
    }

    pub fn y_observed(&self) -> &[bool] {
        &self.y_obs
    }

    /// `R_t` for patient `i`: every covariate of this stage is present.
    pub fn all_present(&self, i: usize) -> bool {
        self.x_obs.iter().all(|o| o[i])
    }

    fn missing_count(&self, j: usize) -> usize {
        self.x_obs[j].iter().filter(|&&o| !o).count()
    }
}

/// A rectangular longitudinal cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    stages: Vec<Stage>,
    final_outcome: FinalOutcome,
}

impl Dataset {
    /// Build and validate a dataset. Every treatment must be `-1/+1` and every
    /// treatment and outcome cell must be observed.
    pub fn new(ids: Vec<String>, stages: Vec<Stage>) -> Result<Self> {
        let ds = Self::new_unchecked(ids, stages)?;
        let report = validate(&ds);
        if let Some(v) = report.violations.first() {
            return Err(Error::Validation(v.to_string()));
        }
        Ok(ds)
    }

    /// Build a dataset checking only its shape. Content violations are left
    /// for [`validate`] to report.
    pub fn new_unchecked(ids: Vec<String>, stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Validation("a dataset needs at least one stage".into()));
        }
        let n = ids.len();
        if stages.iter().any(|s| s.n() != n) {
            return Err(Error::Validation(
                "all stages must have one entry per patient".into(),
            ));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Dataset {
            ids,
            stages,
            final_outcome: FinalOutcome::Sum,
        })
    }

    pub fn with_final_outcome(mut self, f: FinalOutcome) -> Self {
        self.final_outcome = f;
        self
    }

    pub fn final_outcome_rule(&self) -> FinalOutcome {
        self.final_outcome
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Number of stages `T`.
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Stage `t` (1-based).
    pub fn stage(&self, t: usize) -> Result<&Stage> {
        self.check_stage(t)?;
        Ok(&self.stages[t - 1])
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub(crate) fn stage_mut(&mut self, t: usize) -> &mut Stage {
        &mut self.stages[t - 1]
    }

    pub fn check_stage(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.stages.len() {
            return Err(Error::StageOutOfRange {
                stage: t,
                stages: self.stages.len(),
            });
        }
        Ok(())
    }

    /// `y_pse,T` for patient `i`.
    pub fn final_outcome(&self, i: usize) -> f64 {
        match self.final_outcome {
            FinalOutcome::Sum => self.stages.iter().map(|s| s.y[i]).sum(),
            FinalOutcome::Last => self.stages.last().map(|s| s.y[i]).unwrap_or(0.0),
        }
    }

    /// Indicator of `R̄_t = 1_t` for every patient.
    pub fn complete_upto(&self, t: usize) -> Result<CompleteMask> {
        self.check_stage(t)?;
        let mask = (0..self.n())
            .map(|i| self.stages[..t].iter().all(|s| s.all_present(i)))
            .collect();
        Ok(CompleteMask { stage: t, mask })
    }

    /// True when no covariate cell is missing anywhere.
    pub fn is_fully_observed(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.x_obs.iter().all(|c| c.iter().all(|&o| o)))
    }

    /// `(stage, column)` pairs of covariates with at least one missing cell.
    pub fn partially_observed(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            for j in 0..s.p() {
                if s.missing_count(j) > 0 {
                    out.push((k + 1, j));
                }
            }
        }
        out
    }

    /// A new dataset made of the given rows, in order. Repeated rows get
    /// distinct ids (`<id>#<k>`), so the result is a valid resample.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let mut seen = HashSet::new();
        let ids = rows
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                if seen.insert(r) {
                    self.ids[r].clone()
                } else {
                    format!("{}#{}", self.ids[r], k)
                }
            })
            .collect();
        let pick_f = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let pick_b = |v: &[bool]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let stages = self
            .stages
            .iter()
            .map(|s| Stage {
                names: s.names.clone(),
                x: s.x.iter().map(|c| pick_f(c)).collect(),
                x_obs: s.x_obs.iter().map(|c| pick_b(c)).collect(),
                a: pick_f(&s.a),
                a_obs: pick_b(&s.a_obs),
                y: pick_f(&s.y),
                y_obs: pick_b(&s.y_obs),
            })
            .collect();
        Dataset {
            ids,
            stages,
            final_outcome: self.final_outcome,
        }
    }

    /// Remove the covariate columns for which `drop(stage, name)` is true.
    pub fn drop_covariates(&self, drop: impl Fn(usize, &str) -> bool) -> Dataset {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let keep: Vec<usize> = (0..s.p()).filter(|&j| !drop(k + 1, &s.names[j])).collect();
                Stage {
                    names: keep.iter().map(|&j| s.names[j].clone()).collect(),
                    x: keep.iter().map(|&j| s.x[j].clone()).collect(),
                    x_obs: keep.iter().map(|&j| s.x_obs[j].clone()).collect(),
                    a: s.a.clone(),
                    a_obs: s.a_obs.clone(),
                    y: s.y.clone(),
                    y_obs: s.y_obs.clone(),
                }
            })
            .collect();
        Dataset {
            ids: self.ids.clone(),
            stages,
            final_outcome: self.final_outcome,
        }
    }

    /// Hide covariate cells: `hide(stage, column, row)` true marks the cell missing.
    pub fn mask_covariates(&self, hide: impl Fn(usize, usize, usize) -> bool) -> Dataset {
        let mut out = self.clone();
        for (k, s) in out.stages.iter_mut().enumerate() {
            for j in 0..s.p() {
                for i in 0..s.n() {
                    if hide(k + 1, j, i) {
                        s.x_obs[j][i] = false;
                        s.x[j][i] = 0.0;
                    }
                }
            }
        }
        out
    }

    pub(crate) fn set_covariate(&mut self, t: usize, j: usize, i: usize, v: f64) {
        let s = &mut self.stages[t - 1];
        s.x[j][i] = v;
        s.x_obs[j][i] = true;
    }

    pub(crate) fn set_treatments(&mut self, t: usize, a: Vec<f64>) {
        let s = self.stage_mut(t);
        debug_assert_eq!(a.len(), s.a.len());
        s.a = a;
    }

    pub(crate) fn set_outcomes(&mut self, t: usize, y: Vec<f64>) {
        let s = self.stage_mut(t);
        debug_assert_eq!(y.len(), s.y.len());
        s.y = y;
    }
}

/// `𝕀(R̄_t = 1_t)` for every patient at a given stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompleteMask {
    pub stage: usize,
    pub mask: Vec<bool>,
}

impl CompleteMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Free-function form of [`Dataset::complete_upto`].
pub fn complete_upto(ds: &Dataset, t: usize) -> Result<CompleteMask> {
    ds.complete_upto(t)
}

/// A content problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    TreatmentCoding { stage: usize, row: usize, value: f64 },
    MissingTreatment { stage: usize, row: usize },
    MissingOutcome { stage: usize, row: usize },
    NonFinite { stage: usize, row: usize, column: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TreatmentCoding { stage, row, value } => write!(
                f,
                "A{stage} row {row}: treatment not in {{-1,+1}} (got {value})"
            ),
            Violation::MissingTreatment { stage, row } => {
                write!(f, "A{stage} row {row}: treatment must be fully observed")
            }
            Violation::MissingOutcome { stage, row } => {
                write!(f, "Y{stage} row {row}: outcome must be fully observed")
            }
            Violation::NonFinite { stage, row, column } => {
                write!(f, "stage {stage} row {row}: non-finite value in `{column}`")
            }
        }
    }
}

/// Output of [`validate`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Per stage, `(column name, fraction missing)`.
    pub missing_by_column: Vec<Vec<(String, f64)>>,
    /// Per stage, fraction of patients with `R_t = 0`.
    pub stage_missing: Vec<f64>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Report treatment-coding violations, missing treatment/outcome cells and
/// per-stage missing-covariate proportions. Never fails.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let n = ds.n();
    let mut violations = Vec::new();
    let mut missing_by_column = Vec::new();
    let mut stage_missing = Vec::new();
    for (k, s) in ds.stages.iter().enumerate() {
        let t = k + 1;
        for i in 0..n {
            if !s.a_obs[i] {
                violations.push(Violation::MissingTreatment { stage: t, row: i });
            } else if s.a[i] != 1.0 && s.a[i] != -1.0 {
                violations.push(Violation::TreatmentCoding {
                    stage: t,
                    row: i,
                    value: s.a[i],
                });
            }
            if !s.y_obs[i] {
                violations.push(Violation::MissingOutcome { stage: t, row: i });
            } else if !s.y[i].is_finite() {
                violations.push(Violation::NonFinite {
                    stage: t,
                    row: i,
                    column: format!("Y{t}"),
                });
            }
            for j in 0..s.p() {
                if s.x_obs[j][i] && !s.x[j][i].is_finite() {
                    violations.push(Violation::NonFinite {
                        stage: t,
                        row: i,
                        column: format!("X{t}_{}", s.names[j]),
                    });
                }
            }
        }
        let denom = n.max(1) as f64;
        missing_by_column.push(
            (0..s.p())
                .map(|j| (s.names[j].clone(), s.missing_count(j) as f64 / denom))
                .collect(),
        );
        stage_missing.push((0..n).filter(|&i| !s.all_present(i)).count() as f64 / denom);
    }
    ValidationReport {
        violations,
        missing_by_column,
        stage_missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fig2_dataset() -> Dataset {
        // three patients, two stages; X2_2 missing for patient 3
        let s1 = Stage::new(
            vec!["1".into(), "2".into()],
            vec![vec![0.1, -0.3, 0.7], vec![1.2, 0.4, 1.9]],
            vec![vec![true; 3], vec![true; 3]],
            vec![1.0, -1.0, 1.0],
            vec![2.0, 1.0, 0.5],
        )
        .unwrap();
        let s2 = Stage::new(
            vec!["1".into(), "2".into()],
            vec![vec![0.3, 0.2, -0.1], vec![0.5, 1.1, 0.0]],
            vec![vec![true; 3], vec![true, true, false]],
            vec![1.0, 1.0, -1.0],
            vec![1.0, 0.0, 2.0],
        )
        .unwrap();
        Dataset::new(vec!["p1".into(), "p2".into(), "p3".into()], vec![s1, s2]).unwrap()
    }

    #[test]
    fn mask_follows_missing_cell() {
        let ds = fig2_dataset();
        let m1 = ds.complete_upto(1).unwrap();
        let m2 = ds.complete_upto(2).unwrap();
        assert_eq!(m1.mask, vec![true, true, true]);
        assert_eq!(m2.mask, vec![true, true, false]);
        assert_eq!(m2.count(), 2);
    }

    #[test]
    fn complete_upto_is_cumulative_product() {
        let ds = fig2_dataset().mask_covariates(|t, j, i| t == 1 && j == 0 && i == 1);
        for t in 2..=ds.n_stages() {
            let prev = ds.complete_upto(t - 1).unwrap().mask;
            let cur = ds.complete_upto(t).unwrap().mask;
            let s = ds.stage(t).unwrap();
            for i in 0..ds.n() {
                assert_eq!(cur[i], prev[i] && s.all_present(i));
            }
        }
    }

    #[test]
    fn stage_out_of_range() {
        let ds = fig2_dataset();
        assert!(matches!(
            ds.complete_upto(0),
            Err(Error::StageOutOfRange { .. })
        ));
        assert!(ds.complete_upto(3).is_err());
    }

    #[test]
    fn validate_flags_bad_treatment_and_missing_outcome() {
        let s1 = Stage::new_raw(
            vec![],
            vec![],
            vec![],
            vec![1.0, 0.5],
            vec![true, true],
            vec![0.0, 1.0],
            vec![false, true],
        )
        .unwrap();
        let ds = Dataset::new_unchecked(vec!["a".into(), "b".into()], vec![s1]).unwrap();
        let rep = validate(&ds);
        let msgs: Vec<String> = rep.violations.iter().map(|v| v.to_string()).collect();
        assert!(msgs.iter().any(|m| m.contains("treatment not in {-1,+1}")));
        assert!(msgs.iter().any(|m| m.contains("outcome must be fully observed")));
        assert!(Dataset::new(ds.ids().to_vec(), ds.stages().to_vec()).is_err());
    }

    #[test]
    fn clean_dataset_has_no_violations() {
        let rep = validate(&fig2_dataset());
        assert!(rep.is_clean());
        assert!((rep.stage_missing[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.stage_missing[0], 0.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let ds = fig2_dataset();
        let ids = vec!["p1".into(), "p1".into(), "p3".into()];
        assert!(matches!(
            Dataset::new(ids, ds.stages().to_vec()),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn select_rows_keeps_whole_patients() {
        let ds = fig2_dataset();
        let r = ds.select_rows(&[2, 2, 0]);
        assert_eq!(r.n(), 3);
        assert_eq!(r.stage(2).unwrap().x(1, 0), None);
        assert_eq!(r.stage(2).unwrap().x(1, 1), None);
        assert_eq!(r.stage(1).unwrap().y()[2], 2.0);
        let unique: HashSet<_> = r.ids().iter().collect();
        assert_eq!(unique.len(), 3);
    }
}
