//! Product-kernel smoothing: the profiled log-odds `ŝ_γ(u)`, rule-of-thumb
//! bandwidths, Nadaraya–Watson regression and a 1-D Gaussian KDE.
//!
//! For a tilt `γ`, the profiled nuisance satisfies
//!
//! ```text
//! exp{ŝ_γ(u)} = Σ (1 − rᵢ) K_c(u − uᵢ) / Σ rᵢ exp(γ yᵢ) K_c(u − uᵢ)
//! ```
//!
//! over the complete-history units, and the response probability is
//! `π̂(u, y) = 1 / (1 + exp{ŝ_γ(u)} exp(γ y))`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper cap on `exp{ŝ}`; larger ratios are counted and truncated.
pub const SHAT_CAP: f64 = 1e12;

/// Kernel family. Only the Gaussian is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

/// Smoothing settings shared by the EE and SA weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Fixed bandwidths, one per conditioning column. `None` means rule of thumb.
    pub bandwidths: Option<Vec<f64>>,
    /// Multiplier applied to rule-of-thumb bandwidths.
    pub bandwidth_scale: f64,
    /// Cap on inverse-probability weights `1/π̂`.
    pub weight_cap: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Gaussian,
            bandwidths: None,
            bandwidth_scale: 1.0,
            weight_cap: 50.0,
        }
    }
}

impl KernelConfig {
    /// Bandwidths for the given conditioning columns.
    pub fn bandwidths_for(&self, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        match &self.bandwidths {
            Some(b) => {
                if b.len() != columns.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} bandwidths for {} conditioning columns",
                        b.len(),
                        columns.len()
                    )));
                }
                if b.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
                    return Err(Error::InvalidArgument("bandwidths must be positive".into()));
                }
                Ok(b.clone())
            }
            None => Ok(bandwidth_rot(columns)?
                .into_iter()
                .map(|c| c * self.bandwidth_scale)
                .collect()),
        }
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Rule-of-thumb bandwidths `c_j = 1.06 σ̂_j m^(−1/(4+p))` for column-major
/// data with `m` rows and `p` columns.
pub fn bandwidth_rot(columns: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = columns.len();
    if p == 0 {
        return Ok(Vec::new());
    }
    let m = columns[0].len();
    if m < 2 {
        return Err(Error::InvalidArgument("bandwidth needs at least two rows".into()));
    }
    let rate = (m as f64).powf(-1.0 / (4.0 + p as f64));
    columns
        .iter()
        .enumerate()
        .map(|(j, col)| {
            let s = sample_sd(col);
            if s > 0.0 && s.is_finite() {
                Ok(1.06 * s * rate)
            } else {
                Err(Error::DegenerateBandwidth { column: j })
            }
        })
        .collect()
}

/// `exp{ŝ_γ}` at a set of evaluation units.
///
/// Pseudo-outcomes are centered internally, so `exp_s[i]` pairs with
/// `exp(γ (y − center))`. Use [`SHatTable::pi`] rather than combining the
/// fields by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SHatTable {
    pub gamma: f64,
    pub center: f64,
    pub exp_s: Vec<f64>,
    /// Entries truncated at [`SHAT_CAP`].
    pub capped: usize,
}

impl SHatTable {
    /// `π̂` for unit `i` at pseudo-outcome `y` (original scale).
    pub fn pi(&self, i: usize, y: f64) -> f64 {
        pi_from_shat(self.exp_s[i], self.gamma, y - self.center)
    }

    /// Write `unit, gamma, exp_s` rows for diagnostics.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["unit", "gamma", "exp_s"])?;
        for (i, e) in self.exp_s.iter().enumerate() {
            wr.write_record([i.to_string(), self.gamma.to_string(), e.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `1 / (1 + exp{ŝ} exp(γ y))`.
pub fn pi_from_shat(exp_s: f64, gamma: f64, y: f64) -> f64 {
    let t = exp_s * (gamma * y).exp();
    if t.is_finite() {
        1.0 / (1.0 + t)
    } else {
        0.0
    }
}

/// Inverse-probability weight `1/π̂` truncated at `cap`; the flag reports
/// whether truncation happened.
pub fn clipped_inverse(pi: f64, cap: f64) -> (f64, bool) {
    if pi <= 0.0 || 1.0 / pi > cap {
        (cap, true)
    } else {
        (1.0 / pi, false)
    }
}

fn scaled_sq_dist(a: &[f64], b: &[f64], inv_c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv_c)
        .map(|((x, y), ic)| {
            let d = (x - y) * ic;
            d * d
        })
        .sum()
}

/// Precomputed kernel sums for profiling `ŝ_γ` at the data units.
///
/// The numerator of the ratio does not depend on `γ`, and the denominator is
/// a matrix–vector product against `exp(γ y)`, so each new `γ` costs
/// `O(m · n_resp)`.
#[derive(Debug, Clone)]
pub struct Profiler {
    /// Row-major `m × n_resp` kernel weights to respondents.
    k_resp: Vec<f64>,
    numer: Vec<f64>,
    resp_y: Vec<f64>,
    rows: Vec<Vec<f64>>,
    r: Vec<bool>,
    inv_c: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    pub bandwidths: Vec<f64>,
}

impl Profiler {
    /// `u` is column-major conditioning data for the `m` complete-history
    /// units; `y[i]` is read only where `r[i]`.
    pub fn new(u: &[Vec<f64>], y: &[f64], r: &[bool], bandwidths: &[f64]) -> Result<Self> {
        let m = r.len();
        if y.len() != m || u.iter().any(|c| c.len() != m) || bandwidths.len() != u.len() {
            return Err(Error::InvalidArgument("profiler: dimension mismatch".into()));
        }
        let resp: Vec<usize> = (0..m).filter(|&i| r[i]).collect();
        if resp.is_empty() {
            return Err(Error::NoRespondents);
        }
        let resp_y: Vec<f64> = resp.iter().map(|&i| y[i]).collect();
        let center = resp_y.iter().sum::<f64>() / resp_y.len() as f64;
        let scale = if resp_y.len() > 1 { sample_sd(&resp_y) } else { 0.0 };
        let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
        let resp_y: Vec<f64> = resp_y.iter().map(|v| v - center).collect();

        let rows: Vec<Vec<f64>> = (0..m).map(|i| u.iter().map(|c| c[i]).collect()).collect();
        let inv_c: Vec<f64> = bandwidths.iter().map(|c| 1.0 / c).collect();
        let nr = resp.len();
        let mut k_resp = vec![0.0; m * nr];
        let mut numer = vec![0.0; m];
        let mut d2 = vec![0.0; m];
        for i in 0..m {
            let mut dmin = f64::INFINITY;
            for j in 0..m {
                d2[j] = scaled_sq_dist(&rows[i], &rows[j], &inv_c);
                dmin = dmin.min(d2[j]);
            }
            // shift by the nearest neighbour; common factors cancel in the ratio
            let mut num = 0.0;
            let mut jr = 0;
            for j in 0..m {
                let k = (-0.5 * (d2[j] - dmin)).exp();
                if r[j] {
                    k_resp[i * nr + jr] = k;
                    jr += 1;
                } else {
                    num += k;
                }
            }
            numer[i] = num;
        }
        Ok(Profiler {
            k_resp,
            numer,
            resp_y,
            rows,
            r: r.to_vec(),
            inv_c,
            center,
            scale,
            bandwidths: bandwidths.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.numer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numer.is_empty()
    }

    pub fn n_respondents(&self) -> usize {
        self.resp_y.len()
    }

    pub fn has_nonrespondents(&self) -> bool {
        self.r.iter().any(|&r| !r)
    }

    fn tilt(&self, gamma: f64) -> Result<Vec<f64>> {
        let e: Vec<f64> = self.resp_y.iter().map(|y| (gamma * y).exp()).collect();
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { gamma });
        }
        Ok(e)
    }

    /// `exp{ŝ_γ}` at every data unit (self included in the sums).
    pub fn profile(&self, gamma: f64) -> Result<SHatTable> {
        let e = self.tilt(gamma)?;
        let nr = e.len();
        let mut capped = 0;
        let exp_s = (0..self.len())
            .map(|i| {
                if self.numer[i] == 0.0 {
                    return 0.0;
                }
                let row = &self.k_resp[i * nr..(i + 1) * nr];
                let den: f64 = row.iter().zip(&e).map(|(k, t)| k * t).sum();
                let ratio = self.numer[i] / den;
                if den < 1e-300 || !(ratio <= SHAT_CAP) {
                    capped += 1;
                    SHAT_CAP
                } else {
                    ratio
                }
            })
            .collect();
        Ok(SHatTable {
            gamma,
            center: self.center,
            exp_s,
            capped,
        })
    }

    /// `exp{ŝ_γ}` at arbitrary query points (row-major, same columns as `u`).
    pub fn profile_at(&self, gamma: f64, queries: &[Vec<f64>]) -> Result<SHatTable> {
        let e = self.tilt(gamma)?;
        let mut capped = 0;
        let mut d2 = vec![0.0; self.rows.len()];
        let exp_s = queries
            .iter()
            .map(|q| {
                let mut dmin = f64::INFINITY;
                for (j, row) in self.rows.iter().enumerate() {
                    d2[j] = scaled_sq_dist(q, row, &self.inv_c);
                    dmin = dmin.min(d2[j]);
                }
                let (mut num, mut den, mut jr) = (0.0, 0.0, 0);
                for j in 0..self.rows.len() {
                    let k = (-0.5 * (d2[j] - dmin)).exp();
                    if self.r[j] {
                        den += k * e[jr];
                        jr += 1;
                    } else {
                        num += k;
                    }
                }
                if num == 0.0 {
                    0.0
                } else if den < 1e-300 || !(num / den <= SHAT_CAP) {
                    capped += 1;
                    SHAT_CAP
                } else {
                    num / den
                }
            })
            .collect();
        Ok(SHatTable {
            gamma,
            center: self.center,
            exp_s,
            capped,
        })
    }
}

/// One-shot profile of `exp{ŝ_γ}` at `u_query` (row-major); see [`Profiler`].
pub fn shat_profile(
    gamma: f64,
    u_data: &[Vec<f64>],
    y_pse: &[f64],
    r_pse: &[bool],
    config: &KernelConfig,
    u_query: &[Vec<f64>],
) -> Result<SHatTable> {
    let c = config.bandwidths_for(u_data)?;
    Profiler::new(u_data, y_pse, r_pse, &c)?.profile_at(gamma, u_query)
}

/// Nadaraya–Watson regression with a product Gaussian kernel.
///
/// Columns that are constant in the training data carry no information and
/// are left out of the kernel.
#[derive(Debug, Clone)]
pub struct NadarayaWatson {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    cols: Vec<usize>,
    inv_c: Vec<f64>,
}

impl NadarayaWatson {
    /// Fit on column-major `x` with rule-of-thumb bandwidths.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let m = y.len();
        if m < 2 {
            return Err(Error::InvalidArgument("kernel regression needs at least two points".into()));
        }
        let cols: Vec<usize> = (0..x.len()).filter(|&j| sample_sd(&x[j]) > 0.0).collect();
        let kept: Vec<Vec<f64>> = cols.iter().map(|&j| x[j].clone()).collect();
        let c = if kept.is_empty() { Vec::new() } else { bandwidth_rot(&kept)? };
        let rows = (0..m).map(|i| cols.iter().map(|&j| x[j][i]).collect()).collect();
        Ok(NadarayaWatson {
            rows,
            y: y.to_vec(),
            cols,
            inv_c: c.iter().map(|v| 1.0 / v).collect(),
        })
    }

    /// Predicted mean at a query with the full set of columns.
    pub fn predict(&self, q: &[f64]) -> f64 {
        let q: Vec<f64> = self.cols.iter().map(|&j| q[j]).collect();
        let d2: Vec<f64> = self.rows.iter().map(|r| scaled_sq_dist(&q, r, &self.inv_c)).collect();
        let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let (mut num, mut den) = (0.0, 0.0);
        for (d, y) in d2.iter().zip(&self.y) {
            let k = (-0.5 * (d - dmin)).exp();
            num += k * y;
            den += k;
        }
        num / den
    }
}

/// 1-D Gaussian kernel density estimate with Silverman's rule-of-thumb
/// bandwidth `0.9 min(σ̂, IQR/1.34) n^(−1/5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    values: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Degenerate("density estimate needs at least two values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted[0] == sorted[n - 1] {
            return Err(Error::Degenerate("all values identical; density estimate undefined".into()));
        }
        let s = sample_sd(values);
        let iqr = crate::stats::quantile_sorted(&sorted, 0.75) - crate::stats::quantile_sorted(&sorted, 0.25);
        let mut spread = s.min(iqr / 1.34);
        if !(spread > 0.0) {
            spread = s;
        }
        Ok(Kde {
            values: values.to_vec(),
            bandwidth: 0.9 * spread * (n as f64).powf(-0.2),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * self.values.len() as f64);
        self.values
            .iter()
            .map(|v| (-0.5 * ((x - v) / h).powi(2)).exp())
            .sum::<f64>()
            * norm
    }

    /// One draw: a uniformly chosen value plus `bandwidth · N(0,1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let j = rng.random_range(0..self.values.len());
        let z: f64 = rng.sample(StandardNormal);
        self.values[j] + self.bandwidth * z
    }
}
