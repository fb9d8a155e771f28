//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! out = "results"
//! data = "cohort.csv"          # or a [design] table to simulate one cohort
//!
//! [stages.1]
//! treatment_free = ["1", "X1_1", "X1_2"]
//! blip = ["1", "X1_2"]
//!
//! [method]
//! name = "wq_ee"
//! [[method.instruments]]
//! stage = 1
//! u = ["X1_2", "A1"]
//! z = ["X1_1"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use dtrwql::ee::{GammaSearch, InstrumentSpec};
use dtrwql::inference::BootPlan;
use dtrwql::kernel::KernelConfig;
use dtrwql::linmodel::QSpec;
use dtrwql::qlearn::{Method, MethodConfig, MiConfig};
use dtrwql::sa::CalibrationConfig;
use dtrwql::simbench::Design;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Wide-format CSV to analyse.
    pub data: Option<PathBuf>,
    /// Simulated cohort used when `data` is absent.
    pub design: Option<DesignConfig>,
    /// Q-function terms keyed by stage number.
    #[serde(default)]
    pub stages: BTreeMap<String, StageConfig>,
    pub method: Option<MethodSection>,
    pub bootstrap: Option<BootSection>,
    pub calibrate: Option<CalSection>,
    pub bench: Option<BenchSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub name: String,
    /// `γ_z` for `sim2_gz`, `γ_uy` for `sim2_int`.
    pub param: Option<f64>,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_n() -> usize {
    500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub treatment_free: Vec<String>,
    pub blip: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentConfig {
    pub stage: usize,
    pub u: Vec<String>,
    pub z: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    #[serde(default)]
    pub instruments: Vec<InstrumentConfig>,
    /// `γ′_t` keyed by stage number.
    #[serde(default)]
    pub gamma_prime: BTreeMap<String, f64>,
    pub mi: Option<MiConfig>,
    pub kernel: Option<KernelConfig>,
    pub search: Option<GammaSearch>,
}

/// `m = "auto"` or a fixed resample size.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MSetting {
    Fixed(usize),
    Named(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootSection {
    pub b: Option<usize>,
    pub m: Option<MSetting>,
    pub alpha: Option<f64>,
    pub alpha_grid: Option<Vec<f64>>,
    pub b1: Option<usize>,
    pub b2: Option<usize>,
    pub nu: Option<f64>,
    pub level: Option<f64>,
    pub m_from_complete: Option<bool>,
}

/// A grid as a list or as `start:step:stop`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GridSetting {
    List(Vec<f64>),
    Range(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalSection {
    #[serde(default = "default_stage")]
    pub stage: usize,
    pub grid: Option<GridSetting>,
    pub mcr: Option<usize>,
    pub threshold: Option<f64>,
}

fn default_stage() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub reps: Option<usize>,
    pub n_eval: Option<usize>,
    /// Method labels: `all`, `naive`, `cc`, `mi`, `wq_ee`, `wq_sa:<γ′>`.
    pub methods: Option<Vec<String>>,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// Parse `start:step:stop` (inclusive) or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("grid `{s}`: expected start:step:stop or a comma list"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let (start, step, stop) = (v[0], v[1], v[2]);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=count).map(|k| start + step * k as f64).collect());
    }
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
}

impl GridSetting {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        match self {
            GridSetting::List(v) => Ok(v.clone()),
            GridSetting::Range(s) => parse_grid(s),
        }
    }
}

impl RunConfig {
    pub fn design(&self) -> Result<Option<Design>, CliError> {
        self.design
            .as_ref()
            .map(|d| Design::parse(&d.name, d.param).map_err(CliError::from))
            .transpose()
    }

    /// Q-function specs from `[stages]`, else the simulated design's.
    pub fn qspecs(&self) -> Result<Vec<QSpec>, CliError> {
        if self.stages.is_empty() {
            return match self.design()? {
                Some(d) => Ok(d.qspecs()),
                None => Err(CliError::Config("no [stages] tables and no [design] to take Q-functions from".into())),
            };
        }
        self.stages
            .iter()
            .map(|(k, s)| {
                let t: usize = k.parse().map_err(|_| CliError::Config(format!("stage key `{k}` is not a number")))?;
                let tf: Vec<&str> = s.treatment_free.iter().map(String::as_str).collect();
                let bl: Vec<&str> = s.blip.iter().map(String::as_str).collect();
                QSpec::parse(t, &tf, &bl).map_err(CliError::from)
            })
            .collect()
    }

    /// The `[method]` table as a validated method configuration; `cc` when absent.
    pub fn method(&self, n_stages: usize) -> Result<MethodConfig, CliError> {
        let Some(m) = &self.method else {
            return Ok(MethodConfig::cc());
        };
        let method = Method::parse(&m.name)?;
        let mut cfg = match method {
            Method::All => MethodConfig::all(),
            Method::Naive => MethodConfig::naive(),
            Method::Cc => MethodConfig::cc(),
            Method::Mi => MethodConfig::mi(m.mi.unwrap_or_default()),
            Method::WqEe => {
                let inst = if m.instruments.is_empty() {
                    self.design()?.map(|d| d.instruments()).unwrap_or_default()
                } else {
                    m.instruments
                        .iter()
                        .map(|i| {
                            let u: Vec<&str> = i.u.iter().map(String::as_str).collect();
                            let z: Vec<&str> = i.z.iter().map(String::as_str).collect();
                            InstrumentSpec::parse(i.stage, &u, &z)
                        })
                        .collect::<Result<_, _>>()?
                };
                MethodConfig::wq_ee(inst)
            }
            Method::WqSa => MethodConfig::wq_sa(
                m.gamma_prime
                    .iter()
                    .map(|(k, &g)| {
                        k.parse::<usize>()
                            .map(|t| (t, g))
                            .map_err(|_| CliError::Config(format!("gamma_prime key `{k}` is not a stage number")))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        if method != Method::Mi && m.mi.is_some() {
            return Err(CliError::Config(format!("[method.mi] given for method `{method}`")));
        }
        if method != Method::WqEe && !m.instruments.is_empty() {
            return Err(CliError::Config(format!("`instruments` given for method `{method}`")));
        }
        if method != Method::WqSa && !m.gamma_prime.is_empty() {
            return Err(CliError::Config(format!("`gamma_prime` given for method `{method}`")));
        }
        if let Some(k) = &m.kernel {
            cfg.kernel = k.clone();
        }
        if let Some(s) = &m.search {
            cfg.search = s.clone();
        }
        cfg.validate(n_stages)?;
        Ok(cfg)
    }

    pub fn boot_plan(&self) -> Result<(BootPlan, Option<MSetting>), CliError> {
        let mut plan = BootPlan::default();
        let mut m = None;
        if let Some(b) = &self.bootstrap {
            plan.b = b.b.unwrap_or(plan.b);
            plan.alpha_grid = b.alpha_grid.clone().unwrap_or(plan.alpha_grid);
            plan.b1 = b.b1.unwrap_or(plan.b1);
            plan.b2 = b.b2.unwrap_or(plan.b2);
            plan.nu = b.nu.unwrap_or(plan.nu);
            plan.level = b.level.unwrap_or(plan.level);
            plan.fixed_alpha = b.alpha;
            plan.m_from_complete = b.m_from_complete.unwrap_or(false);
            m = b.m.clone();
        }
        plan.validate()?;
        Ok((plan, m))
    }

    pub fn calibration(&self) -> Result<(usize, CalibrationConfig), CliError> {
        let mut cal = CalibrationConfig::default();
        let mut stage = 1;
        if let Some(c) = &self.calibrate {
            stage = c.stage;
            if let Some(g) = &c.grid {
                cal.grid = g.values()?;
            }
            cal.mcr = c.mcr.unwrap_or(cal.mcr);
            cal.threshold = c.threshold.unwrap_or(cal.threshold);
        }
        Ok((stage, cal))
    }
}

/// A bench method label: a method tag, or `wq_sa:<γ′>` applied to every
/// stage before the last.
pub fn bench_method(label: &str, design: Design) -> Result<MethodConfig, CliError> {
    if let Some(g) = label.strip_prefix("wq_sa:") {
        let g: f64 = g.parse().map_err(|_| CliError::Config(format!("method `{label}`: bad gamma'")))?;
        return Ok(MethodConfig::wq_sa((1..design.n_stages()).map(|t| (t, g))));
    }
    Ok(match Method::parse(label)? {
        Method::All => MethodConfig::all(),
        Method::Naive => MethodConfig::naive(),
        Method::Cc => MethodConfig::cc(),
        Method::Mi => MethodConfig::mi(MiConfig::default()),
        Method::WqEe => MethodConfig::wq_ee(design.instruments()),
        Method::WqSa => return Err(CliError::Config("write wq_sa as `wq_sa:<gamma'>`".into())),
    })
}
