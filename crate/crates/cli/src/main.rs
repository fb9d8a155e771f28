//! `dtrwql` command-line interface.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dtrwql::inference::{bootstrap_ci, m_from_alpha, p_nonregu_hat, select_alpha, Target};
use dtrwql::io::{load_csv, save_csv, Schema};
use dtrwql::linmodel::Component;
use dtrwql::qlearn::fit_dtr;
use dtrwql::sa::calibrate_gamma;
use dtrwql::simbench::{generate, run_study, Design, SimDesign};
use dtrwql::stats::RngStream;
use dtrwql::{validate, Dataset};

use config::{bench_method, MSetting, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] dtrwql::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Failed(String),
}

#[derive(Parser)]
#[command(name = "dtrwql", version, about = "Weighted Q-learning for treatment regimes with nonignorable missing covariates")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true, env = "DTRWQL_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated cohorts as CSV, one file per replicate.
    Simulate(SimulateArgs),
    /// Fit a regime to a data file or a simulated cohort.
    Fit(ConfigArgs),
    /// Screen sensitivity values γ′ by simulation.
    Calibrate(CalibrateArgs),
    /// Percentile bootstrap intervals for the blip coefficients.
    Bootstrap(BootstrapArgs),
    /// Monte Carlo comparison of methods on a simulation design.
    Bench(BenchArgs),
    /// Check a data file and report missingness.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// sim1, sim2_gz, sim2_int, sim3 or sim4.
    #[arg(long)]
    design: String,
    /// γ_z for sim2_gz.
    #[arg(long)]
    gz: Option<f64>,
    /// γ_uy for sim2_int.
    #[arg(long)]
    guy: Option<f64>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value = "dtrwql-out")]
    out: PathBuf,
    /// Also write the unmasked cohorts as `full<k>.csv`.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Grid as start:step:stop or a comma list.
    #[arg(long)]
    grid: Option<String>,
    /// Monte Carlo replications per grid value.
    #[arg(long)]
    mcr: Option<usize>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Bootstrap replications.
    #[arg(long = "B", alias = "b")]
    b: Option<usize>,
    /// Resample size for stage-1 targets: a number or `auto`.
    #[arg(long)]
    m: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Optional TOML configuration ([design], [bench], seed, out).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    design: Option<String>,
    /// γ_z or γ_uy for the Simulation 2 variants.
    #[arg(long)]
    param: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Size of the evaluation cohort.
    #[arg(long)]
    n_eval: Option<usize>,
    /// Comma-separated method labels, e.g. `all,cc,wq_ee,wq_sa:1`.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// CSV file to check.
    #[arg(long)]
    data: PathBuf,
    /// Write `validation.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(a) => {
            init_threads(threads)?;
            cmd_simulate(&a, seed.unwrap_or(1))
        }
        Command::Fit(a) => {
            let ctx = Context::new(&a, seed, threads)?;
            cmd_fit(&ctx)
        }
        Command::Calibrate(a) => {
            let mut ctx = Context::new(&a.base, seed, threads)?;
            if let Some(g) = &a.grid {
                ctx.cfg.calibrate.get_or_insert_with(default_cal).grid = Some(config::GridSetting::Range(g.clone()));
            }
            if let Some(m) = a.mcr {
                ctx.cfg.calibrate.get_or_insert_with(default_cal).mcr = Some(m);
            }
            cmd_calibrate(&ctx)
        }
        Command::Bootstrap(a) => {
            let mut ctx = Context::new(&a.base, seed, threads)?;
            let boot = ctx.cfg.bootstrap.get_or_insert_with(default_boot);
            if let Some(b) = a.b {
                boot.b = Some(b);
            }
            if let Some(m) = &a.m {
                boot.m = Some(match m.parse::<usize>() {
                    Ok(v) => MSetting::Fixed(v),
                    Err(_) => MSetting::Named(m.clone()),
                });
            }
            cmd_bootstrap(&ctx)
        }
        Command::Bench(a) => cmd_bench(&a, seed, threads),
        Command::Validate(a) => cmd_validate(&a),
    }
}

fn default_cal() -> config::CalSection {
    config::CalSection {
        stage: 1,
        grid: None,
        mcr: None,
        threshold: None,
    }
}

fn default_boot() -> config::BootSection {
    config::BootSection {
        b: None,
        m: None,
        alpha: None,
        alpha_grid: None,
        b1: None,
        b2: None,
        nu: None,
        level: None,
        m_from_complete: None,
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn create_file(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_manifest(dir: &Path, manifest: &Value) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(path, e))
}

fn design_json(d: Design) -> Value {
    json!({ "design": d.tag(), "param": d.param() })
}

fn cmd_simulate(a: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    let param = match (a.gz, a.guy) {
        (Some(_), Some(_)) => return Err(CliError::Config("give at most one of --gz and --guy".into())),
        (g, u) => g.or(u),
    };
    let design = Design::parse(&a.design, param)?;
    if a.reps == 0 || a.n == 0 {
        return Err(CliError::Config("--n and --reps must be positive".into()));
    }
    create_dir(&a.out)?;
    let root = RngStream::new(seed);
    let mut files = Vec::new();
    for k in 0..a.reps {
        let real = generate(SimDesign { design, n: a.n }, &root.child("rep", k as u64).child("data", 0))?;
        let name = format!("rep{k}.csv");
        save_csv(&real.masked, a.out.join(&name))?;
        files.push(name);
        if a.full {
            let name = format!("full{k}.csv");
            save_csv(&real.full, a.out.join(&name))?;
            files.push(name);
        }
    }
    write_manifest(
        &a.out,
        &json!({
            "command": "simulate",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "design": design_json(design),
            "n": a.n,
            "reps": a.reps,
            "files": files,
        }),
    )
}

/// Loaded configuration with its data.
struct Context {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    data: Dataset,
    source: Value,
}

impl Context {
    fn new(a: &ConfigArgs, seed: Option<u64>, threads: Option<usize>) -> Result<Self, CliError> {
        let cfg = config::load(&a.config)?;
        init_threads(threads.or(cfg.threads))?;
        let seed = seed.or(cfg.seed).unwrap_or(1);
        let out = a.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("dtrwql-out"));
        let (data, source) = match (&cfg.data, cfg.design()?) {
            (Some(path), _) => {
                // relative paths are taken from the config's directory
                let path = match a.config.parent() {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                let (ds, report) = load_csv(&path, &Schema::conventional())?;
                let source = json!({ "data": path.display().to_string(), "recoded_treatments": report.recoded });
                (ds, source)
            }
            (None, Some(d)) => {
                let n = cfg.design.as_ref().map_or(500, |c| c.n);
                let real = generate(SimDesign { design: d, n }, &RngStream::new(seed).child("cohort", 0))?;
                (real.masked, json!({ "simulated": design_json(d), "n": n }))
            }
            (None, None) => return Err(CliError::Config("give `data` or a [design] table".into())),
        };
        Ok(Context { cfg, seed, out, data, source })
    }

    fn manifest(&self, command: &str, extra: Value) -> Value {
        let mut m = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "source": self.source,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
            m.extend(e);
        }
        m
    }
}

fn cmd_fit(ctx: &Context) -> Result<(), CliError> {
    let specs = ctx.cfg.qspecs()?;
    let method = ctx.cfg.method(ctx.data.n_stages())?;
    let fit = fit_dtr(&ctx.data, &specs, &method, &RngStream::new(ctx.seed).child("fit", 0))?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&ctx.out)?;
    fit.write_coefficients(create_file(&ctx.out.join("coefficients.csv"))?)?;
    std::fs::write(ctx.out.join("fit.json"), fit.to_json() + "\n").map_err(|e| CliError::Io(ctx.out.join("fit.json"), e))?;

    // recommended actions wherever the stage features are observed
    let mut wr = csv::Writer::from_writer(create_file(&ctx.out.join("recommendations.csv"))?);
    let stages = fit.n_stages();
    let mut header = vec!["id".to_string()];
    header.extend((1..=stages).map(|t| format!("A{t}")));
    wr.write_record(&header).map_err(dtrwql::Error::from)?;
    for i in 0..ctx.data.n() {
        let mut row = vec![ctx.data.ids()[i].clone()];
        for t in 1..=stages {
            row.push(fit.recommend(&ctx.data, i, t).map_or("NA".to_string(), |a| format!("{a}")));
        }
        wr.write_record(&row).map_err(dtrwql::Error::from)?;
    }
    wr.flush().map_err(|e| CliError::Io(ctx.out.join("recommendations.csv"), e))?;

    let gamma: Vec<Value> = fit
        .stages
        .iter()
        .filter_map(|s| match &s.missingness {
            dtrwql::qlearn::MissSummary::Ee { gamma_hat, .. } => Some(json!({ "stage": s.stage, "gamma_hat": gamma_hat })),
            _ => None,
        })
        .collect();
    write_manifest(
        &ctx.out,
        &ctx.manifest(
            "fit",
            json!({
                "method": method,
                "gamma_hat": gamma,
                "warnings": fit.warnings,
                "files": ["coefficients.csv", "fit.json", "recommendations.csv"],
            }),
        ),
    )
}

fn cmd_calibrate(ctx: &Context) -> Result<(), CliError> {
    let specs = ctx.cfg.qspecs()?;
    let later = ctx.cfg.method(ctx.data.n_stages())?;
    let (stage, cal) = ctx.cfg.calibration()?;
    let res = calibrate_gamma(&ctx.data, &specs, stage, &later, &cal, &RngStream::new(ctx.seed).child("calibrate", 0))?;
    create_dir(&ctx.out)?;
    res.write_csv(create_file(&ctx.out.join("calibration.csv"))?)?;
    if res.non_convex {
        eprintln!("warning: the plausible set is not an interval");
    }
    write_manifest(
        &ctx.out,
        &ctx.manifest(
            "calibrate",
            json!({
                "stage": stage,
                "later_method": later.method,
                "mcr": cal.mcr,
                "threshold": cal.threshold,
                "plausible_hull": res.hull,
                "non_convex": res.non_convex,
                "files": ["calibration.csv"],
            }),
        ),
    )
}

fn cmd_bootstrap(ctx: &Context) -> Result<(), CliError> {
    let specs = ctx.cfg.qspecs()?;
    let method = ctx.cfg.method(ctx.data.n_stages())?;
    let (plan, m_setting) = ctx.cfg.boot_plan()?;
    let stream = RngStream::new(ctx.seed);
    let n = ctx.data.n();
    let targets = Target::all_blips(&specs);
    let mut info = json!({ "method": method.method, "B": plan.b });
    let m = match m_setting {
        Some(MSetting::Fixed(m)) => m,
        None => n,
        Some(MSetting::Named(s)) if s == "n" => n,
        Some(MSetting::Named(s)) if s == "auto" => {
            let p_hat = p_nonregu_hat(&ctx.data, &specs, &method, plan.nu)?;
            let alpha = match plan.fixed_alpha {
                Some(a) => a,
                None => {
                    let first = specs.iter().find(|q| q.stage == 1).ok_or_else(|| CliError::Config("no stage-1 spec".into()))?;
                    let target = Target::coefficient(first, Component::Blip, 0)?;
                    let sel = select_alpha(&ctx.data, &specs, &method, &plan, &target, &stream.child("alpha", 0))?;
                    info["alpha_coverage"] = json!(sel.coverage);
                    info["alpha_dropped"] = json!(sel.dropped);
                    sel.alpha
                }
            };
            let n_eff = if plan.m_from_complete { ctx.data.complete_upto(2)?.count() } else { n };
            info["p_nonregu"] = json!(p_hat);
            info["alpha"] = json!(alpha);
            m_from_alpha(n_eff, alpha, p_hat).min(n)
        }
        Some(MSetting::Named(s)) => return Err(CliError::Config(format!("m = `{s}`: expected a number, `n` or `auto`"))),
    };
    info["m"] = json!(m);
    let res = bootstrap_ci(&ctx.data, &specs, &method, plan.b, m, &targets, &stream.child("bootstrap", 0))?;
    create_dir(&ctx.out)?;
    res.write_csv(create_file(&ctx.out.join("bootstrap.csv"))?)?;
    info["failures"] = json!(res.failures);
    info["files"] = json!(["bootstrap.csv"]);
    write_manifest(&ctx.out, &ctx.manifest("bootstrap", info))
}

fn cmd_bench(a: &BenchArgs, seed: Option<u64>, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    init_threads(threads.or(cfg.threads))?;
    let seed = seed.or(cfg.seed).unwrap_or(1);
    let design = match &a.design {
        Some(tag) => Design::parse(tag, a.param)?,
        None => cfg.design()?.ok_or_else(|| CliError::Config("bench needs --design or a [design] table".into()))?,
    };
    let n = a.n.or(cfg.design.as_ref().map(|d| d.n)).unwrap_or(500);
    let bench = cfg.bench.clone();
    let reps = a.reps.or(bench.as_ref().and_then(|b| b.reps)).unwrap_or(100);
    let n_eval = a.n_eval.or(bench.as_ref().and_then(|b| b.n_eval)).unwrap_or(100_000);
    let labels: Option<Vec<String>> = match &a.methods {
        Some(s) => Some(s.split(',').map(|m| m.trim().to_string()).collect()),
        None => bench.and_then(|b| b.methods),
    };
    let methods = match labels {
        Some(l) => l.iter().map(|m| bench_method(m, design)).collect::<Result<Vec<_>, _>>()?,
        None => design.default_methods(),
    };
    let out = a.out.clone().or(cfg.out).unwrap_or_else(|| PathBuf::from("dtrwql-out"));
    let table = run_study(SimDesign { design, n }, &methods, reps, n_eval, &RngStream::new(seed), Some(&out))?;
    let failures: Vec<Value> = table.rows.iter().map(|r| json!({ "method": r.method, "failures": r.failures, "fallbacks": r.fallbacks })).collect();
    write_manifest(
        &out,
        &json!({
            "command": "bench",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "design": design_json(design),
            "n": n,
            "reps": reps,
            "n_eval": n_eval,
            "methods": table.rows.iter().map(|r| r.method.clone()).collect::<Vec<_>>(),
            "failures": failures,
            "files": ["study.csv", "replicates.csv"],
        }),
    )?;
    // a study is valid only with under 1% failed replicates per method
    let worst = table.rows.iter().map(|r| r.failures).max().unwrap_or(0);
    if worst * 100 >= reps && worst > 0 {
        return Err(CliError::Failed(format!("{worst} of {reps} replicates failed for at least one method")));
    }
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), CliError> {
    let (ds, load) = load_csv(&a.data, &Schema::conventional())?;
    let report = validate(&ds);
    println!("patients {}  stages {}", ds.n(), ds.n_stages());
    for (t, cols) in report.missing_by_column.iter().enumerate() {
        let parts: Vec<String> = cols.iter().map(|(c, f)| format!("X{}_{c} {:.3}", t + 1, f)).collect();
        println!("stage {}: incomplete {:.3}  [{}]", t + 1, report.stage_missing[t], parts.join(", "));
    }
    if load.total_recoded() > 0 {
        println!("recoded {} treatment cells from 0/1", load.total_recoded());
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("validation.json");
        let text = serde_json::to_string_pretty(&json!({ "report": report, "recoded": load.recoded })).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(path, e))?;
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} violation(s)", report.violations.len())))
    }
}
