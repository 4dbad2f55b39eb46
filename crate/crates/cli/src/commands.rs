use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use didlab::aggregate::{
    event_study, event_study_balanced, normal_quantile, AggregationWeights, EventStudyCurve, EventStudyPoint, Interval,
};
use didlab::diagnostics::{bacon_two_period, balance_table, twfe_fit, DiagnosticsError};
use didlab::inference::{attach_bands, pretrend_joint_test, sensitivity_bounds, InferenceError};
use didlab::panel::{load_panel, normalize_groups, write_panel, BalanceReport, PanelDataset, PanelError};
use didlab::simulate::{simulate_staggered, DgpConfig, SimulateError};
use didlab::staggered::{att_gt, AttGtSettings, GroupTimeTable, StaggeredError};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::canonical::to_canonical_string;
use crate::config::{Resolved, RunConfig};
use crate::render::render_event_study;
use crate::CliError;

/// Version of the layout of every emitted JSON document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "didlab", version, about = "Difference-in-differences estimation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Panel CSV in long format
    #[arg(long)]
    input: Option<PathBuf>,
    /// TOML run configuration; flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Column holding time-invariant sampling weights
    #[arg(long)]
    weights: Option<String>,
    /// Column holding cluster identifiers
    #[arg(long)]
    cluster: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    unit_col: Option<String>,
    #[arg(long)]
    period_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    /// Column with the first treated period
    #[arg(long)]
    group_col: Option<String>,
    /// Value of the group column marking never-treated units
    #[arg(long, allow_hyphen_values = true)]
    never_value: Option<i64>,
    /// Comma-separated covariate columns
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

#[derive(Args, Default)]
struct Estimation {
    /// means, ra, ipw or dr
    #[arg(long)]
    estimator: Option<String>,
    /// never, not_yet or all_periods
    #[arg(long)]
    assumption: Option<String>,
    /// base or base_and_target
    #[arg(long)]
    covariate_timing: Option<String>,
    /// Skip pre-treatment cells
    #[arg(long)]
    no_pretrends: bool,
    /// Balanced event-time window `a:b`
    #[arg(long, allow_hyphen_values = true)]
    window: Option<String>,
}

#[derive(Args, Default)]
struct Bootstrap {
    /// Number of multiplier bootstrap draws
    #[arg(long)]
    boot: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// rademacher or mammen
    #[arg(long)]
    multiplier: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Group-time effects, event study, bands and pre-trend test
    Attgt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        estimation: Estimation,
        #[command(flatten)]
        bootstrap: Bootstrap,
    },
    /// Event-study curve with simultaneous bands
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        estimation: Estimation,
        #[command(flatten)]
        bootstrap: Bootstrap,
    },
    /// Covariate balance between newly treated and comparison units
    Balance {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        pre: Option<i64>,
        #[arg(long, allow_hyphen_values = true)]
        post: Option<i64>,
    },
    /// Two-way fixed-effects regressions
    Twfe {
        #[command(flatten)]
        common: Common,
        /// static, dynamic_2xT or saturated_SA
        #[arg(long)]
        spec: Option<String>,
    },
    /// Decomposition of the two-period TWFE coefficient
    Bacon {
        #[command(flatten)]
        common: Common,
    },
    /// Bounds under limited post-treatment violations of parallel trends
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        estimation: Estimation,
        /// Read the curve from an event-study JSON instead of a panel
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        target_e: Option<i64>,
        #[arg(long)]
        mbar: Option<f64>,
        /// max_pre_step or absolute
        #[arg(long)]
        benchmark: Option<String>,
        /// Scale the budget with the number of post periods
        #[arg(long)]
        cumulate: bool,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Draw a synthetic staggered panel from a TOML design
    Simulate {
        /// TOML data-generating design
        #[arg(long)]
        config: PathBuf,
        /// Output CSV (default `<out-dir>/sim.csv`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output JSON of true effects (default next to the CSV)
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        never_value: Option<i64>,
    },
}

fn parse_window(s: &str) -> Result<[i64; 2], CliError> {
    let bad = || CliError::Usage(format!("window must look like `a:b`, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
}

impl Common {
    fn into_config(self) -> Result<(RunConfig, Option<PathBuf>), CliError> {
        let mut c = RunConfig {
            input: self.input,
            out_dir: self.out_dir,
            threads: self.threads,
            seed: self.seed,
            ..Default::default()
        };
        c.schema.unit = self.unit_col;
        c.schema.period = self.period_col;
        c.schema.outcome = self.outcome_col;
        c.schema.first_treat = self.group_col;
        c.schema.weight = self.weights;
        c.schema.cluster = self.cluster;
        c.schema.never_value = self.never_value;
        c.schema.covariates =
            self.covariates.map(|v| v.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
        Ok((c, self.config))
    }
}

impl Estimation {
    fn apply(self, c: &mut RunConfig) -> Result<(), CliError> {
        c.estimator = self.estimator;
        c.assumption = self.assumption;
        c.covariate_timing = self.covariate_timing;
        if self.no_pretrends {
            c.include_pretrends = Some(false);
        }
        c.window = self.window.as_deref().map(parse_window).transpose()?;
        Ok(())
    }
}

impl Bootstrap {
    fn apply(self, c: &mut RunConfig) {
        c.bootstrap.draws = self.boot;
        c.bootstrap.level = self.level;
        c.bootstrap.multiplier = self.multiplier;
    }
}

fn resolve(flags: RunConfig, file: Option<PathBuf>) -> Result<Resolved, CliError> {
    let merged = match file {
        Some(path) => flags.overlay(RunConfig::from_file(&path)?),
        None => flags,
    };
    merged.resolve()
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(written) => {
            for path in written {
                log::info!("wrote {}", path.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_threads<T>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

fn dispatch(command: Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::Attgt { common, estimation, bootstrap } => {
            let (mut flags, file) = common.into_config()?;
            estimation.apply(&mut flags)?;
            bootstrap.apply(&mut flags);
            let cfg = resolve(flags, file)?;
            with_threads(cfg.threads, || cmd_attgt(&cfg, true))?
        }
        Command::Aggregate { common, estimation, bootstrap } => {
            let (mut flags, file) = common.into_config()?;
            estimation.apply(&mut flags)?;
            bootstrap.apply(&mut flags);
            let cfg = resolve(flags, file)?;
            with_threads(cfg.threads, || cmd_attgt(&cfg, false))?
        }
        Command::Balance { common, pre, post } => {
            let (mut flags, file) = common.into_config()?;
            flags.balance.pre = pre;
            flags.balance.post = post;
            let cfg = resolve(flags, file)?;
            with_threads(cfg.threads, || cmd_balance(&cfg))?
        }
        Command::Twfe { common, spec } => {
            let (mut flags, file) = common.into_config()?;
            flags.specification = spec;
            let cfg = resolve(flags, file)?;
            with_threads(cfg.threads, || cmd_twfe(&cfg))?
        }
        Command::Bacon { common } => {
            let (flags, file) = common.into_config()?;
            let cfg = resolve(flags, file)?;
            with_threads(cfg.threads, || cmd_bacon(&cfg))?
        }
        Command::Sensitivity { common, estimation, curve, target_e, mbar, benchmark, cumulate, level } => {
            let (mut flags, file) = common.into_config()?;
            estimation.apply(&mut flags)?;
            flags.sensitivity.target_e = target_e;
            flags.sensitivity.mbar = mbar;
            flags.sensitivity.benchmark = benchmark;
            if cumulate {
                flags.sensitivity.cumulate = Some(true);
            }
            flags.bootstrap.level = level;
            let cfg = resolve(flags, file)?;
            with_threads(cfg.threads, || cmd_sensitivity(&cfg, curve.as_deref()))?
        }
        Command::Simulate { config, out, truth, seed, threads, out_dir, never_value } => {
            if threads == Some(0) {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            let job = SimulateJob {
                config,
                out,
                truth,
                seed,
                out_dir: out_dir.unwrap_or_else(|| PathBuf::from(".")),
                never_value: never_value.unwrap_or(0),
            };
            with_threads(threads, || cmd_simulate(&job))?
        }
    }
}

// ---- error classification ----

fn panel_error(e: PanelError) -> CliError {
    CliError::Input(e.to_string())
}

fn staggered_error(e: StaggeredError) -> CliError {
    match e {
        StaggeredError::MissingCovariates(_) | StaggeredError::PooledWithCovariates => CliError::Usage(e.to_string()),
        _ => CliError::Estimation(e.to_string()),
    }
}

fn diagnostics_error(e: DiagnosticsError) -> CliError {
    match e {
        DiagnosticsError::RankDeficient | DiagnosticsError::NoTreatment => CliError::Estimation(e.to_string()),
        DiagnosticsError::Staggered(s) => staggered_error(s),
        _ => CliError::Input(e.to_string()),
    }
}

fn inference_error(e: InferenceError) -> CliError {
    match e {
        InferenceError::MissingEventTime(_)
        | InferenceError::PreTreatmentTarget(_)
        | InferenceError::NegativeBound(_)
        | InferenceError::InvalidLevel(_)
        | InferenceError::TooFewDraws(_) => CliError::Usage(e.to_string()),
        _ => CliError::Estimation(e.to_string()),
    }
}

fn estimation(e: impl std::fmt::Display) -> CliError {
    CliError::Estimation(e.to_string())
}

// ---- input and output ----

fn load(cfg: &Resolved, uses_covariates: bool) -> Result<PanelDataset, CliError> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let mut schema = cfg.schema.clone();
    if !uses_covariates && schema.covariates.is_none() {
        // Leave unrelated columns alone so they need not be numeric.
        schema.covariates = Some(Vec::new());
    }
    load_panel(BufReader::new(file), &schema).map_err(panel_error)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, doc: Value) -> Result<PathBuf, CliError> {
    write_text(dir, name, &to_canonical_string(&doc))
}

fn value<T: serde::Serialize>(x: &T) -> Result<Value, CliError> {
    serde_json::to_value(x).map_err(|e| CliError::Output(e.to_string()))
}

fn document(command: &str, cfg: &Resolved, body: Vec<(&str, Value)>) -> Result<Value, CliError> {
    let mut doc = json!({ "schema_version": SCHEMA_VERSION, "command": command, "settings": value(cfg)? });
    for (k, v) in body {
        doc[k] = v;
    }
    Ok(doc)
}

// ---- commands ----

fn staggered_pipeline(cfg: &Resolved) -> Result<(GroupTimeTable, BalanceReport), CliError> {
    let data = load(cfg, cfg.estimator.uses_covariates())?;
    let (data, report) = normalize_groups(&data).map_err(panel_error)?;
    if !report.is_empty() {
        log::warn!(
            "panel normalized: {} units dropped, periods {:?} dropped, cohorts {:?} recoded as never treated",
            report.dropped_units.len(),
            report.dropped_periods,
            report.recoded_groups
        );
    }
    let settings = AttGtSettings {
        assumption: cfg.assumption,
        estimator: cfg.estimator,
        include_pretrends: cfg.include_pretrends,
        covariate_timing: cfg.covariate_timing,
        ..Default::default()
    };
    let table = att_gt(&data, &settings).map_err(staggered_error)?;
    Ok((table, report))
}

fn curve_of(table: &GroupTimeTable, cfg: &Resolved) -> Result<EventStudyCurve, CliError> {
    match cfg.window {
        Some(w) => event_study_balanced(table, w),
        None => event_study(table),
    }
    .map_err(estimation)
}

fn cmd_attgt(cfg: &Resolved, with_table: bool) -> Result<Vec<PathBuf>, CliError> {
    let (table, report) = staggered_pipeline(cfg)?;
    let mut curve = curve_of(&table, cfg)?;
    let bands = attach_bands(&mut curve, cfg.bootstrap).map_err(inference_error)?;
    let mut written = Vec::new();
    let command = if with_table { "attgt" } else { "aggregate" };
    if with_table {
        let pretrend = match pretrend_joint_test(&table) {
            Ok(t) => value(&t)?,
            Err(e) => {
                log::warn!("pre-trend test unavailable: {e}");
                Value::Null
            }
        };
        let doc = document(
            command,
            cfg,
            vec![("panel", value(&report)?), ("group_time", value(&table)?), ("pretrend_test", pretrend)],
        )?;
        written.push(write_json(&cfg.out_dir, "attgt.json", doc)?);
    }
    let doc = document(command, cfg, vec![("event_study", value(&curve)?), ("bands", value(&bands)?)])?;
    written.push(write_json(&cfg.out_dir, "event_study.json", doc)?);
    written.push(write_text(&cfg.out_dir, "event_study.svg", &render_event_study(&curve))?);
    Ok(written)
}

fn default_balance_periods(data: &PanelDataset) -> Result<(i64, i64), CliError> {
    let first = data
        .treated_cohorts()
        .into_iter()
        .min()
        .ok_or_else(|| CliError::Input("no treated cohort to define balance periods".into()))?;
    let t = data.period_index(first).unwrap_or(0);
    if t == 0 {
        return Err(CliError::Input(format!("earliest cohort {first} has no pre-period; pass --pre and --post")));
    }
    Ok((data.periods()[t - 1], first))
}

fn cmd_balance(cfg: &Resolved) -> Result<Vec<PathBuf>, CliError> {
    let data = load(cfg, true)?;
    let (pre, post) = match cfg.balance_periods {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let (dp, dq) = default_balance_periods(&data)?;
            (a.unwrap_or(dp), b.unwrap_or(dq))
        }
    };
    let table = balance_table(&data, pre, post, cfg.schema.weight.is_some()).map_err(diagnostics_error)?;
    let flagged: Vec<&str> = table.differences.iter().filter(|r| r.flagged()).map(|r| r.variable.as_str()).collect();
    let doc = document("balance", cfg, vec![("balance", value(&table)?), ("flagged", value(&flagged)?)])?;
    Ok(vec![
        write_json(&cfg.out_dir, "balance.json", doc)?,
        write_text(&cfg.out_dir, "balance.md", &table.to_markdown())?,
    ])
}

fn cmd_twfe(cfg: &Resolved) -> Result<Vec<PathBuf>, CliError> {
    let data = load(cfg, false)?;
    let fit = twfe_fit(&data, cfg.specification, cfg.schema.weight.is_some()).map_err(diagnostics_error)?;
    let doc = document("twfe", cfg, vec![("twfe", value(&fit)?)])?;
    Ok(vec![write_json(&cfg.out_dir, "twfe.json", doc)?])
}

fn cmd_bacon(cfg: &Resolved) -> Result<Vec<PathBuf>, CliError> {
    let data = load(cfg, false)?;
    let d = bacon_two_period(&data, cfg.schema.weight.is_some()).map_err(diagnostics_error)?;
    let reconstructed = d.reconstructed();
    let doc = document(
        "bacon",
        cfg,
        vec![
            ("bacon", value(&d)?),
            ("reconstructed", json!(reconstructed)),
            ("reconstruction_error", json!((reconstructed - d.beta_twfe).abs())),
        ],
    )?;
    Ok(vec![write_json(&cfg.out_dir, "bacon.json", doc)?])
}

#[derive(Deserialize)]
struct PointInput {
    event_time: i64,
    estimate: f64,
    se: f64,
}

/// Accepts an `event_study.json` document or a bare `{"points": [...]}`.
fn read_curve(path: &Path, level: f64) -> Result<EventStudyCurve, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let doc: Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let points = doc
        .get("event_study")
        .unwrap_or(&doc)
        .get("points")
        .ok_or_else(|| CliError::Input(format!("{}: no `points` array", path.display())))?;
    let mut points: Vec<PointInput> =
        serde_json::from_value(points.clone()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if points.is_empty() {
        return Err(CliError::Input(format!("{}: curve has no points", path.display())));
    }
    points.sort_by_key(|p| p.event_time);
    let z = normal_quantile(level);
    let window = (points[0].event_time, points[points.len() - 1].event_time);
    Ok(EventStudyCurve {
        points: points
            .into_iter()
            .map(|p| EventStudyPoint {
                event_time: p.event_time,
                estimate: p.estimate,
                se: p.se,
                pointwise: Interval::around(p.estimate, z * p.se),
                simultaneous: None,
                influence: Vec::new(),
            })
            .collect(),
        overall: None,
        weights: AggregationWeights::default(),
        window,
        balanced: false,
        level,
        n_units: 0,
        clusters: Vec::new(),
    })
}

fn cmd_sensitivity(cfg: &Resolved, curve_path: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let curve = match curve_path {
        Some(p) => read_curve(p, cfg.sensitivity.level)?,
        None => {
            let mut cfg = cfg.clone();
            cfg.include_pretrends = true;
            let (table, _) = staggered_pipeline(&cfg)?;
            curve_of(&table, &cfg)?
        }
    };
    let result = sensitivity_bounds(&curve, cfg.sensitivity).map_err(inference_error)?;
    let source = curve_path.map_or(Value::Null, |p| json!(p.display().to_string()));
    let doc = document("sensitivity", cfg, vec![("sensitivity", value(&result)?), ("curve_source", source)])?;
    Ok(vec![write_json(&cfg.out_dir, "sensitivity.json", doc)?])
}

struct SimulateJob {
    config: PathBuf,
    out: Option<PathBuf>,
    truth: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: PathBuf,
    never_value: i64,
}

fn simulate_error(e: SimulateError) -> CliError {
    match e {
        SimulateError::InvalidConfig(_) | SimulateError::Parse(_) => CliError::Usage(e.to_string()),
        _ => CliError::Estimation(e.to_string()),
    }
}

fn cmd_simulate(job: &SimulateJob) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(&job.config)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", job.config.display())))?;
    let mut dgp = DgpConfig::from_toml(&text).map_err(simulate_error)?;
    if let Some(seed) = job.seed {
        dgp.seed = seed;
    }
    let (data, truth) = simulate_staggered(&dgp).map_err(simulate_error)?;
    let out = job.out.clone().unwrap_or_else(|| job.out_dir.join("sim.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
    }
    let file = File::create(&out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
    let mut sink = BufWriter::new(file);
    write_panel(&data, &mut sink, job.never_value).map_err(|e| CliError::Output(e.to_string()))?;
    sink.flush().map_err(|e| CliError::Output(e.to_string()))?;

    let truth_path = job.truth.clone().unwrap_or_else(|| {
        let stem = out.file_stem().map_or_else(|| "sim".into(), |s| s.to_string_lossy().into_owned());
        out.with_file_name(format!("{stem}_truth.json"))
    });
    let doc = json!({ "schema_version": SCHEMA_VERSION, "command": "simulate", "config": value(&dgp)?, "truth": value(&truth)? });
    let dir = truth_path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = truth_path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("invalid truth path {}", truth_path.display())))?;
    let truth_written = write_json(dir, &name.to_string_lossy(), doc)?;
    Ok(vec![out, truth_written])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_parse_with_negative_bounds() {
        assert_eq!(parse_window("-4:5").unwrap(), [-4, 5]);
        assert!(parse_window("4").is_err());
        assert!(parse_window("a:b").is_err());
    }

    #[test]
    fn help_exits_cleanly_and_unknown_flags_fail() {
        assert_eq!(run(["didlab", "--help"]), 0);
        assert_eq!(run(["didlab", "attgt", "--bogus"]), 2);
        assert_eq!(run(["didlab"]), 2);
    }
}
