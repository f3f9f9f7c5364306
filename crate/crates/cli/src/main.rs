//! Command-line front end for the speed-climbing analytics library.
//!
//! Subcommands cover the full pipeline: `validate` and `describe` for input
//! checking and descriptive tables, `fit`/`ladder`/`falls` for model
//! estimation and comparison, `ranges` for consistency plot data, and
//! `simulate`/`recover` for seeded generative studies.
//!
//! Every command is deterministic: identical inputs and settings produce
//! byte-identical outputs. Exit codes: 0 on success, 1 for input or
//! validation problems, 2 when an estimation run fails to converge.

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use speedclimb::data::Dataset;
use speedclimb::design::ModelSpec;
use speedclimb::ingest;
use speedclimb::mixed::{
    compare_ladder, fit_binomial, fit_model_rows, Criterion, GlmmError, LmmError,
};
use speedclimb::preprocess::{build_fall_rows, build_model_rows, write_model_rows, write_scaling};
use speedclimb::report;
use speedclimb::simulate::{
    recovery_report_for, simulate_competition, SimulationParams, SkipAdoption,
};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "speedclimb",
    version,
    about = "Speed-climbing competition analytics: descriptive tables, mixed models, simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Input/output flags shared by every subcommand. Paths left unset fall back
/// to the matching key in the `--config` file.
#[derive(Args, Default)]
struct IoArgs {
    /// Competition results CSV (one attempt per row)
    #[arg(long, value_name = "FILE")]
    results: Option<PathBuf>,

    /// Climber registry CSV with dates of birth
    #[arg(long, value_name = "FILE")]
    climbers: Option<PathBuf>,

    /// Skip-technique observations CSV
    #[arg(long, value_name = "FILE")]
    skips: Option<PathBuf>,

    /// Directory for emitted files (created if missing)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Settings file with `key = value` lines; flags take precedence
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the input files for structural violations
    Validate {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Write descriptive tables and plot data (fall/false-start rates,
    /// events per year, skip usage, time ranges)
    Describe {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Fit one model and write its summary
    Fit {
        #[command(flatten)]
        io: IoArgs,
        /// Model name (M0, M1, M2, M3, M4); default M3
        #[arg(long)]
        model: Option<String>,
        /// Objective: ML or REML; default REML
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Fit the model ladder under ML and compare by BIC and sequential tests
    Ladder {
        #[command(flatten)]
        io: IoArgs,
        /// Significance level for the sequential tests; default 0.01
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Fit the binomial fall-rate model and write its summary
    Falls {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Write per-(climber, event) time ranges with year and skip status
    Ranges {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Generate a seeded synthetic competition dataset
    Simulate {
        #[command(flatten)]
        io: IoArgs,
        /// RNG seed (overrides the config file)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a seeded parameter-recovery study on simulated data
    Recover {
        #[command(flatten)]
        io: IoArgs,
        /// RNG seed (overrides the config file)
        #[arg(long)]
        seed: Option<u64>,
        /// Number of simulated replicates; default 50
        #[arg(long)]
        replicates: Option<usize>,
        /// Model to refit on each replicate; default M3
        #[arg(long)]
        model: Option<String>,
    },
}

/// Keys accepted in a `--config` file. Anything else is rejected so typos
/// fail loudly instead of silently keeping a default.
const CONFIG_KEYS: &[&str] = &[
    "results", "climbers", "skips", "out", "model", "criterion", "alpha", "seed", "replicates",
    "n_climbers", "n_events", "attendance_prob", "gender_split", "adoption_rate", "switch_back",
    "sigma2", "gamma0", "gamma1", "gamma2", "gamma3", "gamma4", "eta00", "eta01", "eta11",
    "tau00", "tau01", "tau11",
];

/// Parsed `key = value` settings. Lines starting with `#` and blank lines
/// are skipped; keys must be unique and drawn from [`CONFIG_KEYS`].
#[derive(Debug, Default)]
struct Settings {
    entries: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                bail!("{}:{}: unknown config key `{key}`", path.display(), i + 1);
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                bail!("{}:{}: duplicate config key `{key}`", path.display(), i + 1);
            }
        }
        Ok(Settings { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}")),
        }
    }
}

/// Flag-over-config resolution of the shared I/O arguments.
struct Run {
    io: IoArgs,
    settings: Settings,
}

impl Run {
    fn new(mut io: IoArgs) -> Result<Self> {
        let settings = match io.config.take() {
            Some(path) => Settings::load(&path)?,
            None => Settings::default(),
        };
        Ok(Run { io, settings })
    }

    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.settings.get(key).map(PathBuf::from))
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let require = |flag: &Option<PathBuf>, key: &str| {
            self.path(flag, key)
                .ok_or_else(|| anyhow!("missing input: pass --{key} or set `{key}` in the config"))
        };
        let results = require(&self.io.results, "results")?;
        let climbers = require(&self.io.climbers, "climbers")?;
        let skips = require(&self.io.skips, "skips")?;
        Ok(ingest::load_dataset(&results, &climbers, &skips)?)
    }

    /// Load and validate; violations are an input error (exit 1).
    fn load_valid_dataset(&self) -> Result<Dataset> {
        let dataset = self.load_dataset()?;
        let violations = dataset.validate();
        if !violations.is_ok() {
            bail!("dataset validation failed:\n{violations}");
        }
        Ok(dataset)
    }

    fn out_dir(&self) -> Result<Option<PathBuf>> {
        match self.path(&self.io.out, "out") {
            Some(dir) => {
                fs::create_dir_all(&dir)
                    .with_context(|| format!("cannot create output directory {}", dir.display()))?;
                Ok(Some(dir))
            }
            None => Ok(None),
        }
    }

    fn require_out_dir(&self) -> Result<PathBuf> {
        self.out_dir()?
            .ok_or_else(|| anyhow!("missing output directory: pass --out or set `out` in the config"))
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, content).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_validate(run: &Run) -> Result<u8> {
    let dataset = run.load_dataset()?;
    println!(
        "dataset: {} climbers, {} events, {} attempts, {} skip observations",
        dataset.climbers().len(),
        dataset.events().len(),
        dataset.attempts().len(),
        dataset.skip_annotations().len(),
    );
    let violations = dataset.validate();
    print!("{violations}");
    Ok(if violations.is_ok() { 0 } else { 1 })
}

fn cmd_describe(run: &Run) -> Result<u8> {
    let dataset = run.load_valid_dataset()?;
    let out = run.require_out_dir()?;
    let falls = report::fall_false_start_csv(&dataset)?;
    print!("{falls}");
    write_file(&out, "fall_false_start.csv", &falls)?;
    write_file(&out, "events_per_year.csv", &report::events_per_year_csv(&dataset))?;
    write_file(&out, "skip_usage_by_event.csv", &report::skip_usage_by_event_csv(&dataset))?;
    write_file(&out, "ranges_by_year.csv", &report::ranges_by_year_csv(&dataset))?;
    Ok(0)
}

fn parse_criterion(name: &str) -> Result<Criterion> {
    match name.to_ascii_uppercase().as_str() {
        "ML" => Ok(Criterion::Ml),
        "REML" => Ok(Criterion::Reml),
        other => bail!("unknown criterion `{other}` (expected ML or REML)"),
    }
}

fn cmd_fit(run: &Run, model: Option<String>, criterion: Option<String>) -> Result<u8> {
    let dataset = run.load_valid_dataset()?;
    let data = build_model_rows(&dataset)?;
    let model = model
        .or_else(|| run.settings.get("model").map(String::from))
        .unwrap_or_else(|| "M3".to_string());
    let criterion = parse_criterion(
        &criterion
            .or_else(|| run.settings.get("criterion").map(String::from))
            .unwrap_or_else(|| "REML".to_string()),
    )?;
    let spec = ModelSpec::ladder_spec(&model)?;

    let (fit, code) = match fit_model_rows::<f64>(&spec, &data, criterion) {
        Ok(fit) => (fit, 0),
        Err(LmmError::ConvergenceFailure { fit }) => {
            eprintln!("warning: {model} stopped at the evaluation budget; reporting the best fit found");
            (*fit, 2)
        }
        Err(e) => return Err(e.into()),
    };
    print!("{}", report::lmm_summary_text(&fit));
    if let Some(out) = run.out_dir()? {
        write_file(&out, &format!("fit_{model}.txt"), &report::lmm_summary_text(&fit))?;
        write_file(&out, &format!("fit_{model}.json"), &report::lmm_summary_json(&fit))?;
    }
    Ok(code)
}

fn cmd_ladder(run: &Run, alpha: Option<f64>) -> Result<u8> {
    let dataset = run.load_valid_dataset()?;
    let data = build_model_rows(&dataset)?;
    let alpha = match alpha.or(run.settings.parse("alpha")?) {
        Some(a) if a > 0.0 && a < 1.0 => a,
        Some(a) => bail!("alpha must lie strictly between 0 and 1, got {a}"),
        None => 0.01,
    };

    let comparison = compare_ladder(&data, alpha)?;
    print!("{}", report::ladder_text(&comparison));
    if let Some(out) = run.out_dir()? {
        write_file(&out, "ladder.csv", &report::ladder_csv(&comparison))?;
        write_file(&out, "selection.txt", &report::ladder_selection_text(&comparison))?;
    }
    Ok(if comparison.selected_converged() { 0 } else { 2 })
}

fn cmd_falls(run: &Run) -> Result<u8> {
    let dataset = run.load_valid_dataset()?;
    let data = build_fall_rows(&dataset)?;
    let (fit, code) = match fit_binomial::<f64>(&ModelSpec::fall_model(), &data) {
        Ok(fit) => (fit, 0),
        Err(GlmmError::ConvergenceFailure { fit }) => {
            eprintln!("warning: fall model stopped at the evaluation budget; reporting the best fit found");
            (*fit, 2)
        }
        Err(e @ GlmmError::CompleteSeparation { .. }) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
        Err(e) => return Err(e.into()),
    };
    print!("{}", report::glmm_summary_text(&fit));
    if let Some(out) = run.out_dir()? {
        write_file(&out, "falls.txt", &report::glmm_summary_text(&fit))?;
        write_file(&out, "falls.json", &report::glmm_summary_json(&fit))?;
    }
    Ok(code)
}

fn cmd_ranges(run: &Run) -> Result<u8> {
    let dataset = run.load_valid_dataset()?;
    let csv = report::ranges_by_year_csv(&dataset);
    match run.out_dir()? {
        Some(out) => write_file(&out, "ranges_by_year.csv", &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

/// Assemble simulation parameters from the defaults, the config file, and
/// the `--seed` flag (highest precedence).
fn sim_params(settings: &Settings, seed_flag: Option<u64>) -> Result<SimulationParams> {
    let mut p = SimulationParams::recovery_defaults();
    let gammas = ["gamma0", "gamma1", "gamma2", "gamma3", "gamma4"];
    for (slot, key) in p.gamma.iter_mut().zip(gammas) {
        if let Some(v) = settings.parse(key)? {
            *slot = v;
        }
    }
    macro_rules! set {
        ($field:expr, $key:literal) => {
            if let Some(v) = settings.parse($key)? {
                $field = v;
            }
        };
    }
    set!(p.sigma2, "sigma2");
    set!(p.n_climbers, "n_climbers");
    set!(p.n_events, "n_events");
    set!(p.attendance_prob, "attendance_prob");
    set!(p.gender_split, "gender_split");
    set!(p.eta.var_intercept, "eta00");
    set!(p.eta.covariance, "eta01");
    set!(p.eta.var_slope, "eta11");
    set!(p.tau.var_intercept, "tau00");
    set!(p.tau.covariance, "tau01");
    set!(p.tau.var_slope, "tau11");

    let rate: Option<f64> = settings.parse("adoption_rate")?;
    let switch_back: Option<bool> = settings.parse("switch_back")?;
    if rate.is_some() || switch_back.is_some() {
        let adoption_rate = rate.unwrap_or(0.5);
        p.skip_adoption = if adoption_rate == 0.0 {
            SkipAdoption::Never
        } else if switch_back.unwrap_or(false) {
            SkipAdoption::UniformOnsetWithSwitchBack { adoption_rate }
        } else {
            SkipAdoption::UniformOnset { adoption_rate }
        };
    }

    if let Some(seed) = seed_flag.or(settings.parse("seed")?) {
        p.seed = seed;
    }
    p.validate()?;
    Ok(p)
}

fn cmd_simulate(run: &Run, seed: Option<u64>) -> Result<u8> {
    let params = sim_params(&run.settings, seed)?;
    let out = run.require_out_dir()?;
    let sim = simulate_competition(&params)?;

    ingest::write_results(&sim.dataset, &out.join("results.csv"))?;
    println!("wrote {}", out.join("results.csv").display());
    ingest::write_climbers(&sim.dataset, &out.join("climbers.csv"))?;
    println!("wrote {}", out.join("climbers.csv").display());
    ingest::write_skip_observations(&sim.dataset, &out.join("skips.csv"))?;
    println!("wrote {}", out.join("skips.csv").display());
    write_model_rows(&sim.model, &out.join("model_rows.csv"))
        .with_context(|| "cannot write model_rows.csv")?;
    println!("wrote {}", out.join("model_rows.csv").display());
    write_scaling(&sim.model.scaling, &out.join("scaling.json"))
        .with_context(|| "cannot write scaling.json")?;
    println!("wrote {}", out.join("scaling.json").display());
    write_file(&out, "truth.json", &report::simulation_manifest_json(&sim))?;

    println!(
        "simulated {} climbers x {} events -> {} model rows",
        sim.dataset.climbers().len(),
        sim.dataset.events().len(),
        sim.model.rows.len(),
    );
    Ok(0)
}

fn cmd_recover(
    run: &Run,
    seed: Option<u64>,
    replicates: Option<usize>,
    model: Option<String>,
) -> Result<u8> {
    let params = sim_params(&run.settings, seed)?;
    let replicates = replicates.or(run.settings.parse("replicates")?).unwrap_or(50);
    let model = model
        .or_else(|| run.settings.get("model").map(String::from))
        .unwrap_or_else(|| "M3".to_string());
    let spec = ModelSpec::ladder_spec(&model)?;

    let report_data = recovery_report_for(&params, replicates, &spec)?;
    print!("{}", report::recovery_text(&report_data));
    if let Some(out) = run.out_dir()? {
        write_file(&out, "recovery.txt", &report::recovery_text(&report_data))?;
        write_file(&out, "recovery.json", &report::recovery_json(&report_data))?;
    }
    Ok(if report_data.n_used == 0 { 2 } else { 0 })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Validate { io } => cmd_validate(&Run::new(io)?),
        Command::Describe { io } => cmd_describe(&Run::new(io)?),
        Command::Fit { io, model, criterion } => cmd_fit(&Run::new(io)?, model, criterion),
        Command::Ladder { io, alpha } => cmd_ladder(&Run::new(io)?, alpha),
        Command::Falls { io } => cmd_falls(&Run::new(io)?),
        Command::Ranges { io } => cmd_ranges(&Run::new(io)?),
        Command::Simulate { io, seed } => cmd_simulate(&Run::new(io)?, seed),
        Command::Recover { io, seed, replicates, model } => {
            cmd_recover(&Run::new(io)?, seed, replicates, model)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
