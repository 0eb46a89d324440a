//! `fbsim`: generate datasets, run and sweep experiments, emit reports.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors, 2 when
//! training diverges.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use fbsim::data::{generate_dataset, heterogeneity_report, save_dataset, save_sidecar, DatasetSidecar, ScenarioKind};
use fbsim::fl::{run_experiment, ExperimentConfig, RunOptions, RunStatus};
use fbsim::report::{rounds_csv, summary_table, RunSummary};
use fbsim::strategy::StrategyKind;
use fbsim::{Error, Result};

#[derive(Parser)]
#[command(name = "fbsim", version, about = "Federated learning simulator for multi-label classification")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a client dataset, its JSON sidecar and a heterogeneity report.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scenario: ds1 (IID), ds2 (label skew), ds3 (label skew + concept shift).
        #[arg(long)]
        scenario: Option<ScenarioKind>,
        /// Data seed (`data.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset file; the sidecar and report are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment into a run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (default: `run.output_dir`, else runs/<strategy>-<scenario>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train on an existing dataset file; its sidecar, if present, supplies `data`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue an interrupted run; a finished run is left as is.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed rounds; continue later with --resume.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run every combination of strategies, scenarios, client counts and seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated strategies (default: all eight).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
        /// Comma-separated scenarios (default: the configured one).
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<ScenarioKind>,
        /// Comma-separated client counts (default: the configured one).
        #[arg(long, value_delimiter = ',')]
        clients: Vec<usize>,
        /// Comma-separated seeds applied to both `run.seed` and `data.seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Parent directory for the run directories.
        #[arg(long)]
        out: PathBuf,
        /// Experiments run concurrently, each in its own process.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Resume runs that already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize run directories as a table and a per-round CSV.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Micro-F1 targets for rounds-to-threshold (default: first run's config).
        #[arg(long = "theta")]
        thetas: Vec<f64>,
        /// Write the per-round CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print every key with its value (required).
        #[arg(long, required = true)]
        dump: bool,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.eta=0.01`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, scenario, seed, out } => gen_data(&config, scenario, seed, &out),
        Cmd::Run { config, out, dataset, resume, stop_after } => {
            let mut cfg = config.resolve()?;
            if let Some(path) = dataset {
                adopt_dataset(&mut cfg, path)?;
            }
            let dir = out.or_else(|| cfg.run.output_dir.clone()).unwrap_or_else(|| default_run_dir(&cfg));
            let result = run_experiment(&cfg, &dir, RunOptions { resume, stop_after })?;
            if let Some(last) = result.final_record() {
                println!(
                    "{}: {} rounds, micro-F1 {:.2}, macro-F1 {:.2}",
                    dir.display(),
                    last.round,
                    last.f1_micro,
                    last.f1_macro
                );
            }
            Ok(())
        }
        Cmd::Sweep { config, strategies, scenarios, clients, seeds, out, jobs, resume } => {
            sweep(&config, &strategies, &scenarios, &clients, &seeds, &out, jobs, resume)
        }
        Cmd::Report { runs, thetas, csv, table } => {
            let summaries = runs.iter().map(RunSummary::load).collect::<Result<Vec<_>>>()?;
            let thetas = if thetas.is_empty() { summaries[0].config.run.thresholds.clone() } else { thetas };
            let text = summary_table(&summaries, &thetas)?;
            match table {
                Some(path) => fs::write(&path, &text).map_err(|e| Error::path(&path, e))?,
                None => print!("{text}"),
            }
            if let Some(path) = csv {
                fs::write(&path, rounds_csv(&summaries)).map_err(|e| Error::path(&path, e))?;
            }
            Ok(())
        }
        Cmd::Config { config, .. } => {
            print!("{}", config.resolve()?.to_toml_string()?);
            Ok(())
        }
    }
}

fn gen_data(args: &ConfigArgs, scenario: Option<ScenarioKind>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(s) = scenario {
        cfg.run.scenario = s;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let ds = generate_dataset(&cfg.data, cfg.run.scenario)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::path(parent, e))?;
    }
    save_dataset(&ds, out)?;
    save_sidecar(&DatasetSidecar::new(cfg.run.scenario, cfg.data.clone()), sidecar_path(out))?;
    let report = heterogeneity_report(&ds.clients)?;
    let text = report.render();
    let report_path = out.with_extension("report.txt");
    fs::write(&report_path, &text).map_err(|e| Error::path(&report_path, e))?;
    print!("{text}");
    Ok(())
}

fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("json")
}

/// Points the config at `path` and takes scenario and data settings from the
/// sidecar when there is one.
fn adopt_dataset(cfg: &mut ExperimentConfig, path: PathBuf) -> Result<()> {
    let sidecar = sidecar_path(&path);
    if sidecar.exists() {
        let meta = fbsim::data::load_sidecar(&sidecar)?;
        cfg.run.scenario = meta.scenario;
        cfg.data = meta.config;
    }
    cfg.run.dataset = Some(path);
    Ok(())
}

fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}-s{}", cfg.run.strategy, cfg.run.scenario, cfg.run.seed))
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    args: &ConfigArgs,
    strategies: &[StrategyKind],
    scenarios: &[ScenarioKind],
    clients: &[usize],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
    resume: bool,
) -> Result<()> {
    let base = args.resolve()?;
    let strategies = if strategies.is_empty() { StrategyKind::ALL.to_vec() } else { strategies.to_vec() };
    let scenarios = if scenarios.is_empty() { vec![base.run.scenario] } else { scenarios.to_vec() };
    let clients = if clients.is_empty() { vec![base.data.num_clients] } else { clients.to_vec() };
    let seeds = if seeds.is_empty() { vec![base.run.seed] } else { seeds.to_vec() };

    let config_dir = out.join("configs");
    fs::create_dir_all(&config_dir).map_err(|e| Error::path(&config_dir, e))?;
    let mut plan = Vec::new();
    for &scenario in &scenarios {
        for &k in &clients {
            for &seed in &seeds {
                for &strategy in &strategies {
                    let mut cfg = base.clone();
                    cfg.run.strategy = strategy;
                    cfg.run.scenario = scenario;
                    cfg.run.seed = seed;
                    cfg.data.seed = seed;
                    cfg.data.num_clients = k;
                    cfg.run.output_dir = None;
                    cfg.validate()?;
                    let name = format!("{strategy}-{scenario}-k{k}-s{seed}");
                    let path = config_dir.join(format!("{name}.toml"));
                    fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::path(&path, e))?;
                    plan.push((name, path));
                }
            }
        }
    }

    let exe = std::env::current_exe().map_err(Error::Io)?;
    let mut failed = Vec::new();
    let mut diverged = false;
    for chunk in plan.chunks(jobs.max(1)) {
        let mut children = Vec::new();
        for (name, path) in chunk {
            let dir = out.join(name);
            if !resume && dir.join("records.jsonl").exists() {
                if let Ok(s) = RunStatus::load(&dir) {
                    if s.status == "completed" {
                        println!("{name}: already complete");
                        continue;
                    }
                }
            }
            let mut cmd = Command::new(&exe);
            cmd.arg("run").arg("--config").arg(path).arg("--out").arg(&dir);
            if resume {
                cmd.arg("--resume");
            }
            children.push((name.clone(), cmd.spawn().map_err(Error::Io)?));
        }
        for (name, mut child) in children {
            let status = child.wait().map_err(Error::Io)?;
            if !status.success() {
                diverged |= status.code() == Some(2);
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else if diverged {
        Err(Error::Numeric(format!("runs failed: {}", failed.join(", "))))
    } else {
        Err(Error::Config(format!("runs failed: {}", failed.join(", "))))
    }
}
