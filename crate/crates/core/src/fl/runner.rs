//! Round loop: serve, train every client, aggregate, evaluate, persist.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{evaluate, rounds_to_threshold};
use crate::data::{decode_params, encode_params, generate_dataset, load_dataset, write_atomic, FederatedDataset};
use crate::error::{Error, Result};
use crate::nn::{build_model, Batch, ModelSpec, ParamVector};
use crate::seed::{derive_seed, stream, STREAM_HYPERNET, STREAM_MODEL};
use crate::strategy::{
    comm_footprint, local_train, ClientState, ClientUpdate, CommFootprint, Hypernetwork, LocalTrainConfig, Served,
    ServerState,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const STATE_FILE: &str = "state.json";
pub const STATUS_FILE: &str = "status.json";
pub const LOCK_FILE: &str = "run.lock";
pub const FINAL_FILE: &str = "final.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub round: u64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub loss_per_client: Vec<f64>,
    pub floats_up: u64,
    pub floats_down: u64,
    pub floats_up_per_client: Vec<u64>,
    pub floats_down_per_client: Vec<u64>,
    pub wall_ms_per_client: Vec<f64>,
    pub wall_ms_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: u64,
    pub wall_ms_per_client: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    /// `(theta, first round reaching it)` for each configured threshold.
    pub rounds_to_threshold: Vec<(f64, Option<u64>)>,
    /// Evaluated models after the last round.
    pub final_models: Vec<ParamVector>,
    /// Measured local-training wall time per round and client, in ms,
    /// regardless of `run.record_timing`.
    pub timings: Vec<Vec<f64>>,
}

impl RunResult {
    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

/// Effective worker count: `run.threads` capped by `FBSIM_THREADS`.
pub fn worker_threads(requested: usize) -> usize {
    let cap = std::env::var("FBSIM_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    match cap {
        Some(c) if c >= 1 => requested.min(c).max(1),
        _ => requested.max(1),
    }
}

/// Loads the configured dataset or generates it from `data`.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<FederatedDataset> {
    match &cfg.run.dataset {
        Some(path) => load_dataset(path),
        None => generate_dataset(&cfg.data, cfg.run.scenario),
    }
}

/// In-memory experiment state, advanced one round at a time.
pub struct Experiment {
    cfg: ExperimentConfig,
    dataset: FederatedDataset,
    server: ServerState,
    clients: Vec<ClientState>,
    pool: Option<rayon::ThreadPool>,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_dataset(cfg, load_or_generate(cfg)?)
    }

    pub fn with_dataset(cfg: &ExperimentConfig, dataset: FederatedDataset) -> Result<Self> {
        cfg.validate()?;
        let spec = &cfg.model;
        if dataset.clients.is_empty() {
            return Err(Error::Config("dataset has no clients".into()));
        }
        if dataset.input_dim() != spec.input_dim || dataset.num_classes() != spec.num_classes {
            return Err(Error::Config(format!(
                "dataset is {}->{} but the model expects {}->{}",
                dataset.input_dim(),
                dataset.num_classes(),
                spec.input_dim,
                spec.num_classes
            )));
        }
        let kind = cfg.run.strategy;
        let init = build_model(spec, derive_seed(cfg.run.seed, &[STREAM_MODEL]))?;
        let clients = dataset
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let batch = Batch::new(c.features.clone(), c.labels.clone())?;
                Ok(ClientState::new(kind, i as u64, Arc::new(batch), &init, cfg.train.optimizer.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream(cfg.run.seed, &[STREAM_HYPERNET]);
        let server = ServerState::new(kind, cfg.strategy.clone(), init, clients.len(), cfg.train.eta, &mut rng)?;
        let threads = worker_threads(cfg.run.threads);
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Experiment { cfg: cfg.clone(), dataset, server, clients, pool })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.cfg.model
    }

    pub fn dataset(&self) -> &FederatedDataset {
        &self.dataset
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Number of rounds already aggregated.
    pub fn completed_rounds(&self) -> u64 {
        self.server.round - 1
    }

    pub fn footprint(&self) -> CommFootprint {
        comm_footprint(self.cfg.run.strategy, self.server.global.layout())
    }

    pub fn eval_models(&self) -> Result<Vec<ParamVector>> {
        let locals: Vec<&ParamVector> = self.clients.iter().map(|c| &c.local).collect();
        self.server.eval_models(&locals)
    }

    /// Runs one full round and returns its record (timings always filled in).
    pub fn step(&mut self) -> Result<RoundRecord> {
        let (record, _) = self.step_detailed()?;
        Ok(record)
    }

    /// Like [`step`](Self::step), also returning the raw client updates.
    pub fn step_detailed(&mut self) -> Result<(RoundRecord, Vec<ClientUpdate>)> {
        let round = self.server.round;
        let k = self.clients.len();
        let served = (0..k).map(|i| self.server.serve(i)).collect::<Result<Vec<Served>>>()?;
        let lcfg = LocalTrainConfig {
            epochs: self.cfg.train.epochs,
            eta: self.cfg.train.eta,
            batch_size: self.cfg.train.batch_size,
            round,
            seed: self.cfg.run.seed,
        };
        let kind = self.cfg.run.strategy;
        let hp = &self.cfg.strategy;
        let spec = &self.cfg.model;
        let work = |(client, sv): (&mut ClientState, &Served)| local_train(kind, hp, client, sv, spec, &lcfg);
        let updates = match &self.pool {
            Some(pool) => pool
                .install(|| self.clients.par_iter_mut().zip(served.par_iter()).map(work).collect::<Result<Vec<_>>>()),
            None => self.clients.iter_mut().zip(served.iter()).map(work).collect::<Result<Vec<_>>>(),
        }?;
        self.server.aggregate(&updates, &served)?;
        let (f1_micro, f1_macro) = evaluate(&self.eval_models()?, spec, &self.dataset.test)?;

        let up: Vec<u64> = updates.iter().map(|u| u.payload.floats() as u64).collect();
        let down: Vec<u64> = served.iter().map(|s| s.floats() as u64).collect();
        let wall: Vec<f64> = updates.iter().map(|u| u.wall.as_secs_f64() * 1e3).collect();
        let record = RoundRecord {
            schema_version: SCHEMA_VERSION,
            round,
            f1_micro,
            f1_macro,
            loss_per_client: updates.iter().map(|u| u.mean_loss).collect(),
            floats_up: up.iter().sum(),
            floats_down: down.iter().sum(),
            floats_up_per_client: up,
            floats_down_per_client: down,
            wall_ms_total: wall.iter().sum(),
            wall_ms_per_client: wall,
        };
        Ok((record, updates))
    }

    /// Every piece of mutable state, by name, for checkpointing.
    pub fn checkpoint_entries(&self) -> Vec<(String, ParamVector)> {
        let mut out = vec![("server.global".to_string(), self.server.global.clone())];
        if let Some(v) = &self.server.control {
            out.push(("server.control".into(), v.clone()));
        }
        if let Some(p) = &self.server.pfedla {
            for (i, hn) in p.hypernets.iter().enumerate() {
                out.push((format!("server.hypernet.{i}"), hn.params().clone()));
            }
            for (i, m) in p.models.iter().enumerate() {
                out.push((format!("server.model.{i}"), m.clone()));
            }
        }
        for c in &self.clients {
            let id = c.client_id;
            out.push((format!("client.{id}.local"), c.local.clone()));
            let extras = [("control", &c.control), ("drift", &c.drift), ("prev", &c.prev_local)];
            for (name, v) in extras {
                if let Some(v) = v {
                    out.push((format!("client.{id}.{name}"), v.clone()));
                }
            }
        }
        out
    }

    /// Restores state saved by [`checkpoint_entries`](Self::checkpoint_entries)
    /// after `completed_rounds` rounds.
    pub fn restore(&mut self, entries: Vec<(String, ParamVector)>, completed_rounds: u64) -> Result<()> {
        let expected: Vec<String> = self.checkpoint_entries().into_iter().map(|(n, _)| n).collect();
        let names: Vec<&String> = entries.iter().map(|(n, _)| n).collect();
        if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(Error::Protocol("checkpoint does not match the configured strategy and clients".into()));
        }
        let hp = &self.cfg.strategy;
        for (name, v) in entries {
            let parts: Vec<&str> = name.split('.').collect();
            match parts.as_slice() {
                ["server", "global"] => set(&mut self.server.global, v)?,
                ["server", "control"] => set(self.server.control.as_mut().expect("listed"), v)?,
                ["server", "hypernet", i] => {
                    let p = self.server.pfedla.as_mut().expect("listed");
                    let i: usize = i.parse().expect("listed");
                    let hn = &p.hypernets[i];
                    p.hypernets[i] =
                        Hypernetwork::from_params(v, hp.pfedla_embed_dim, hp.pfedla_hidden, hn.layers(), hn.clients())?;
                }
                ["server", "model", i] => {
                    let p = self.server.pfedla.as_mut().expect("listed");
                    set(&mut p.models[i.parse::<usize>().expect("listed")], v)?;
                }
                ["client", i, field] => {
                    let c = &mut self.clients[i.parse::<usize>().expect("listed")];
                    let slot = match *field {
                        "local" => &mut c.local,
                        "control" => c.control.as_mut().expect("listed"),
                        "drift" => c.drift.as_mut().expect("listed"),
                        _ => c.prev_local.as_mut().expect("listed"),
                    };
                    set(slot, v)?;
                }
                _ => unreachable!("names checked against the expected list"),
            }
        }
        self.server.round = completed_rounds + 1;
        Ok(())
    }
}

fn set(slot: &mut ParamVector, v: ParamVector) -> Result<()> {
    slot.check_layout(&v)?;
    *slot = v;
    Ok(())
}

fn finish(
    cfg: &ExperimentConfig,
    records: Vec<RoundRecord>,
    timings: Vec<Vec<f64>>,
    final_models: Vec<ParamVector>,
) -> Result<RunResult> {
    let micro: Vec<f64> = records.iter().map(|r| r.f1_micro).collect();
    let rounds_to_threshold =
        cfg.run.thresholds.iter().map(|&t| Ok((t, rounds_to_threshold(&micro, t)?))).collect::<Result<Vec<_>>>()?;
    Ok(RunResult { config: cfg.clone(), records, rounds_to_threshold, final_models, timings })
}

fn public_record(cfg: &ExperimentConfig, mut record: RoundRecord) -> RoundRecord {
    if !cfg.run.record_timing {
        record.wall_ms_per_client.iter_mut().for_each(|w| *w = 0.0);
        record.wall_ms_total = 0.0;
    }
    record
}

/// Runs all rounds in memory.
pub fn run_in_memory(cfg: &ExperimentConfig, dataset: Option<FederatedDataset>) -> Result<RunResult> {
    let mut exp = match dataset {
        Some(ds) => Experiment::with_dataset(cfg, ds)?,
        None => Experiment::new(cfg)?,
    };
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for _ in 0..cfg.run.rounds {
        let record = exp.step()?;
        timings.push(record.wall_ms_per_client.clone());
        records.push(public_record(cfg, record));
    }
    let models = exp.eval_models()?;
    finish(cfg, records, timings, models)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedState {
    schema_version: u32,
    completed_rounds: u64,
    checkpoint: String,
    pending: RoundRecord,
    timing: TimingRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub status: String,
    pub completed_rounds: u64,
    pub total_rounds: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub message: Option<String>,
}

impl RunStatus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(STATUS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exclusive ownership of a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is held by another process; delete it if that process is gone",
                path.display()
            ))),
            Err(e) => Err(Error::path(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn checkpoint_name(round: u64) -> String {
    format!("state-{round:04}.bin")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::path(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::path(path, e))?;
    f.sync_data().map_err(|e| Error::path(path, e))
}

/// Reads a JSON-lines file, dropping a torn final line (no newline) from
/// disk so later appends start clean.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep != bytes.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::path(path, e))?;
        f.set_len(keep as u64).map_err(|e| Error::path(path, e))?;
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(&bytes[..keep]).lines().enumerate() {
        let line = line.map_err(|e| Error::path(path, e))?;
        let value =
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

/// Reads a run's record stream, checking the schema version.
pub fn read_records(dir: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = dir.as_ref().join(RECORDS_FILE);
    if !path.exists() {
        return Err(Error::path(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let found = value.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != u64::from(SCHEMA_VERSION) {
            return Err(Error::Version { found: found.to_string(), expected: SCHEMA_VERSION.to_string() });
        }
        out.push(serde_json::from_value(value)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from the last checkpoint; a finished run is left untouched.
    pub resume: bool,
    /// Stop once this many rounds are complete, leaving a resumable run.
    pub stop_after: Option<u64>,
}

/// Runs an experiment inside `dir`, appending one record per round and
/// checkpointing after each. Returns the records so far; `final_models` is
/// empty when stopped early.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<RunResult> {
    let resume = opts.resume;
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
    let _lock = RunLock::acquire(dir)?;
    let echo = cfg.to_toml_string()?;
    let config_path = dir.join(CONFIG_FILE);
    let records_path = dir.join(RECORDS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let state_path = dir.join(STATE_FILE);
    let status_path = dir.join(STATUS_FILE);

    let existing = records_path.exists() || state_path.exists();
    if existing && !resume {
        return Err(Error::Config(format!("{} already holds a run; pass --resume to continue it", dir.display())));
    }
    if existing {
        let prior = fs::read_to_string(&config_path).map_err(|e| Error::path(&config_path, e))?;
        if prior != echo {
            return Err(Error::Config(format!("{} was started with a different configuration", dir.display())));
        }
    } else {
        write_atomic(&config_path, echo.as_bytes())?;
        File::create(&records_path).map_err(|e| Error::path(&records_path, e))?;
    }

    let mut exp = Experiment::new(cfg)?;
    let mut records: Vec<RoundRecord> = read_lines(&records_path)?;
    let mut timing: Vec<TimingRecord> = if cfg.run.record_timing { Vec::new() } else { read_lines(&timing_path)? };
    if state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(|e| Error::path(&state_path, e))?;
        let state: SavedState = serde_json::from_str(&text)?;
        let ckpt = dir.join(&state.checkpoint);
        let bytes = fs::read(&ckpt).map_err(|e| Error::path(&ckpt, e))?;
        exp.restore(decode_params(&bytes)?, state.completed_rounds)?;
        let done = state.completed_rounds as usize;
        if records.len() + 1 == done {
            append_line(&records_path, &state.pending)?;
            records.push(state.pending);
        } else if records.len() != done {
            return Err(Error::Protocol(format!(
                "{} has {} records but the checkpoint is at round {done}",
                dir.display(),
                records.len()
            )));
        }
        if !cfg.run.record_timing && timing.len() + 1 == done {
            append_line(&timing_path, &state.timing)?;
            timing.push(state.timing);
        }
    } else if !records.is_empty() {
        return Err(Error::Protocol(format!("{} has records but no checkpoint", dir.display())));
    }

    let total = cfg.run.rounds;
    let stop = opts.stop_after.map_or(total, |s| s.min(total));
    while exp.completed_rounds() < stop {
        let record = match exp.step() {
            Ok(r) => r,
            Err(e) => {
                let status = RunStatus {
                    status: "failed".into(),
                    completed_rounds: exp.completed_rounds(),
                    total_rounds: total,
                    message: Some(e.to_string()),
                };
                write_json(&status_path, &status)?;
                return Err(e);
            }
        };
        let round = record.round;
        let timing_rec = TimingRecord { round, wall_ms_per_client: record.wall_ms_per_client.clone() };
        let public = public_record(cfg, record);
        let name = checkpoint_name(round);
        let entries = exp.checkpoint_entries();
        let refs: Vec<(String, &ParamVector)> = entries.iter().map(|(n, v)| (n.clone(), v)).collect();
        write_atomic(&dir.join(&name), &encode_params(&refs))?;
        let state = SavedState {
            schema_version: SCHEMA_VERSION,
            completed_rounds: round,
            checkpoint: name,
            pending: public.clone(),
            timing: timing_rec.clone(),
        };
        write_json(&state_path, &state)?;
        append_line(&records_path, &public)?;
        if !cfg.run.record_timing {
            append_line(&timing_path, &timing_rec)?;
        }
        if round > 1 {
            let _ = fs::remove_file(dir.join(checkpoint_name(round - 1)));
        }
        write_json(
            &status_path,
            &RunStatus { status: "running".into(), completed_rounds: round, total_rounds: total, message: None },
        )?;
        records.push(public);
        timing.push(timing_rec);
    }

    let timings = if cfg.run.record_timing {
        records.iter().map(|r| r.wall_ms_per_client.clone()).collect()
    } else {
        timing.into_iter().map(|t| t.wall_ms_per_client).collect()
    };
    if exp.completed_rounds() < total {
        return finish(cfg, records, timings, Vec::new());
    }
    let models = exp.eval_models()?;
    let named: Vec<(String, &ParamVector)> =
        models.iter().enumerate().map(|(i, m)| (format!("model.{i}"), m)).collect();
    write_atomic(&dir.join(FINAL_FILE), &encode_params(&named))?;
    write_json(
        &status_path,
        &RunStatus { status: "completed".into(), completed_rounds: total, total_rounds: total, message: None },
    )?;
    finish(cfg, records, timings, models)
}
