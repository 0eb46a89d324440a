//! Comparison tables and plot-ready CSV derived purely from run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fl::{
    read_records, rounds_to_threshold, ExperimentConfig, RoundRecord, TimingRecord, CONFIG_FILE, TIMING_FILE,
};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    /// Per-round per-client local training time in ms.
    pub timings: Vec<Vec<f64>>,
}

impl RunSummary {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
        let records = read_records(dir)?;
        if records.is_empty() {
            return Err(Error::Config(format!("{} has no completed rounds", dir.display())));
        }
        let timings = if config.run.record_timing {
            records.iter().map(|r| r.wall_ms_per_client.clone()).collect()
        } else {
            read_timing(&dir.join(TIMING_FILE))?
        };
        let name =
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        Ok(RunSummary { name, config, records, timings })
    }

    pub fn last(&self) -> &RoundRecord {
        self.records.last().expect("non-empty by construction")
    }

    pub fn total_floats_up(&self) -> u64 {
        self.records.iter().map(|r| r.floats_up).sum()
    }

    /// Mean per-client local training time per round, in seconds.
    pub fn mean_local_seconds(&self) -> f64 {
        let all: Vec<f64> = self.timings.iter().flatten().copied().collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64 / 1e3
        }
    }

    pub fn rounds_to(&self, theta: f64) -> Result<Option<u64>> {
        let micro: Vec<f64> = self.records.iter().map(|r| r.f1_micro).collect();
        rounds_to_threshold(&micro, theta)
    }
}

fn read_timing(path: &PathBuf) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    text.lines()
        .map(|l| {
            let t = TimingRecord::deserialize(&mut serde_json::Deserializer::from_str(l))?;
            Ok(t.wall_ms_per_client)
        })
        .collect()
}

/// Final-round comparison table, one row per run.
pub fn summary_table(runs: &[RunSummary], thetas: &[f64]) -> Result<String> {
    let mut header = vec![
        "run".to_string(),
        "strategy".into(),
        "scenario".into(),
        "K".into(),
        "rounds".into(),
        "micro_f1".into(),
        "macro_f1".into(),
        "floats_up".into(),
        "local_s_per_round".into(),
    ];
    header.extend(thetas.iter().map(|t| format!("r@{t}")));
    let mut rows = vec![header];
    for run in runs {
        let last = run.last();
        let mut row = vec![
            run.name.clone(),
            run.config.run.strategy.label().to_string(),
            run.config.run.scenario.name().to_string(),
            last.loss_per_client.len().to_string(),
            run.records.len().to_string(),
            format!("{:.2}", last.f1_micro),
            format!("{:.2}", last.f1_macro),
            run.total_floats_up().to_string(),
            format!("{:.4}", run.mean_local_seconds()),
        ];
        for &t in thetas {
            row.push(run.rounds_to(t)?.map_or_else(|| "-".to_string(), |r| r.to_string()));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c < 3 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("  ")).expect("string write");
        }
    }
    Ok(out)
}

/// One CSV row per (run, round).
pub fn rounds_csv(runs: &[RunSummary]) -> String {
    let mut out =
        String::from("run,strategy,scenario,round,f1_micro,f1_macro,floats_up,floats_down,mean_loss,local_ms_mean\n");
    for run in runs {
        for (i, r) in run.records.iter().enumerate() {
            let loss = r.loss_per_client.iter().sum::<f64>() / r.loss_per_client.len().max(1) as f64;
            let ms = run.timings.get(i).map_or(0.0, |t| t.iter().sum::<f64>() / t.len().max(1) as f64);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                run.name,
                run.config.run.strategy.name(),
                run.config.run.scenario.name(),
                r.round,
                r.f1_micro,
                r.f1_macro,
                r.floats_up,
                r.floats_down,
                loss,
                ms
            )
            .expect("string write");
        }
    }
    out
}
