//! Round-based experiment driver.

mod config;
mod metrics;
mod runner;

pub use config::{ExperimentConfig, RunSection, TrainSection};
pub use metrics::{evaluate, evaluate_model, rounds_to_threshold, Counts};
pub use runner::{
    load_or_generate, read_records, run_experiment, run_in_memory, worker_threads, Experiment, RoundRecord, RunLock,
    RunOptions, RunResult, RunStatus, TimingRecord, CONFIG_FILE, FINAL_FILE, LOCK_FILE, RECORDS_FILE, SCHEMA_VERSION,
    STATE_FILE, STATUS_FILE, TIMING_FILE,
};
