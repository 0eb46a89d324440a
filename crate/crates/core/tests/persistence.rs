//! Run directories: determinism, resume, locking and failure reporting.

use std::fs;
use std::path::Path;

use fbsim::data::{generate_dataset, load_dataset, load_params, save_dataset, ScenarioKind};
use fbsim::fl::{read_records, run_experiment, ExperimentConfig, RunOptions, RunStatus, LOCK_FILE, RECORDS_FILE};
use fbsim::nn::{ModelSpec, OptimizerConfig};
use fbsim::strategy::StrategyKind;
use fbsim::Error;

fn cfg(kind: StrategyKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.strategy = kind;
    c.run.scenario = ScenarioKind::Ds2LabelSkew;
    c.run.rounds = 4;
    c.run.seed = 3;
    c.run.record_timing = false;
    c.train.epochs = 1;
    c.train.batch_size = 16;
    c.train.eta = 0.01;
    c.data.num_clients = 3;
    c.data.samples_per_client_mean = 40;
    c.data.input_dim = 6;
    c.data.num_classes = 3;
    c.model = ModelSpec::new(6, vec![8], 3, true);
    c
}

const FRESH: RunOptions = RunOptions { resume: false, stop_after: None };
const RESUME: RunOptions = RunOptions { resume: true, stop_after: None };

fn records_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join(RECORDS_FILE)).unwrap()
}

fn drop_last_line(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    fs::write(path, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
}

#[test]
fn identical_configs_give_identical_record_streams() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in [StrategyKind::Moon, StrategyKind::PFedLa] {
        let (a, b) = (tmp.path().join(format!("{kind}-a")), tmp.path().join(format!("{kind}-b")));
        run_experiment(&cfg(kind), &a, FRESH).unwrap();
        run_experiment(&cfg(kind), &b, FRESH).unwrap();
        assert_eq!(records_bytes(&a), records_bytes(&b), "{kind}");
        assert_eq!(fs::read(a.join("final.bin")).unwrap(), fs::read(b.join("final.bin")).unwrap());
    }
}

#[test]
fn interrupted_runs_resume_to_the_uninterrupted_result() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in StrategyKind::ALL {
        let c = cfg(kind);
        let full = tmp.path().join(format!("{kind}-full"));
        run_experiment(&c, &full, FRESH).unwrap();

        let part = tmp.path().join(format!("{kind}-part"));
        let early = run_experiment(&c, &part, RunOptions { resume: false, stop_after: Some(2) }).unwrap();
        assert_eq!(early.records.len(), 2);
        assert!(early.final_models.is_empty());
        assert_eq!(RunStatus::load(&part).unwrap().status, "running");
        let prefix = records_bytes(&part);

        let done = run_experiment(&c, &part, RESUME).unwrap();
        assert_eq!(done.records.len(), 4);
        assert!(records_bytes(&part).starts_with(&prefix), "{kind}: records rewritten");
        assert_eq!(records_bytes(&part), records_bytes(&full), "{kind}");
        assert_eq!(RunStatus::load(&part).unwrap().status, "completed");
    }
}

#[test]
fn torn_or_missing_final_record_is_repaired() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(StrategyKind::Scaffold);
    let full = tmp.path().join("full");
    run_experiment(&c, &full, FRESH).unwrap();

    // checkpoint written, record append cut short
    let torn = tmp.path().join("torn");
    run_experiment(&c, &torn, RunOptions { resume: false, stop_after: Some(3) }).unwrap();
    let path = torn.join(RECORDS_FILE);
    drop_last_line(&path);
    let mut bytes = fs::read(&path).unwrap();
    bytes.extend_from_slice(b"{\"schema_version\":1,\"rou");
    fs::write(&path, bytes).unwrap();
    run_experiment(&c, &torn, RESUME).unwrap();
    assert_eq!(records_bytes(&torn), records_bytes(&full));

    // checkpoint written, record never appended
    let lost = tmp.path().join("lost");
    run_experiment(&c, &lost, RunOptions { resume: false, stop_after: Some(1) }).unwrap();
    drop_last_line(&lost.join(RECORDS_FILE));
    run_experiment(&c, &lost, RESUME).unwrap();
    assert_eq!(records_bytes(&lost), records_bytes(&full));
}

#[test]
fn resuming_a_finished_run_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(StrategyKind::FedAvg);
    let dir = tmp.path().join("run");
    let first = run_experiment(&c, &dir, FRESH).unwrap();
    let before = records_bytes(&dir);
    let again = run_experiment(&c, &dir, RESUME).unwrap();
    assert_eq!(records_bytes(&dir), before);
    assert_eq!(first.records, again.records);
    assert_eq!(read_records(&dir).unwrap(), first.records);
}

#[test]
fn existing_runs_are_protected() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(StrategyKind::FedAvg);
    let dir = tmp.path().join("run");
    run_experiment(&c, &dir, RunOptions { resume: false, stop_after: Some(1) }).unwrap();

    let err = run_experiment(&c, &dir, FRESH).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let mut other = c.clone();
    other.train.eta = 0.02;
    let err = run_experiment(&other, &dir, RESUME).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{err}");

    fs::write(dir.join(LOCK_FILE), "").unwrap();
    let err = run_experiment(&c, &dir, RESUME).unwrap_err();
    assert!(err.to_string().contains(LOCK_FILE), "{err}");
    fs::remove_file(dir.join(LOCK_FILE)).unwrap();
    run_experiment(&c, &dir, RESUME).unwrap();
    assert!(!dir.join(LOCK_FILE).exists());
}

#[test]
fn unknown_schema_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_experiment(&cfg(StrategyKind::FedAvg), &dir, FRESH).unwrap();
    let path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\":1", "\"schema_version\":99");
    fs::write(&path, text).unwrap();
    assert!(matches!(read_records(&dir), Err(Error::Version { .. })));
}

#[test]
fn divergence_is_reported_and_marks_the_run_failed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = cfg(StrategyKind::FedAvg);
    c.model = ModelSpec::new(6, vec![8], 3, false);
    c.train.optimizer = OptimizerConfig::sgd();
    c.train.eta = 1e200;
    let dir = tmp.path().join("run");
    let err = run_experiment(&c, &dir, FRESH).unwrap_err();
    assert!(err.is_divergence(), "{err}");
    let status = RunStatus::load(&dir).unwrap();
    assert_eq!(status.status, "failed");
    assert!(status.message.is_some());
    assert!(!dir.join(LOCK_FILE).exists());
}

#[test]
fn dataset_and_final_models_round_trip_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(StrategyKind::FedBn);
    let ds = generate_dataset(&c.data, ScenarioKind::Ds3LabelAndConceptShift).unwrap();
    let path = tmp.path().join("ds.bin");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let dir = tmp.path().join("run");
    let result = run_experiment(&c, &dir, FRESH).unwrap();
    let saved = load_params(dir.join("final.bin")).unwrap();
    assert_eq!(saved.len(), result.final_models.len());
    for ((name, p), m) in saved.iter().zip(&result.final_models) {
        assert!(p == m, "{name}");
        assert_eq!(p.layout(), m.layout());
    }
}
