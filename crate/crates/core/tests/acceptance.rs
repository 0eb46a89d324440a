//! Acceptance checks: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not raised, so the workspace test run stays green
//! while the table records what holds.

mod common;

use std::time::Instant;

use common::{departs_from_fedavg, hypernet_gradient_error, objective_gradient_error, small_cfg, TOL};
use fbsim::data::{decode_dataset, encode_dataset, generate_dataset, ScenarioKind};
use fbsim::fl::{run_experiment, run_in_memory, Experiment, ExperimentConfig, RunOptions, RECORDS_FILE};
use fbsim::strategy::{comm_footprint, ServerState, StrategyHyperparams, StrategyKind};
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradients),
        ("reduction identities", reductions),
        ("structural invariants", invariants),
        ("communication ledger", ledger),
        ("heterogeneity trend", heterogeneity),
        ("local-epoch sensitivity", sensitivity),
        ("local-time ordering", timing),
        ("determinism and persistence", determinism),
    ];
    // `cargo test --test acceptance -- 5 7` runs only the listed criteria
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut passed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = check();
        passed += usize::from(o.pass);
        println!(
            "[{}] {}. {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("{passed}/{ran} criteria passed");
}

fn gradients() -> Outcome {
    let cases = [
        (StrategyKind::FedAvg, StrategyHyperparams::default()),
        (StrategyKind::FedProx, StrategyHyperparams { gamma: 0.7, ..Default::default() }),
        (StrategyKind::Moon, StrategyHyperparams { mu: 2.0, tau: 0.5, ..Default::default() }),
        (StrategyKind::FedDc, StrategyHyperparams { feddc_penalty_weight: 0.3, ..Default::default() }),
    ];
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (kind, hp) in &cases {
        let e = objective_gradient_error(*kind, hp);
        worst = worst.max(e);
        parts.push(format!("{kind} {e:.1e}"));
    }
    let e = hypernet_gradient_error();
    worst = worst.max(e);
    parts.push(format!("hypernetwork {e:.1e}"));
    outcome(worst < TOL, format!("max rel. error {worst:.1e} < {TOL:.0e} [{}]", parts.join(", ")))
}

fn reductions() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |label: &str, c: ExperimentConfig| {
        if let Some(r) = departs_from_fedavg(&c) {
            failures.push(format!("{label} departs at round {r}"));
        }
    };
    let mut c = small_cfg(StrategyKind::FedProx, 3, 3);
    c.strategy.gamma = 0.0;
    check("FedProx(gamma=0)", c);
    let mut c = small_cfg(StrategyKind::Moon, 3, 3);
    c.strategy.mu = 0.0;
    check("MOON(mu=0)", c);
    let mut c = small_cfg(StrategyKind::Scaffold, 3, 3);
    c.strategy.freeze_control_variates = true;
    check("SCAFFOLD(frozen)", c);
    check("FedNova(homogeneous)", small_cfg(StrategyKind::FedNova, 3, 3));

    let c = small_cfg(StrategyKind::PFedLa, 1, 3);
    let mut exp = Experiment::new(&c).unwrap();
    for _ in 0..3 {
        let (_, updates) = exp.step_detailed().unwrap();
        if exp.server().serve(0).unwrap().params != updates[0].payload.model {
            failures.push(format!("pFedLA(K=1) serves a mixed model at round {}", exp.completed_rounds()));
        }
    }
    if failures.is_empty() {
        outcome(true, "bit-exact: FedProx, MOON, SCAFFOLD, FedNova match FedAvg; pFedLA(K=1) serves w_1")
    } else {
        outcome(false, failures.join("; "))
    }
}

fn invariants() -> Outcome {
    let mut failures = Vec::new();

    let c = small_cfg(StrategyKind::FedBn, 3, 3);
    let mut exp = Experiment::new(&c).unwrap();
    let bn = |exp: &Experiment| -> Vec<f64> {
        let g = &exp.server().global;
        g.layout().segments().iter().filter(|s| s.kind.is_batch_norm()).flat_map(|s| g.slice(s).to_vec()).collect()
    };
    let initial = bn(&exp);
    for _ in 0..3 {
        exp.step().unwrap();
        if bn(&exp) != initial {
            failures.push("FedBN server BN changed".to_string());
        }
    }

    let mut worst_cv: f64 = 0.0;
    let c = small_cfg(StrategyKind::Scaffold, 4, 4);
    let mut exp = Experiment::new(&c).unwrap();
    for _ in 0..4 {
        exp.step().unwrap();
        let v = exp.server().control.as_ref().unwrap();
        let mut mean = v.zeros_like();
        for cl in exp.clients() {
            mean.axpy(0.25, cl.control.as_ref().unwrap());
        }
        let scale = v.values().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (a, b) in v.values().iter().zip(mean.values()) {
            worst_cv = worst_cv.max((a - b).abs() / scale);
        }
    }
    if worst_cv > 1e-12 {
        failures.push(format!("SCAFFOLD control mean off by {worst_cv:e}"));
    }

    let mut worst_w: f64 = 0.0;
    for n in 1..40usize {
        let sizes: Vec<usize> = (0..n).map(|i| 1 + (i * 7919) % 997).collect();
        worst_w = worst_w.max((ServerState::data_weights(&sizes).iter().sum::<f64>() - 1.0).abs());
    }
    if worst_w > 1e-12 {
        failures.push(format!("FedAvg weights sum off by {worst_w:e}"));
    }

    let mut worst_a: f64 = 0.0;
    let mut c = small_cfg(StrategyKind::PFedLa, 4, 3);
    c.data.samples_per_client_mean = 60;
    c.data.quantity_skew_exponent = 1.5;
    let mut exp = Experiment::new(&c).unwrap();
    for _ in 0..3 {
        exp.step().unwrap();
        for hn in &exp.server().pfedla.as_ref().unwrap().hypernets {
            for row in hn.forward().rows() {
                if row.iter().any(|&a| a < 0.0) {
                    worst_a = f64::INFINITY;
                }
                worst_a = worst_a.max((row.sum() - 1.0).abs());
            }
        }
    }
    if worst_a > 1e-12 {
        failures.push(format!("pFedLA alpha off the simplex by {worst_a:e}"));
    }

    if failures.is_empty() {
        outcome(
            true,
            format!("FedBN BN frozen; SCAFFOLD v=mean(v_i) to {worst_cv:.0e}; weights sum {worst_w:.0e}; alpha rows {worst_a:.0e}"),
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

fn ledger() -> Outcome {
    let mut failures = Vec::new();
    let c = small_cfg(StrategyKind::FedAvg, 3, 2);
    let layout = Experiment::new(&c).unwrap().server().global.layout().clone();
    let up = |k| comm_footprint(k, &layout).up;
    if up(StrategyKind::Scaffold) != 2 * up(StrategyKind::FedAvg) {
        failures.push(format!("SCAFFOLD up {} vs FedAvg {}", up(StrategyKind::Scaffold), up(StrategyKind::FedAvg)));
    }
    let deficit = up(StrategyKind::FedAvg) - up(StrategyKind::FedBn);
    if deficit != layout.batch_norm_count() {
        failures.push(format!("FedBN deficit {deficit} vs {} BN floats", layout.batch_norm_count()));
    }
    for kind in StrategyKind::ALL {
        let mut exp = Experiment::new(&small_cfg(kind, 3, 2)).unwrap();
        let fp = exp.footprint();
        for _ in 0..2 {
            let r = exp.step().unwrap();
            let ok = r.floats_up_per_client.iter().all(|&u| u == fp.up as u64)
                && r.floats_down_per_client.iter().all(|&d| d == fp.down as u64)
                && r.floats_up == 3 * fp.up as u64
                && r.floats_down == 3 * fp.down as u64;
            if !ok {
                failures.push(format!("{kind} round {} ledger differs from footprint", r.round));
            }
        }
    }
    if failures.is_empty() {
        outcome(
            true,
            format!(
                "SCAFFOLD up = 2 x {}; FedBN deficit = {} BN floats; ledger = footprint for all 8",
                up(StrategyKind::FedAvg),
                deficit
            ),
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn trend_cfg(kind: StrategyKind, scenario: ScenarioKind, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.strategy = kind;
    c.run.scenario = scenario;
    c.run.rounds = 20;
    c.run.seed = seed;
    c.run.record_timing = false;
    c.data.seed = seed;
    c.data.num_clients = 7;
    c
}

/// Mean final micro-F1 over `SEEDS` per strategy.
fn mean_final(scenario: ScenarioKind) -> Vec<(StrategyKind, f64)> {
    let jobs: Vec<(StrategyKind, u64)> =
        StrategyKind::ALL.iter().flat_map(|&k| SEEDS.iter().map(move |&s| (k, s))).collect();
    let finals: Vec<(StrategyKind, f64)> = jobs
        .par_iter()
        .map(|&(k, s)| {
            let r = run_in_memory(&trend_cfg(k, scenario, s), None).unwrap();
            (k, r.final_record().unwrap().f1_micro)
        })
        .collect();
    StrategyKind::ALL
        .iter()
        .map(|&k| {
            let v: Vec<f64> = finals.iter().filter(|(kk, _)| *kk == k).map(|(_, f)| *f).collect();
            (k, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn heterogeneity() -> Outcome {
    let ds3 = mean_final(ScenarioKind::Ds3LabelAndConceptShift);
    let ds1 = mean_final(ScenarioKind::Ds1Iid);
    let base = ds3[0].1;
    let mut ok = true;
    let mut parts = vec![format!("DS3 FedAvg {base:.2}")];
    for kind in [StrategyKind::FedProx, StrategyKind::Moon, StrategyKind::FedDc, StrategyKind::FedBn] {
        let m = ds3.iter().find(|(k, _)| *k == kind).unwrap().1;
        ok &= m - base >= 2.0;
        parts.push(format!("{kind} {:+.2}", m - base));
    }
    let lo = ds1.iter().map(|(_, f)| *f).fold(f64::INFINITY, f64::min);
    let hi = ds1.iter().map(|(_, f)| *f).fold(f64::NEG_INFINITY, f64::max);
    ok &= hi - lo <= 6.0;
    parts.push(format!("DS1 spread {:.2} ({lo:.2}..{hi:.2}) <= 6", hi - lo));
    let rest: Vec<String> = ds3
        .iter()
        .filter(|(k, _)| matches!(k, StrategyKind::Scaffold | StrategyKind::FedNova | StrategyKind::PFedLa))
        .map(|(k, m)| format!("{k} {:+.2}", m - base))
        .collect();
    parts.push(format!("(not required: {})", rest.join(", ")));
    outcome(ok, format!("need >= +2.00 on DS3: {}", parts.join("; ")))
}

fn sensitivity() -> Outcome {
    let at_round_5 = |epochs: usize| -> f64 {
        let mut f: Vec<f64> = SEEDS
            .par_iter()
            .map(|&s| {
                let mut c = trend_cfg(StrategyKind::FedAvg, ScenarioKind::Ds1Iid, s);
                c.run.rounds = 5;
                c.train.epochs = epochs;
                run_in_memory(&c, None).unwrap().records[4].f1_micro
            })
            .collect();
        f.sort_by(f64::total_cmp);
        f[f.len() / 2]
    };
    let (e1, e3) = (at_round_5(1), at_round_5(3));
    outcome(e1 < e3, format!("median micro-F1 at round 5: E=1 {e1:.2} < E=3 {e3:.2}"))
}

/// Mean local-training milliseconds per client-round, minimum over
/// interleaved repetitions.
fn local_ms() -> Vec<(StrategyKind, f64)> {
    const REPS: usize = 15;
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); StrategyKind::ALL.len()];
    for rep in 0..REPS {
        for (i, &kind) in StrategyKind::ALL.iter().enumerate() {
            let mut c = trend_cfg(kind, ScenarioKind::Ds1Iid, rep as u64);
            c.run.rounds = 2;
            c.run.threads = 1;
            let r = run_in_memory(&c, None).unwrap();
            let all: Vec<f64> = r.timings.iter().flatten().copied().collect();
            samples[i].push(all.iter().sum::<f64>() / all.len() as f64);
        }
    }
    StrategyKind::ALL.iter().zip(samples).map(|(&k, v)| (k, v.into_iter().fold(f64::INFINITY, f64::min))).collect()
}

fn timing() -> Outcome {
    let t = local_ms();
    let get = |k: StrategyKind| t.iter().find(|(kk, _)| *kk == k).unwrap().1;
    let approx = |a: f64, b: f64| (a / b - 1.0).abs() <= 0.10;
    use StrategyKind::*;
    let cheap = [FedAvg, FedNova, FedBn, PFedLa];
    let cheap_max = cheap.iter().map(|&k| get(k)).fold(0.0, f64::max);
    let checks = [
        ("MOON > SCAFFOLD, FedDC", get(Moon) > get(Scaffold).max(get(FedDc))),
        ("SCAFFOLD ~ FedDC", approx(get(Scaffold), get(FedDc))),
        ("SCAFFOLD, FedDC > FedProx", get(Scaffold).min(get(FedDc)) > get(FedProx)),
        ("FedProx > FedAvg group", get(FedProx) > cheap_max),
        ("FedAvg ~ FedNova ~ FedBN ~ pFedLA", cheap.iter().all(|&k| approx(get(k), get(FedAvg)))),
        ("MOON/FedAvg > 1.2", get(Moon) / get(FedAvg) > 1.2),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let times: Vec<String> = t.iter().map(|(k, ms)| format!("{k} {ms:.2}")).collect();
    let verdict =
        if failed.is_empty() { "all orderings hold".to_string() } else { format!("violated: {}", failed.join("; ")) };
    outcome(
        failed.is_empty(),
        format!("ms/client-round [{}], MOON/FedAvg {:.2}; {verdict}", times.join(", "), get(Moon) / get(FedAvg)),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for kind in StrategyKind::ALL {
        let mut c = small_cfg(kind, 3, 3);
        c.run.scenario = ScenarioKind::Ds3LabelAndConceptShift;
        c.run.threads = 1;
        let read = |tag: &str| {
            let dir = tmp.path().join(format!("{kind}-{tag}"));
            run_experiment(&c, &dir, RunOptions::default()).unwrap();
            std::fs::read(dir.join(RECORDS_FILE)).unwrap()
        };
        if read("a") != read("b") {
            failures.push(format!("{kind} records differ"));
        }
    }
    let c = trend_cfg(StrategyKind::FedAvg, ScenarioKind::Ds3LabelAndConceptShift, 9).data;
    let ds = generate_dataset(&c, ScenarioKind::Ds3LabelAndConceptShift).unwrap();
    let path = tmp.path().join("ds.bin");
    fbsim::data::save_dataset(&ds, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    if fbsim::data::load_dataset(&path).unwrap() != ds
        || encode_dataset(&decode_dataset(&bytes).unwrap()).unwrap() != bytes
    {
        failures.push("dataset round trip".into());
    }
    if failures.is_empty() {
        outcome(true, "byte-identical records for all 8 strategies; dataset round trip bit-exact")
    } else {
        outcome(false, failures.join("; "))
    }
}
