use fbsim::data::{
    decode_dataset, encode_dataset, generate_dataset, generate_global_pool, heterogeneity_report, partition,
    ScenarioKind, SyntheticConfig,
};
use proptest::prelude::*;

fn pool_cfg(seed: u64) -> SyntheticConfig {
    SyntheticConfig { seed, num_clients: 7, samples_per_client_mean: 400, ..SyntheticConfig::default() }
}

fn max_js(cfg: &SyntheticConfig, scenario: ScenarioKind) -> (f64, f64) {
    let pool = generate_global_pool(cfg).unwrap();
    let clients = partition(&pool, cfg, scenario).unwrap();
    let r = heterogeneity_report(&clients).unwrap();
    (r.mean_js, r.max_js)
}

#[test]
fn iid_split_has_low_divergence() {
    let (_, max) = max_js(&pool_cfg(3), ScenarioKind::Ds1Iid);
    assert!(max < 0.01, "max JS {max}");
}

#[test]
fn label_skew_is_far_above_iid() {
    let cfg = SyntheticConfig { dirichlet_beta: 0.1, ..pool_cfg(3) };
    let (_, iid) = max_js(&cfg, ScenarioKind::Ds1Iid);
    let (_, skew) = max_js(&cfg, ScenarioKind::Ds2LabelSkew);
    assert!(skew > 5.0 * iid, "ds2 {skew} vs ds1 {iid}");
}

#[test]
fn divergence_ordering_across_scenarios() {
    let cfg = pool_cfg(9);
    let (d1, _) = max_js(&cfg, ScenarioKind::Ds1Iid);
    let (d2, _) = max_js(&cfg, ScenarioKind::Ds2LabelSkew);
    let (d3, _) = max_js(&cfg, ScenarioKind::Ds3LabelAndConceptShift);
    assert!(d1 < d2 && d2 <= d3, "{d1} {d2} {d3}");
}

#[test]
fn concept_shift_only_on_ds3_clients() {
    let cfg = pool_cfg(1);
    let ds1 = generate_dataset(&cfg, ScenarioKind::Ds1Iid).unwrap();
    let ds3 = generate_dataset(&cfg, ScenarioKind::Ds3LabelAndConceptShift).unwrap();
    assert!(heterogeneity_report(&ds1.clients).unwrap().shift_magnitudes.iter().all(|&m| m == 0.0));
    assert!(heterogeneity_report(&ds3.clients).unwrap().shift_magnitudes.iter().all(|&m| m > 0.0));
    assert!(ds3.clients.iter().all(|c| c.provenance.shift_applied));
    assert!(ds1.clients.iter().all(|c| !c.provenance.shift_applied));
    // the shared test split is the same, unshifted, in every scenario
    assert_eq!(ds1.test, ds3.test);
}

#[test]
fn report_matrix_is_symmetric_with_zero_diagonal() {
    let ds = generate_dataset(&pool_cfg(2), ScenarioKind::Ds2LabelSkew).unwrap();
    let r = heterogeneity_report(&ds.clients).unwrap();
    let k = r.js_divergence.len();
    for i in 0..k {
        assert_eq!(r.js_divergence[i][i], 0.0);
        for j in 0..k {
            assert_eq!(r.js_divergence[i][j], r.js_divergence[j][i]);
            assert!((0.0..=std::f64::consts::LN_2).contains(&r.js_divergence[i][j]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5))]

    #[test]
    fn label_skew_raises_mean_divergence(seed in 0u64..10_000, beta in 0.05f64..=0.5) {
        let cfg = SyntheticConfig { dirichlet_beta: beta, ..pool_cfg(seed) };
        prop_assert!(cfg.train_size() >= 2000);
        let (d1, _) = max_js(&cfg, ScenarioKind::Ds1Iid);
        let (d2, _) = max_js(&cfg, ScenarioKind::Ds2LabelSkew);
        prop_assert!(d1 < d2, "ds1 {} ds2 {}", d1, d2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_invariants(
        seed in 0u64..10_000,
        k in 1usize..9,
        per in 5usize..40,
        scenario in prop::sample::select(ScenarioKind::ALL.to_vec()),
        noise in 0.0f64..0.4,
    ) {
        let cfg = SyntheticConfig {
            seed,
            num_clients: k,
            samples_per_client_mean: per,
            input_dim: 5,
            num_classes: 4,
            label_noise_rate: noise,
            ..SyntheticConfig::default()
        };
        let ds = generate_dataset(&cfg, scenario).unwrap();
        prop_assert_eq!(ds.clients.len(), k);
        prop_assert_eq!(ds.sizes().iter().sum::<usize>(), cfg.train_size());
        for c in &ds.clients {
            prop_assert!(!c.is_empty());
            for row in c.labels.rows() {
                prop_assert!(row.iter().any(|&y| y == 1.0));
            }
        }
        // determinism and a bit-exact container round trip
        prop_assert_eq!(&generate_dataset(&cfg, scenario).unwrap(), &ds);
        let bytes = encode_dataset(&ds).unwrap();
        prop_assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }
}
