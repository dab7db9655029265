use std::sync::Arc;

use fedstats::device::{Device, DeviceTrustConfig};
use fedstats::engine::synthetic::{default_plan, trust_for_plan, SyntheticFleet, VOCAB};
use fedstats::engine::{
    extend_prefixes, first_recipe, histogram_csv, phrases_csv, run_discovery, select_frequent, to_canonical_json,
    DiscoveryPlan, DiscoveryStatus, Engine, EngineError, Fleet, RoundOutcome,
};
use fedstats::ldp::{debias, sum_reports, LocalEpsilon, OheMode, PrivatizedReport};
use fedstats::recipe::{FieldValue, Record};

fn plan(eps0: f64, total: f64, m: u64, max_length: usize) -> DiscoveryPlan {
    DiscoveryPlan {
        local_epsilon: LocalEpsilon::new(eps0).unwrap(),
        total_epsilon: total,
        min_cohort: m,
        max_length,
        ..default_plan()
    }
}

fn fleet_typing(trust: &Arc<DeviceTrustConfig>, phrases: &[&str], seed: u64) -> Fleet {
    let devices = phrases
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d = Device::new(i as u64, trust.clone(), seed).unwrap();
            d.enable_test_mode();
            if !p.is_empty() {
                let rec = Record::from([("ngram".to_string(), FieldValue::Text(p.to_string()))]);
                d.ingest_event("keyboard", rec, 0).unwrap();
            }
            d
        })
        .collect();
    Fleet::new(devices)
}

fn bin_of(result: &fedstats::engine::RoundResult, label: &str) -> usize {
    result.labels.iter().position(|l| l == label).unwrap()
}

#[test]
fn three_devices_typing_hello() {
    let p = plan(10.0, 300.0, 3, 3);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let mut fleet = fleet_typing(&trust, &["hello"; 3], 5);
    let mut engine = Engine::new(trust);
    let outcome = engine.run_round(&first_recipe(&p).unwrap(), &mut fleet).unwrap();
    let r = outcome.published().expect("published");
    assert_eq!(r.cohort_size, 3);
    let est = r.estimates()[bin_of(r, "hello")];
    assert!((est - 3.0).abs() < 0.5, "{est}");
    assert_eq!(engine.ledger().len(), 1);
    assert_eq!(fleet.audited_egress(&r.recipe_id), 3);
}

#[test]
fn gate_below_threshold() {
    let p = plan(10.0, 300.0, 5, 3);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let mut fleet = fleet_typing(&trust, &["hello"; 3], 5);
    let mut engine = Engine::new(trust);
    let outcome = engine.run_round(&first_recipe(&p).unwrap(), &mut fleet).unwrap();
    assert_eq!(
        outcome,
        RoundOutcome::Gated {
            recipe_id: "com.example.keyboard.discovery.round1".into(),
            min_cohort: 5
        }
    );
    assert!(engine.ledger().is_empty());
    let json = to_canonical_json(&outcome);
    assert!(!json.contains("estimates") && !json.contains("received"));
}

#[test]
fn debiasing_is_linear_over_device_reports() {
    let p = plan(2.0, 300.0, 20, 3);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let phrases: Vec<&str> = (0..40).map(|i| ["i am", "hello world", "", "zzz"][i % 4]).collect();
    let mut fleet = fleet_typing(&trust, &phrases, 9);
    let mut engine = Engine::new(trust);
    let r = engine.run_round(&first_recipe(&p).unwrap(), &mut fleet).unwrap();
    let r = r.published().unwrap();
    let eps0 = p.local_epsilon;
    let reports: Vec<PrivatizedReport> = fleet
        .devices()
        .iter()
        .flat_map(|d| d.retained().iter())
        .map(|k| PrivatizedReport::from_bits(k.report_bits.clone(), OheMode::Symmetric, eps0).unwrap())
        .collect();
    assert_eq!(reports.len(), 40);
    let oracle = debias(OheMode::Symmetric, &sum_reports(&reports, r.labels.len()), 40, eps0).unwrap();
    assert_eq!(r.estimates(), &oracle.estimates[..]);
    // empty devices sent random reports
    assert_eq!(r.deploy.random_reports, 10);
    assert_eq!(r.deploy.sent, 30);
}

#[test]
fn mixed_modes_fault() {
    let p = plan(1.0, 300.0, 500, 3);
    let sym = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let asym = Arc::new(trust_for_plan(&p, OheMode::Asymmetric));
    let mut fleet = fleet_typing(&asym, &["hello"; 500], 1);
    let mut engine = Engine::new(sym);
    let err = engine.run_round(&first_recipe(&p).unwrap(), &mut fleet).unwrap_err();
    assert!(matches!(err, EngineError::MixedMode { .. }), "{err}");
}

#[test]
fn extension_recipe_shape() {
    let p = default_plan();
    let ledger = Default::default();
    let r = extend_prefixes(&["hello world".into(), "i got".into()], &p, 2, &ledger)
        .unwrap()
        .unwrap();
    assert_eq!(r.encoding().unwrap().total_bins(), 23);
    assert_eq!(r.budgets().aggregate_epsilon, 2.0);
    assert!(extend_prefixes(&[], &p, 1, &ledger).unwrap().is_none());

    let mut spent = fedstats::amplification::CompositionLedger::default();
    spent.record(5.0, 1e-6).unwrap();
    assert!(matches!(
        extend_prefixes(&["i".into()], &p, 1, &spent),
        Err(EngineError::PlanExceeded(_))
    ));
    assert!(matches!(
        extend_prefixes(&["i".into()], &p, 3, &ledger),
        Err(EngineError::PlanExceeded(_))
    ));
}

#[test]
fn lone_device_is_gated_everywhere() {
    let p = plan(5.0, 6.0, 1000, 3);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let mut fleet = fleet_typing(&trust, &["hello world"], 2);
    let mut engine = Engine::new(trust);
    let st = run_discovery(&p, &mut engine, &mut fleet).unwrap();
    assert_eq!(st.status, DiscoveryStatus::Gated);
    assert!(st.levels.is_empty() && st.terminal.is_empty());
    assert_eq!(st.round, 0);
}

#[test]
fn max_length_one_runs_one_round() {
    let p = plan(4.0, 100.0, 100, 1);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let (mut fleet, _) = SyntheticFleet::new(400, 3).build(trust.clone());
    let mut engine = Engine::new(trust);
    let st = run_discovery(&p, &mut engine, &mut fleet).unwrap();
    assert_eq!(st.history.len(), 1);
    assert_eq!(st.status, DiscoveryStatus::Done);
    assert!(st.frequent(1).contains(&"i"));
}

#[test]
fn discovery_is_hierarchical_and_within_plan() {
    let p = plan(4.0, 90.0, 500, 3);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let (mut fleet, truth) = SyntheticFleet::new(3000, 8).build(trust.clone());
    let mut engine = Engine::new(trust);
    let mut st = fedstats::engine::DiscoveryState::new(&p.analysis_id);
    while st.step(&p, &mut engine, &mut fleet).unwrap() {
        let (e, d) = st.ledger.basic();
        assert!(e <= p.total_epsilon && d <= p.total_delta);
    }
    assert_eq!(st.status, DiscoveryStatus::Done);
    for l in 1..st.levels.len() {
        for phrase in st.frequent(l + 1) {
            let parent = phrase.rsplit_once(' ').unwrap().0;
            assert!(st.frequent(l).contains(&parent), "{phrase}");
        }
    }
    assert_eq!(truth.ranked(1)[0].0, "i");
    assert!(st.frequent(2).contains(&"i am"));
    let csv = phrases_csv(&st);
    assert!(csv.starts_with("length,phrase,estimate,stderr,terminal\n"));
    assert!(csv.lines().any(|l| l.starts_with("2,i am,")));
    let round1 = st.history[0].published().unwrap();
    let h = histogram_csv(round1);
    assert_eq!(h.lines().count(), 1 + 12);
    assert!(h.lines().nth(1).unwrap().starts_with("OOV,"));
}

#[test]
fn identical_seeds_give_identical_documents() {
    let run = || {
        let p = plan(4.0, 90.0, 200, 2);
        let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
        let (mut fleet, _) = SyntheticFleet::new(500, 4).build(trust.clone());
        let st = run_discovery(&p, &mut Engine::new(trust), &mut fleet).unwrap();
        to_canonical_json(&st)
    };
    assert_eq!(run(), run());
}

#[test]
fn noise_only_rounds_rarely_select() {
    // every device types an out-of-vocabulary word, so all selectable bins
    // have true count zero
    let p = plan(1.0, 10.0, 1000, 1);
    let trust = Arc::new(trust_for_plan(&p, OheMode::Symmetric));
    let mut selected = 0;
    let mut candidates = 0;
    for seed in 0..20 {
        let mut fleet = fleet_typing(&trust, &["zzz"; 2000], seed);
        let mut engine = Engine::new(trust.clone());
        let r = engine.run_round(&first_recipe(&p).unwrap(), &mut fleet).unwrap();
        let r = r.published().unwrap();
        selected += select_frequent(r, 3.0).len();
        candidates += VOCAB.len();
        let leaf_oov = bin_of(r, "<oov>");
        assert!(r.estimates()[leaf_oov] > 1500.0);
    }
    assert!(selected as f64 <= 0.05 * candidates as f64, "{selected}/{candidates}");
}

#[test]
fn trust_config_round_trips_as_json() {
    let t = trust_for_plan(&default_plan(), OheMode::Symmetric);
    let text = serde_json::to_string(&t).unwrap();
    assert_eq!(DeviceTrustConfig::from_json(&text).unwrap(), t);
    let bad = text.replacen("\"analyses\"", "\"analyses\":{},\"extra\"", 1);
    assert!(DeviceTrustConfig::from_json(&bad).is_err());
}
