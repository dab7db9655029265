//! A device answering recipes: query checks, budget, privatization, shares
//! and the local audit log.
//!
//! `cargo run --example device_pipeline`

use std::sync::Arc;

use fedstats::device::{Device, DeviceTrustConfig};
use fedstats::ldp::OheMode;
use fedstats::recipe::{parse_recipe, FieldValue, Record};

fn recipe(id: &str, select: &str) -> fedstats::recipe::Recipe {
    parse_recipe(&format!(
        r#"{{"recipe_id": "{id}", "version": 1, "analysis_id": "com.example.keyboard.words",
          "query": {{"stream": "keyboard", "select": [{select}], "filter": {{"op": "prefix_in_tree", "field": "ngram"}}}},
          "budgets": {{"local_epsilon": 5, "aggregate_epsilon": 0.3, "delta": 1e-6, "min_cohort": 1000000}},
          "data_content_type": {{"features": [
            {{"kind": "prefix_tree", "field": "ngram", "prefixes": [""], "vocab": ["hello", "world"]}}]}}}}"#
    ))
    .unwrap()
}

fn main() {
    let trust = Arc::new(DeviceTrustConfig::keyboard_example(OheMode::Asymmetric));
    let mut device = Device::new(1, trust, 2024).unwrap();
    let typed = Record::from([
        ("ngram".to_string(), FieldValue::Text("hello".into())),
        ("age".to_string(), FieldValue::Number(31.0)),
    ]);
    device.ingest_event("keyboard", typed, 0).unwrap();

    let outside = recipe("words.0", r#""ngram", "contacts""#);
    let first = recipe("words.1", r#""ngram""#);
    let again = recipe("words.2", r#""ngram""#);
    for r in [&outside, &first, &again] {
        let resp = device.handle_recipe(r, 60);
        let kind = match resp.egress() {
            Some(e) => format!("shares of {} coordinates", e.share_a.coords.len()),
            None => serde_json::to_string(&resp).unwrap(),
        };
        println!("{}: {kind}", r.recipe_id());
    }
    println!("budget: {:?}", device.budget_snapshot("com.example.keyboard.words").map(|s| s.analysis));
    print!("audit log:\n{}", device.audit_jsonl());
}
