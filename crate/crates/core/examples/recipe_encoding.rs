//! Parse a recipe and map events to histogram bins.
//!
//! `cargo run --example recipe_encoding`

use fedstats::recipe::{parse_recipe, FieldValue, Record};

const RECIPE: &str = r#"{
  "recipe_id": "com.example.keyboard.age_words.1",
  "version": 1,
  "analysis_id": "com.example.keyboard.age_words",
  "query": {"stream": "keyboard", "select": ["age", "ngram"],
            "filter": {"op": "prefix_in_tree", "field": "ngram"}},
  "budgets": {"local_epsilon": 5, "aggregate_epsilon": 1, "delta": 1e-6, "min_cohort": 100000},
  "data_content_type": {"features": [
    {"kind": "numeric_buckets", "field": "age", "boundaries": [0, 18, 35, 65], "upper_bound": 120},
    {"kind": "prefix_tree", "field": "ngram", "prefixes": ["hello", "i"], "vocab": ["world", "am"]}
  ]}
}"#;

fn main() {
    let recipe = parse_recipe(RECIPE).unwrap();
    let spec = recipe.encoding().unwrap();
    println!("{} bins ({} features)", spec.total_bins(), spec.features().len());

    for (age, phrase) in [(25.0, "hello world"), (70.0, "i am"), (40.0, "hello"), (10.0, "i got")] {
        let event = Record::from([
            ("age".to_string(), FieldValue::Number(age)),
            ("ngram".to_string(), FieldValue::Text(phrase.into())),
        ]);
        let bin = spec.encode_event(&event).unwrap();
        assert_eq!(spec.compose(&spec.decompose(bin)), bin);
        println!("age {age:>4}, {phrase:<12} -> bin {bin:>2}  {}", spec.label_string(bin));
    }
}
