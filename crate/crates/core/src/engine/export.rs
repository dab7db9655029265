use serde::Serialize;

use super::{DiscoveryState, RoundResult};

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `bin_label,estimate,stderr`, one row per bin in index order.
pub fn histogram_csv(result: &RoundResult) -> String {
    let mut out = String::from("bin_label,estimate,stderr\n");
    for ((label, est), se) in result.labels.iter().zip(result.estimates()).zip(&result.stderr) {
        out.push_str(&format!("{},{est},{se}\n", csv_field(label)));
    }
    out
}

/// `length,phrase,estimate,stderr,terminal` for every accepted phrase.
pub fn phrases_csv(state: &DiscoveryState) -> String {
    let mut out = String::from("length,phrase,estimate,stderr,terminal\n");
    let words = |p: &str| p.split_whitespace().count();
    for level in &state.levels {
        for p in level {
            out.push_str(&format!(
                "{},{},{},{},false\n",
                words(&p.phrase),
                csv_field(&p.phrase),
                p.estimate,
                p.stderr
            ));
        }
    }
    for p in &state.terminal {
        out.push_str(&format!(
            "{},{},{},{},true\n",
            words(&p.phrase),
            csv_field(&p.phrase),
            p.estimate,
            p.stderr
        ));
    }
    out
}

/// Compact JSON with a fixed field order.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("engine documents serialise")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        assert_eq!(csv_field("a"), "a");
        assert_eq!(csv_field("[20, 30) | a"), "\"[20, 30) | a\"");
        assert_eq!(csv_field("x,\"y\""), "\"x,\"\"y\"\"\"");
    }
}
