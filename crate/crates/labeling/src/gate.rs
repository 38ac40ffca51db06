//! The entry question that screens out answers copied from a language model.

use serde::{Deserialize, Serialize};

pub const RIDDLE: &str = include_str!("../assets/gate-riddle.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub question: String,
    /// An answer must contain at least one of these phrases.
    pub accept_any: Vec<String>,
    /// and none of these.
    pub deny: Vec<String>,
}

impl Default for GateConfig {
    fn default() -> Self {
        let words = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        GateConfig {
            question: RIDDLE.to_string(),
            accept_any: words(&["across", "cross", "other side"]),
            // fragments of the classic multi-trip solution
            deny: words(&[
                "cabbage", "wolf", "trip", "return", "back", "again", "first", "then", "leave", "alone",
            ]),
        }
    }
}

fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl GateConfig {
    pub fn passes(&self, answer: &str) -> bool {
        let a = normalize(answer);
        !a.is_empty()
            && self.accept_any.iter().any(|p| a.contains(&normalize(p)))
            && !self.deny.iter().any(|p| a.contains(&normalize(p)))
    }
}
