//! Versioned feedback and win-rate prompt templates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const TEMPLATE_VERSION: &str = "1";

const FEEDBACK_NO_COT: &str = include_str!("../assets/prompts/feedback-no-cot.txt");
const FEEDBACK_COT: &str = include_str!("../assets/prompts/feedback-cot.txt");
const WIN_RATE: &str = include_str!("../assets/prompts/win-rate.txt");

/// Marker preceding the decision in chain-of-thought replies.
pub const COT_DECISION_MARKER: &str = "Chosen option: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    FeedbackNoCot,
    FeedbackCot,
    WinRate,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [
        TemplateId::FeedbackNoCot,
        TemplateId::FeedbackCot,
        TemplateId::WinRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::FeedbackNoCot => "feedback-no-cot",
            TemplateId::FeedbackCot => "feedback-cot",
            TemplateId::WinRate => "win-rate",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::FeedbackNoCot => FEEDBACK_NO_COT,
            TemplateId::FeedbackCot => FEEDBACK_COT,
            TemplateId::WinRate => WIN_RATE,
        }
    }

    pub fn is_chain_of_thought(self) -> bool {
        self == TemplateId::FeedbackCot
    }

    pub fn takes_principle(self) -> bool {
        self != TemplateId::WinRate
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown template `{s}`")))
    }
}

/// Substitutes the placeholders of a template. `principle` is ignored by the
/// win-rate template, which has no such slot.
pub fn render(
    template: TemplateId,
    principle: &str,
    conversation: &str,
    response_a: &str,
    response_b: &str,
) -> String {
    // Single pass so substituted text containing braces is never re-expanded.
    let src = template.text();
    let mut out = String::with_capacity(src.len() + conversation.len() + 256);
    let mut rest = src;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with("{principle}") {
            (principle, "{principle}".len())
        } else if tail.starts_with("{conversation}") {
            (conversation, "{conversation}".len())
        } else if tail.starts_with("{responseA}") {
            (response_a, "{responseA}".len())
        } else if tail.starts_with("{responseB}") {
            (response_b, "{responseB}".len())
        } else {
            ("{", 1)
        };
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}
