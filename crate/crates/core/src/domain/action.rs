use std::fmt;

use serde::{Deserialize, Serialize};

use super::ValidationError;

/// The closed set of macro-actions the meta-controller may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    AddSteps,
    AlterSteps,
    AskQuestion,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [
        ActionKind::AddSteps,
        ActionKind::AlterSteps,
        ActionKind::AskQuestion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::AddSteps => "add-steps",
            ActionKind::AlterSteps => "alter-steps",
            ActionKind::AskQuestion => "ask-question",
        }
    }

    /// Case-insensitive match with `_`/space folded to `-`. The singular
    /// spellings `add-step` / `alter-step` are accepted as well.
    pub fn parse_loose(raw: &str) -> Option<Self> {
        let folded: String = raw
            .trim()
            .chars()
            .map(|c| match c {
                '_' | ' ' => '-',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        match folded.as_str() {
            "add-steps" | "add-step" => Some(ActionKind::AddSteps),
            "alter-steps" | "alter-step" => Some(ActionKind::AlterSteps),
            "ask-question" => Some(ActionKind::AskQuestion),
            _ => None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Thought, discrete action and natural-language arguments, plus the
/// verbatim policy output it was parsed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroAction {
    pub thought: String,
    pub action: ActionKind,
    pub arguments: Vec<String>,
    pub raw: String,
}

impl MacroAction {
    pub fn new(
        thought: impl Into<String>,
        action: ActionKind,
        arguments: Vec<String>,
        raw: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let ma = Self {
            thought: thought.into(),
            action,
            arguments,
            raw: raw.into(),
        };
        ma.validate()?;
        Ok(ma)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.arguments.iter().any(|a| a.trim().is_empty()) {
            return Err(ValidationError::Empty { field: "arguments" });
        }
        if self.action == ActionKind::AlterSteps && self.arguments.is_empty() {
            return Err(ValidationError::Invalid(
                "alter-steps requires at least one step name argument".into(),
            ));
        }
        Ok(())
    }
}
