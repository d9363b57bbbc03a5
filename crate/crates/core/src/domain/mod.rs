//! Value types shared by every layer of the engine.
//!
//! Everything here serializes to JSON with snake_case field names. That
//! serialization is both the HTTP wire format and the on-disk event format,
//! so field order and naming are part of the contract.

mod action;
mod context;
mod plan;

pub use action::{ActionKind, MacroAction};
pub use context::{
    Context, Eviction, HistoryEntry, RenderedContext, DEFAULT_CONTEXT_BUDGET, SECTION_GOAL,
    SECTION_HISTORY, SECTION_OBSERVATION, SECTION_PRIOR_ACTIONS,
};
pub(crate) use plan::ensure_question_mark;
pub use plan::{
    diff_plans, normalize_step_name, Alteration, CreatedBy, Plan, PlanDiff, PlanStep, Provenance,
    StepDraft, StepId, MAX_KEYWORDS, MAX_STEP_NAME_CHARS,
};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("{field} must not be empty")]
    Empty { field: &'static str },
    #[error("{field} is too long ({len} > {max} chars)")]
    TooLong {
        field: &'static str,
        len: usize,
        max: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// What the user wants to achieve. Seeds the session and closes every context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub text: String,
    pub created_at: DateTime<Utc>,
}

impl Goal {
    pub fn new(text: impl Into<String>, created_at: DateTime<Utc>) -> Result<Self, ValidationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValidationError::Empty { field: "goal" });
        }
        Ok(Self { text, created_at })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationKind {
    InitialGoal,
    QuestionAnswer,
    FreeFormFeedback,
}

impl ObservationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObservationKind::InitialGoal => "initial-goal",
            ObservationKind::QuestionAnswer => "question-answer",
            ObservationKind::FreeFormFeedback => "free-form-feedback",
        }
    }
}

/// The per-step follow-up question a `question-answer` observation responds to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsweredQuestion {
    pub step_id: StepId,
    pub question: String,
}

/// One natural-language utterance from the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_question: Option<AnsweredQuestion>,
    pub turn_index: u32,
}

impl Observation {
    pub fn new(
        kind: ObservationKind,
        text: impl Into<String>,
        answered_question: Option<AnsweredQuestion>,
        turn_index: u32,
    ) -> Result<Self, ValidationError> {
        let obs = Self {
            kind,
            text: text.into(),
            answered_question,
            turn_index,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn initial_goal(text: impl Into<String>) -> Result<Self, ValidationError> {
        Self::new(ObservationKind::InitialGoal, text, None, 0)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.text.trim().is_empty() {
            return Err(ValidationError::Empty {
                field: "observation text",
            });
        }
        match (self.kind, &self.answered_question) {
            (ObservationKind::QuestionAnswer, None) => Err(ValidationError::Invalid(
                "question-answer observation requires answered_question".into(),
            )),
            (ObservationKind::QuestionAnswer, Some(aq)) if aq.question.trim().is_empty() => {
                Err(ValidationError::Empty {
                    field: "answered_question.question",
                })
            }
            (ObservationKind::QuestionAnswer, Some(_)) => Ok(()),
            (_, Some(_)) => Err(ValidationError::Invalid(format!(
                "answered_question is only allowed on question-answer observations, not {}",
                self.kind.as_str()
            ))),
            (_, None) => Ok(()),
        }
    }
}

/// A resource attached to a plan step by the retrieve-then-rank layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentItem {
    pub title: String,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
    pub source_tool: String,
    pub fetch_rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_rank: Option<u32>,
}

/// What the add-steps policy has learned about the user so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserModelSummary {
    pub text: String,
    pub updated_turn: u32,
}
