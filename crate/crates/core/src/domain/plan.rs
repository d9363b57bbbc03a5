use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ContentItem, ValidationError};

pub const MAX_STEP_NAME_CHARS: usize = 120;
pub const MAX_KEYWORDS: usize = 5;

/// Engine-assigned step identity. Policies never see or produce these directly.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepId(String);

impl StepId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Ids are sequential within a plan; steps are never deleted, so the
    /// ordinal is unique.
    pub fn for_ordinal(ordinal: usize) -> Self {
        Self(format!("step-{ordinal}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for StepId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical form used for step-name identity: ASCII-lowercased, internal
/// whitespace collapsed to single spaces, trailing punctuation stripped.
pub fn normalize_step_name(name: &str) -> Result<String, ValidationError> {
    let collapsed = name
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase();
    let trimmed = collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string();
    if trimmed.is_empty() {
        return Err(ValidationError::Empty { field: "step name" });
    }
    Ok(trimmed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CreatedBy {
    AddSteps,
    AlterSteps,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub created_turn: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_altered_turn: Option<u32>,
    pub created_by: CreatedBy,
}

/// The four policy-authored fields of a step, already normalized and validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDraft {
    pub name: String,
    pub description: String,
    pub follow_up_question: String,
    pub search_keywords: Vec<String>,
}

impl StepDraft {
    /// Applies the step schema rules: trims every field, appends a missing
    /// `?` to the follow-up, drops blank and duplicate keywords and keeps at
    /// most [`MAX_KEYWORDS`].
    pub fn new(
        name: &str,
        description: &str,
        follow_up_question: &str,
        search_keywords: impl IntoIterator<Item = String>,
    ) -> Result<Self, ValidationError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ValidationError::Empty { field: "name" });
        }
        let name_len = name.chars().count();
        if name_len > MAX_STEP_NAME_CHARS {
            return Err(ValidationError::TooLong {
                field: "name",
                len: name_len,
                max: MAX_STEP_NAME_CHARS,
            });
        }
        normalize_step_name(name)?;
        let description = description.trim();
        if description.is_empty() {
            return Err(ValidationError::Empty {
                field: "description",
            });
        }
        let follow_up_question = ensure_question_mark(follow_up_question)
            .ok_or(ValidationError::Empty {
                field: "follow_up_question",
            })?;

        let mut keywords: Vec<String> = Vec::new();
        for kw in search_keywords {
            let kw = kw.trim();
            if kw.is_empty() || keywords.iter().any(|k| k.eq_ignore_ascii_case(kw)) {
                continue;
            }
            keywords.push(kw.to_string());
        }
        keywords.truncate(MAX_KEYWORDS);
        if keywords.is_empty() {
            return Err(ValidationError::Empty {
                field: "search_keywords",
            });
        }

        Ok(Self {
            name: name.to_string(),
            description: description.to_string(),
            follow_up_question,
            search_keywords: keywords,
        })
    }
}

/// Trims and appends `?` when missing. `None` for blank input.
pub(crate) fn ensure_question_mark(text: &str) -> Option<String> {
    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    if text.ends_with('?') {
        Some(text.to_string())
    } else {
        Some(format!("{text}?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_id: StepId,
    pub name: String,
    pub description: String,
    pub follow_up_question: String,
    pub search_keywords: Vec<String>,
    #[serde(default)]
    pub content_items: Vec<ContentItem>,
    pub provenance: Provenance,
}

impl PlanStep {
    pub fn from_draft(step_id: StepId, draft: StepDraft, provenance: Provenance) -> Self {
        Self {
            step_id,
            name: draft.name,
            description: draft.description,
            follow_up_question: draft.follow_up_question,
            search_keywords: draft.search_keywords,
            content_items: Vec::new(),
            provenance,
        }
    }

    pub fn normalized_name(&self) -> String {
        normalize_step_name(&self.name).unwrap_or_default()
    }

    pub fn draft(&self) -> StepDraft {
        StepDraft {
            name: self.name.clone(),
            description: self.description.clone(),
            follow_up_question: self.follow_up_question.clone(),
            search_keywords: self.search_keywords.clone(),
        }
    }

    /// True when any policy-authored field differs.
    pub fn schema_differs(&self, other: &PlanStep) -> bool {
        self.name != other.name
            || self.description != other.description
            || self.follow_up_question != other.follow_up_question
            || self.search_keywords != other.search_keywords
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    pub version: u64,
}

impl Plan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &StepId) -> Option<&PlanStep> {
        self.steps.iter().find(|s| &s.step_id == id)
    }

    pub fn get_mut(&mut self, id: &StepId) -> Option<&mut PlanStep> {
        self.steps.iter_mut().find(|s| &s.step_id == id)
    }

    /// Resolves a policy-supplied step name through [`normalize_step_name`].
    pub fn find_by_name(&self, name: &str) -> Option<&PlanStep> {
        let wanted = normalize_step_name(name).ok()?;
        self.steps.iter().find(|s| s.normalized_name() == wanted)
    }

    pub fn next_step_id(&self) -> StepId {
        StepId::for_ordinal(self.steps.len() + 1)
    }

    /// Compact listing used inside prompts.
    pub fn render_for_prompt(&self) -> String {
        if self.steps.is_empty() {
            return "(empty)".to_string();
        }
        self.steps
            .iter()
            .map(|s| {
                format!(
                    "[{}] {}: {} (follow-up: {}; keywords: {})",
                    s.step_id,
                    s.name,
                    s.description,
                    s.follow_up_question,
                    s.search_keywords.join(", ")
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Checks the plan-level uniqueness invariant.
    pub fn names_distinct(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.steps.iter().all(|s| seen.insert(s.normalized_name()))
    }
}

/// A before/after pair for one altered step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alteration {
    pub before: PlanStep,
    pub after: PlanStep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDiff {
    pub added_steps: Vec<PlanStep>,
    pub altered_steps: Vec<Alteration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_asked: Option<String>,
}

impl PlanDiff {
    pub fn is_empty(&self) -> bool {
        self.added_steps.is_empty() && self.altered_steps.is_empty() && self.question_asked.is_none()
    }

    pub fn changes_plan(&self) -> bool {
        !self.added_steps.is_empty() || !self.altered_steps.is_empty()
    }

    /// Replays the diff onto `base`: altered steps are replaced in place and
    /// added steps appended. The version is not touched.
    pub fn apply(&self, base: &Plan) -> Plan {
        let mut out = base.clone();
        for alt in &self.altered_steps {
            if let Some(slot) = out.get_mut(&alt.after.step_id) {
                *slot = alt.after.clone();
            }
        }
        out.steps.extend(self.added_steps.iter().cloned());
        out
    }
}

/// Structural diff keyed by step id. Steps missing from `new` are ignored;
/// plans only ever grow.
pub fn diff_plans(old: &Plan, new: &Plan) -> PlanDiff {
    let mut diff = PlanDiff::default();
    for step in &new.steps {
        match old.get(&step.step_id) {
            None => diff.added_steps.push(step.clone()),
            Some(prev) if prev != step => diff.altered_steps.push(Alteration {
                before: prev.clone(),
                after: step.clone(),
            }),
            Some(_) => {}
        }
    }
    diff
}
