//! The three sub-policies that carry out a macro-action, and the step parser
//! they share.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    ensure_question_mark, normalize_step_name, Context, CreatedBy, Plan, PlanStep, Provenance,
    StepDraft, StepId, UserModelSummary, ValidationError,
};
use crate::gateway::Gateway;
use crate::policy::{call_structured, PolicyConfig, PolicyFailure};
use crate::structured::{extract_object, field, string_field, string_list_field, JsonObject};

/// Most steps one add-steps call may contribute.
pub const MAX_STEPS_PER_BATCH: usize = 5;

const STEP_HINT: &str = r#"Each step is {"name": string, "description": string, "follow_up_question": string, "search_keywords": [string, ...]}."#;
const ADD_HINT: &str = r#"Required schema: {"thought": string, "steps": [step, ...], "user_model_summary": string} with 1 to 5 steps."#;
const ALTER_HINT: &str = r#"Required schema: {"thought": string, "step": step}. The altered step must differ from the original."#;
const ASK_HINT: &str = r#"Required schema: {"thought": string, "question": string}."#;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepParseError {
    #[error("missing: {0}")]
    Missing(&'static str),
    #[error("malformed step ({message}): {raw}")]
    Shape { message: String, raw: String },
    #[error("invalid step: {0}")]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, thiserror::Error)]
pub enum SubPolicyError {
    #[error(transparent)]
    Execution(#[from] PolicyFailure),
    #[error("every generated step collided with an existing step: {dropped:?}")]
    EmptyResult { dropped: Vec<String> },
    #[error("no step named {0:?} in the plan")]
    UnknownStep(String),
}

/// Parses one step object out of a raw text fragment.
pub fn parse_plan_step(raw: &str) -> Result<StepDraft, StepParseError> {
    let obj = extract_object(raw).map_err(|message| StepParseError::Shape {
        message,
        raw: raw.to_string(),
    })?;
    step_from_object(&obj)
}

fn step_from_value(value: &Value) -> Result<StepDraft, StepParseError> {
    match value {
        Value::Object(obj) => step_from_object(obj),
        other => Err(StepParseError::Shape {
            message: "step must be an object".into(),
            raw: other.to_string(),
        }),
    }
}

fn step_from_object(obj: &JsonObject) -> Result<StepDraft, StepParseError> {
    let shape = |message: String| StepParseError::Shape {
        message,
        raw: Value::Object(obj.clone()).to_string(),
    };
    let name = string_field(obj, &["name", "step_name", "title"])
        .map_err(shape)?
        .ok_or(StepParseError::Missing("name"))?;
    let description = string_field(obj, &["description"])
        .map_err(shape)?
        .ok_or(StepParseError::Missing("description"))?;
    let follow_up = string_field(obj, &["follow_up_question", "follow_up", "question"])
        .map_err(shape)?
        .ok_or(StepParseError::Missing("follow_up_question"))?;
    let keywords = string_list_field(obj, &["search_keywords", "keywords"])
        .map_err(shape)?
        .ok_or(StepParseError::Missing("search_keywords"))?;
    Ok(StepDraft::new(&name, &description, &follow_up, keywords)?)
}

// ---------------------------------------------------------------------------
// add-steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddStepsResult {
    pub new_steps: Vec<PlanStep>,
    pub thought: String,
    pub user_model_summary: UserModelSummary,
    /// Generated names dropped because they collided with the plan or with
    /// an earlier step in the same batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
}

struct AddStepsOutput {
    thought: String,
    drafts: Vec<StepDraft>,
    summary: String,
}

fn parse_add_steps(text: &str) -> Result<AddStepsOutput, String> {
    let obj = extract_object(text)?;
    let steps = match field(&obj, &["steps", "new_steps"]) {
        Some(Value::Array(items)) => items,
        Some(_) => return Err("steps must be a list".into()),
        None => return Err("missing: steps".into()),
    };
    if steps.is_empty() {
        return Err("steps must contain at least one step".into());
    }
    let drafts = steps
        .iter()
        .take(MAX_STEPS_PER_BATCH)
        .enumerate()
        .map(|(i, v)| step_from_value(v).map_err(|e| format!("step {i}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AddStepsOutput {
        thought: string_field(&obj, &["thought"])?.unwrap_or_default(),
        drafts,
        summary: string_field(&obj, &["user_model_summary", "user_summary", "summary"])?
            .unwrap_or_default(),
    })
}

pub fn execute_add_steps(
    gateway: &Gateway,
    context: &Context,
    plan: &Plan,
    arguments: &[String],
    config: &PolicyConfig,
) -> Result<AddStepsResult, SubPolicyError> {
    let ctx = context.render();
    let plan_text = plan.render_for_prompt();
    let args = serde_json::to_string(arguments).unwrap_or_default();
    let prompt = config.render(&[("context", &ctx), ("plan", &plan_text), ("arguments", &args)]);
    let hint = format!("{ADD_HINT} {STEP_HINT}");
    let parsed = call_structured(gateway, config, &prompt, &hint, parse_add_steps)?;

    let turn = context.current_observation.turn_index;
    let mut taken: Vec<String> = plan.steps.iter().map(|s| s.normalized_name()).collect();
    let mut new_steps = Vec::new();
    let mut dropped = Vec::new();
    for draft in parsed.value.drafts {
        let key = normalize_step_name(&draft.name).expect("validated draft name");
        if taken.contains(&key) {
            tracing::info!(step = %draft.name, "dropping generated step: name already in plan");
            dropped.push(draft.name);
            continue;
        }
        taken.push(key);
        let id = StepId::for_ordinal(plan.steps.len() + new_steps.len() + 1);
        new_steps.push(PlanStep::from_draft(
            id,
            draft,
            Provenance {
                created_turn: turn,
                last_altered_turn: None,
                created_by: CreatedBy::AddSteps,
            },
        ));
    }
    if new_steps.is_empty() {
        return Err(SubPolicyError::EmptyResult { dropped });
    }
    Ok(AddStepsResult {
        new_steps,
        thought: parsed.value.thought,
        user_model_summary: UserModelSummary {
            text: parsed.value.summary,
            updated_turn: turn,
        },
        dropped,
    })
}

// ---------------------------------------------------------------------------
// alter-steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlterStepResult {
    pub target_step_id: StepId,
    pub altered_step: PlanStep,
    pub thought: String,
}

pub fn execute_alter_step(
    gateway: &Gateway,
    context: &Context,
    plan: &Plan,
    target_name: &str,
    config: &PolicyConfig,
) -> Result<AlterStepResult, SubPolicyError> {
    let original = plan
        .find_by_name(target_name)
        .ok_or_else(|| SubPolicyError::UnknownStep(target_name.to_string()))?
        .clone();
    let ctx = context.render();
    let plan_text = plan.render_for_prompt();
    let target = serde_json::to_string(&original.draft()).unwrap_or_default();
    let prompt = config.render(&[("context", &ctx), ("plan", &plan_text), ("target_step", &target)]);
    let hint = format!("{ALTER_HINT} {STEP_HINT}");

    let parse = |text: &str| -> Result<(StepDraft, String), String> {
        let obj = extract_object(text)?;
        let draft = match field(&obj, &["step", "altered_step"]) {
            Some(v) => step_from_value(v),
            None => step_from_object(&obj),
        }
        .map_err(|e| e.to_string())?;
        let key = normalize_step_name(&draft.name).map_err(|e| e.to_string())?;
        if plan
            .steps
            .iter()
            .any(|s| s.step_id != original.step_id && s.normalized_name() == key)
        {
            return Err(format!("altered name {:?} collides with another step", draft.name));
        }
        if draft == original.draft() {
            return Err("altered step is identical to the original".into());
        }
        Ok((draft, string_field(&obj, &["thought"])?.unwrap_or_default()))
    };
    let parsed = call_structured(gateway, config, &prompt, &hint, parse)?;
    let (draft, thought) = parsed.value;

    let altered_step = PlanStep::from_draft(
        original.step_id.clone(),
        draft,
        Provenance {
            last_altered_turn: Some(context.current_observation.turn_index),
            ..original.provenance.clone()
        },
    );
    Ok(AlterStepResult {
        target_step_id: original.step_id,
        altered_step,
        thought,
    })
}

// ---------------------------------------------------------------------------
// ask-question
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question: String,
    pub thought: String,
}

fn parse_question(text: &str) -> Result<QuestionResult, String> {
    let obj = extract_object(text)?;
    let question = string_field(&obj, &["question"])?.ok_or("missing: question")?;
    let question = ensure_question_mark(&question).ok_or("question is empty")?;
    Ok(QuestionResult {
        question,
        thought: string_field(&obj, &["thought"])?.unwrap_or_default(),
    })
}

/// The plan is not an input here; asking never changes it.
pub fn execute_ask_question(
    gateway: &Gateway,
    context: &Context,
    arguments: &[String],
    config: &PolicyConfig,
) -> Result<QuestionResult, SubPolicyError> {
    let ctx = context.render();
    let args = if arguments.is_empty() {
        "(none)".to_string()
    } else {
        arguments.join("; ")
    };
    let prompt = config.render(&[("context", &ctx), ("arguments", &args)]);
    Ok(call_structured(gateway, config, &prompt, ASK_HINT, parse_question)?.value)
}
