//! The meta-controller: assembles the context and asks the controller policy
//! for the next macro-action.

use serde::{Deserialize, Serialize};

use crate::domain::{ActionKind, Context, Goal, HistoryEntry, MacroAction, Observation, Plan};
use crate::gateway::Gateway;
use crate::policy::{call_structured, PolicyConfig, PolicyFailure};
use crate::structured::{extract_object, string_field, string_list_field};

const SCHEMA_HINT: &str = r#"Required schema: {"thought": string, "action": "add-steps" | "alter-steps" | "ask-question", "arguments": [string, ...]}. alter-steps needs at least one step name."#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDecision {
    pub macro_action: MacroAction,
    pub attempts: u32,
    pub context_snapshot: Context,
}

/// Composes the context for the turn that `observation` opens, then trims it
/// to `budget` characters. The observation must carry the next turn index,
/// i.e. `history.len()`.
pub fn build_context(
    goal: &Goal,
    history: &[HistoryEntry],
    prior_macro_actions: &[MacroAction],
    observation: Observation,
    budget: usize,
) -> Context {
    debug_assert_eq!(observation.turn_index as usize, history.len());
    let mut context = Context {
        current_observation: observation,
        history: history.to_vec(),
        prior_macro_actions: prior_macro_actions.to_vec(),
        goal: goal.clone(),
    };
    let eviction = context.fit_to_budget(budget);
    if eviction.history + eviction.macro_actions > 0 {
        tracing::debug!(
            history = eviction.history,
            macro_actions = eviction.macro_actions,
            "context truncated to budget"
        );
    }
    context
}

/// Fills the controller template. `note` carries engine feedback such as an
/// unresolvable step name from a previous attempt in the same turn.
pub fn render_meta_prompt(
    context: &Context,
    plan: &Plan,
    config: &PolicyConfig,
    note: Option<&str>,
) -> String {
    let observation = context.observation_section();
    let history = context.history_section();
    let prior = context.prior_actions_section();
    let goal = context.goal_section();
    let plan_text = plan.render_for_prompt();
    let mut prompt = config.render(&[
        ("observation", &observation),
        ("history", &history),
        ("prior_actions", &prior),
        ("goal", &goal),
        ("plan", &plan_text),
    ]);
    if let Some(note) = note {
        prompt.push_str("\n\n## Engine note\n");
        prompt.push_str(note);
    }
    prompt
}

/// Accepts a single JSON object `{thought, action, arguments}`; unknown
/// fields are ignored and `arguments` may be one string.
pub fn parse_macro_action(text: &str) -> Result<MacroAction, String> {
    let obj = extract_object(text)?;
    let action_raw = string_field(&obj, &["action", "z"])?.ok_or("missing: action")?;
    let action = ActionKind::parse_loose(&action_raw).ok_or_else(|| {
        format!("unknown action {action_raw:?}; expected add-steps, alter-steps or ask-question")
    })?;
    let thought = string_field(&obj, &["thought", "reasoning"])?.unwrap_or_default();
    let arguments: Vec<String> = string_list_field(&obj, &["arguments", "args"])?.unwrap_or_default();
    let arguments = arguments.into_iter().filter(|a| !a.is_empty()).collect();
    MacroAction::new(thought.trim(), action, arguments, text).map_err(|e| e.to_string())
}

/// Asks the controller policy for one macro-action. Read-only over session
/// state; the plan is only rendered into the prompt.
pub fn decide_macro_action(
    gateway: &Gateway,
    context: &Context,
    plan: &Plan,
    config: &PolicyConfig,
    note: Option<&str>,
) -> Result<MetaDecision, PolicyFailure> {
    let prompt = render_meta_prompt(context, plan, config, note);
    let parsed = call_structured(gateway, config, &prompt, SCHEMA_HINT, parse_macro_action)?;
    Ok(MetaDecision {
        macro_action: parsed.value,
        attempts: parsed.attempts,
        context_snapshot: context.clone(),
    })
}
