//! Golden transcript replay.
//!
//! A transcript bundles a goal, the user messages that follow it, the
//! gateway script that answers every policy call, and the expected outcome.
//! Replay runs it in-process with a fixed clock and produces a report whose
//! text form is stable across runs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::content::{ContentPipeline, ContentSettings, RawItem, StubTool, ToolRegistry};
use crate::domain::{normalize_step_name, ActionKind, AnsweredQuestion, Observation, ObservationKind};
use crate::engine::{FixedClock, PlannerEngine, TurnResult};
use crate::gateway::{Gateway, Script};
use crate::policy::PolicySet;
use crate::store::{MemoryStore, SessionId, SessionState, TurnEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptMessage {
    pub kind: ObservationKind,
    pub text: String,
    /// Name of the step whose follow-up question this message answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answering_step: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub name: String,
    pub goal: String,
    #[serde(default)]
    pub messages: Vec<TranscriptMessage>,
    pub script: Script,
    /// Per-tool keyword fixtures. Without it, two synthetic stub tools are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<HashMap<String, HashMap<String, Vec<RawItem>>>>,
    pub expected_actions: Vec<ActionKind>,
    #[serde(default)]
    pub expected_final_steps: Vec<String>,
    /// Names of the steps expected to be altered over the whole episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_altered_steps: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("cannot read transcript {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed transcript: {0}")]
    Malformed(String),
}

impl Transcript {
    pub fn parse(text: &str) -> Result<Self, TranscriptError> {
        let t: Transcript =
            serde_json::from_str(text).map_err(|e| TranscriptError::Malformed(e.to_string()))?;
        if t.goal.trim().is_empty() {
            return Err(TranscriptError::Malformed("goal is empty".into()));
        }
        for (i, m) in t.messages.iter().enumerate() {
            let needs_step = m.kind == ObservationKind::QuestionAnswer;
            if needs_step != m.answering_step.is_some() {
                return Err(TranscriptError::Malformed(format!(
                    "message {}: answering_step must be set exactly for question-answer",
                    i + 1
                )));
            }
            if m.kind == ObservationKind::InitialGoal {
                return Err(TranscriptError::Malformed(format!(
                    "message {}: only the goal may be initial-goal",
                    i + 1
                )));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| TranscriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn registry(&self) -> ToolRegistry {
        match &self.tools {
            None => ToolRegistry::stub_defaults(),
            Some(tools) => {
                let mut names: Vec<&String> = tools.keys().collect();
                names.sort();
                let mut registry = ToolRegistry::new();
                for name in names {
                    let tool = StubTool::new(name.clone(), tools[name].clone()).with_synthesis(true);
                    registry.register(Arc::new(tool));
                }
                registry
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn_index: u32,
    pub kind: ObservationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<ActionKind>,
    /// The chosen action, or `None` when the turn failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<ActionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub step_names: Vec<String>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub name: String,
    pub turns: Vec<TurnReport>,
    pub final_steps: Vec<String>,
    pub missing_steps: Vec<String>,
    pub altered_steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altered_mismatch: Option<String>,
    /// Steps that changed during an alter turn without being targeted.
    pub locality_violations: Vec<String>,
    pub passed: bool,
}

impl ReplayReport {
    /// Plain-text form used by the CLI.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let show = |a: Option<ActionKind>| a.map_or("-".to_string(), |a| a.to_string());
        let _ = writeln!(out, "transcript: {}", self.name);
        for t in &self.turns {
            let verdict = if t.ok { "ok" } else { "MISMATCH" };
            let _ = write!(
                out,
                "turn {} [{}] expected {} actual {}: {verdict}",
                t.turn_index,
                t.kind.as_str(),
                show(t.expected),
                show(t.actual),
            );
            if let Some(e) = &t.error {
                let _ = write!(out, " (error: {e})");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "final steps ({}):", self.final_steps.len());
        for name in &self.final_steps {
            let _ = writeln!(out, "  - {name}");
        }
        if !self.missing_steps.is_empty() {
            let _ = writeln!(out, "missing steps: {}", self.missing_steps.join(", "));
        }
        if !self.altered_steps.is_empty() {
            let _ = writeln!(out, "altered steps: {}", self.altered_steps.join(", "));
        }
        if let Some(m) = &self.altered_mismatch {
            let _ = writeln!(out, "altered mismatch: {m}");
        }
        for v in &self.locality_violations {
            let _ = writeln!(out, "locality violation: {v}");
        }
        let _ = writeln!(out, "result: {}", if self.passed { "PASS" } else { "FAIL" });
        out
    }
}

/// Everything a replay produced, for callers that want more than the report.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub report: ReplayReport,
    pub session_id: SessionId,
    pub results: Vec<TurnResult>,
    pub events: Vec<TurnEvent>,
    pub final_state: Option<SessionState>,
}

const REPLAY_SESSION: &str = "replay";

pub fn replay(transcript: &Transcript, policies: &PolicySet) -> ReplayOutcome {
    replay_with(transcript, policies, ContentSettings::default())
}

pub fn replay_with(transcript: &Transcript, policies: &PolicySet, settings: ContentSettings) -> ReplayOutcome {
    let clock = FixedClock(DateTime::from_timestamp(1_700_000_000, 0).expect("valid timestamp"));
    let engine = PlannerEngine::new(
        Gateway::scripted(transcript.script.clone()),
        policies.clone(),
        ContentPipeline::new(transcript.registry(), settings),
        Arc::new(MemoryStore::new()),
    )
    .with_clock(Arc::new(clock));
    let session = SessionId::parse(REPLAY_SESSION).expect("valid id");

    let mut turns = Vec::new();
    let mut results = Vec::new();
    let mut record = |turn_index: u32, kind, outcome: Result<TurnResult, String>, results: &mut Vec<TurnResult>| {
        let expected = transcript.expected_actions.get(turn_index as usize).copied();
        let (actual, error, step_names) = match outcome {
            Ok(r) => {
                let names = r.plan.steps.iter().map(|s| s.name.clone()).collect();
                let action = r.macro_action.action;
                results.push(r);
                (Some(action), None, names)
            }
            Err(e) => (None, Some(e), Vec::new()),
        };
        turns.push(TurnReport {
            turn_index,
            kind,
            expected,
            actual,
            ok: expected.is_some() && expected == actual,
            error,
            step_names,
        });
    };

    let first = engine
        .create_session_with_id(session.clone(), &transcript.goal)
        .map_err(|e| e.to_string());
    record(0, ObservationKind::InitialGoal, first, &mut results);

    for (i, message) in transcript.messages.iter().enumerate() {
        let turn_index = i as u32 + 1;
        let outcome = build_observation(&engine, &session, message, turn_index)
            .and_then(|obs| engine.process_turn(&session, obs).map_err(|e| e.to_string()));
        record(turn_index, message.kind, outcome, &mut results);
    }
    // expectations beyond the messages count as mismatches
    for extra in turns.len()..transcript.expected_actions.len() {
        turns.push(TurnReport {
            turn_index: extra as u32,
            kind: ObservationKind::FreeFormFeedback,
            expected: Some(transcript.expected_actions[extra]),
            actual: None,
            error: Some("no message for this turn".into()),
            step_names: Vec::new(),
            ok: false,
        });
    }

    let final_state = engine.state(&session).ok();
    let final_steps: Vec<String> = final_state
        .as_ref()
        .map(|s| s.plan.steps.iter().map(|p| p.name.clone()).collect())
        .unwrap_or_default();
    let normalized: Vec<String> = final_steps
        .iter()
        .filter_map(|n| normalize_step_name(n).ok())
        .collect();
    let missing_steps: Vec<String> = transcript
        .expected_final_steps
        .iter()
        .filter(|want| {
            normalize_step_name(want).map_or(true, |w| !normalized.contains(&w))
        })
        .cloned()
        .collect();

    let mut altered_steps = Vec::new();
    let mut locality_violations = Vec::new();
    let mut previous_plan = crate::domain::Plan::new();
    for r in &results {
        for alt in &r.plan_diff.altered_steps {
            altered_steps.push(alt.after.name.clone());
        }
        if r.macro_action.action == ActionKind::AlterSteps {
            let targeted: Vec<_> = r.plan_diff.altered_steps.iter().map(|a| &a.after.step_id).collect();
            for step in &previous_plan.steps {
                if targeted.contains(&&step.step_id) {
                    continue;
                }
                let unchanged = r.plan.get(&step.step_id).is_some_and(|now| {
                    serde_json::to_string(now).ok() == serde_json::to_string(step).ok()
                });
                if !unchanged {
                    locality_violations.push(format!("turn {}: {}", r.turn_index, step.name));
                }
            }
        }
        previous_plan = r.plan.clone();
    }
    let altered_mismatch = transcript.expected_altered_steps.as_ref().and_then(|want| {
        (want != &altered_steps).then(|| format!("expected {want:?}, got {altered_steps:?}"))
    });

    let passed = turns.iter().all(|t| t.ok)
        && turns.len() == transcript.expected_actions.len()
        && missing_steps.is_empty()
        && altered_mismatch.is_none()
        && locality_violations.is_empty();

    let events = engine.events(&session).unwrap_or_default();
    ReplayOutcome {
        report: ReplayReport {
            name: transcript.name.clone(),
            turns,
            final_steps,
            missing_steps,
            altered_steps,
            altered_mismatch,
            locality_violations,
            passed,
        },
        session_id: session,
        results,
        events,
        final_state,
    }
}

fn build_observation(
    engine: &PlannerEngine,
    session: &SessionId,
    message: &TranscriptMessage,
    turn_index: u32,
) -> Result<Observation, String> {
    let state = engine.state(session).map_err(|e| e.to_string())?;
    // failed turns do not consume an index
    let turn_index = turn_index.min(state.next_turn_index());
    let answered = match &message.answering_step {
        None => None,
        Some(name) => {
            let step = state
                .plan
                .find_by_name(name)
                .ok_or_else(|| format!("no step named {name:?} to answer"))?;
            Some(AnsweredQuestion {
                step_id: step.step_id.clone(),
                question: step.follow_up_question.clone(),
            })
        }
    };
    Observation::new(message.kind, message.text.clone(), answered, turn_index).map_err(|e| e.to_string())
}
