//! Persona-driven user simulation.
//!
//! A [`Persona`] answers the engine through response rules. [`run_episode`]
//! drives one session end to end, only through `create_session` and
//! `process_turn`, and checks engine invariants from the outside after every
//! turn. [`random_persona`] builds personas together with a gateway script
//! that exercises retries, collisions, unknown targets and failed turns.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::content::{ContentPipeline, ContentSettings, FailingTool, StubTool, ToolRegistry};
use crate::domain::{
    ActionKind, AnsweredQuestion, Observation, ObservationKind, Plan, SECTION_GOAL, SECTION_HISTORY,
    SECTION_OBSERVATION, SECTION_PRIOR_ACTIONS,
};
use crate::engine::{EngineConfig, EngineError, PlannerEngine, TurnResult};
use crate::gateway::{CompletionBackend, Gateway, RecordingBackend, Script, ScriptEntry, ScriptedBackend};
use crate::policy::{PolicyId, PolicySet};
use crate::store::{EventBody, EventStore, MemoryStore, SessionId, SessionState, TurnEvent};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    /// Case-insensitive substring of the question last asked by the engine
    /// or of a step's follow-up question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_contains: Option<String>,
    /// Fallback: the user-turn number (1 is the first reply after the goal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub kind: ObservationKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRule {
    pub trigger: Trigger,
    pub reply: Reply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub goal_text: String,
    #[serde(default)]
    pub response_rules: Vec<ResponseRule>,
    pub max_turns: u32,
    /// Gateway script for this persona. Without one the episode uses the
    /// backend from [`EpisodeConfig`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
}

#[derive(Debug, thiserror::Error)]
pub enum PersonaError {
    #[error("persona {name}: {message}")]
    Invalid { name: String, message: String },
    #[error("cannot read persona {path}: {message}")]
    Io { path: String, message: String },
}

impl Persona {
    pub fn validate(&self) -> Result<(), PersonaError> {
        let fail = |message: &str| {
            Err(PersonaError::Invalid {
                name: self.name.clone(),
                message: message.to_string(),
            })
        };
        if self.max_turns < 1 {
            return fail("max_turns must be at least 1");
        }
        if self.goal_text.trim().is_empty() {
            return fail("goal_text is empty");
        }
        for rule in &self.response_rules {
            if rule.reply.text.trim().is_empty() {
                return fail("reply text is empty");
            }
            if rule.reply.kind == ObservationKind::InitialGoal {
                return fail("replies cannot be initial-goal");
            }
            if rule.trigger.question_contains.is_none() && rule.trigger.turn.is_none() {
                return fail("rule has no trigger");
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PersonaError> {
        let io = |message: String| PersonaError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let persona: Persona = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        persona.validate()?;
        Ok(persona)
    }

    /// Every `*.json` file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, PersonaError> {
        let entries = std::fs::read_dir(dir).map_err(|e| PersonaError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let mut paths: Vec<_> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::load(p)).collect()
    }
}

// ---------------------------------------------------------------------------
// Invariant checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvariantCheck {
    AskQuestionInvariance,
    AlterLocality,
    ContentSubset,
    ContextPropagation,
    TurnShape,
    FailedTurnAtomicity,
    NameUniqueness,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub turn: u32,
    pub check: InvariantCheck,
    pub detail: String,
}

/// Checks one rendered prompt against the context contract: the four
/// sections appear in order, the current observation and goal are inside
/// their sections, and the earlier observations that survived truncation
/// are the most recent ones, verbatim and in order. Returns how many
/// earlier observations were evicted.
pub fn check_context_prompt(
    prompt: &str,
    current: &Observation,
    earlier: &[Observation],
    goal_text: &str,
) -> Result<usize, String> {
    let find = |header: &str, from: usize| {
        prompt[from..]
            .find(&format!("{header}\n"))
            .map(|i| i + from)
            .ok_or_else(|| format!("section {header:?} missing or out of order"))
    };
    let obs_at = find(SECTION_OBSERVATION, 0)?;
    let hist_at = find(SECTION_HISTORY, obs_at)?;
    let prior_at = find(SECTION_PRIOR_ACTIONS, hist_at)?;
    let goal_at = find(SECTION_GOAL, prior_at)?;

    if !prompt[obs_at..hist_at].contains(&current.text) {
        return Err("current observation missing from its section".into());
    }
    let goal_end = prompt[goal_at..].find("\n\n").map_or(prompt.len(), |i| i + goal_at);
    if !prompt[goal_at..goal_end].contains(goal_text) {
        return Err("goal missing from its section".into());
    }

    let history = &prompt[hist_at..prior_at];
    let mut evicted = 0;
    let mut cursor = 0;
    let mut seen_present = false;
    for obs in earlier {
        let marker = format!("[turn {} |", obs.turn_index);
        match history[cursor..].find(&marker) {
            Some(i) => {
                seen_present = true;
                let at = cursor + i;
                let line_rest = &history[at..];
                if !line_rest.contains(&obs.text) {
                    return Err(format!("turn {} text not verbatim", obs.turn_index));
                }
                cursor = at + marker.len();
            }
            None if seen_present => {
                return Err(format!("turn {} evicted after a newer turn was kept", obs.turn_index));
            }
            None => evicted += 1,
        }
    }
    Ok(evicted)
}

fn check_content(events: &[TurnEvent], k: usize) -> Vec<String> {
    let mut problems = Vec::new();
    for event in events {
        let EventBody::ContentAttached { attachments } = &event.body else {
            continue;
        };
        for record in attachments {
            let fetched: HashSet<&str> = record.fetched_locators.iter().map(String::as_str).collect();
            let mut shown = HashSet::new();
            if record.items.len() > k {
                problems.push(format!("{}: {} items shown", record.step_id, record.items.len()));
            }
            let mut ranks: Vec<u32> = Vec::new();
            for item in &record.items {
                if !fetched.contains(item.locator.as_str()) {
                    problems.push(format!("{}: {} was never fetched", record.step_id, item.locator));
                }
                if !shown.insert(item.locator.as_str()) {
                    problems.push(format!("{}: duplicate {}", record.step_id, item.locator));
                }
                ranks.extend(item.final_rank);
            }
            ranks.sort_unstable();
            let expected: Vec<u32> = (1..=record.items.len() as u32).collect();
            if ranks != expected {
                problems.push(format!("{}: final ranks {ranks:?}", record.step_id));
            }
        }
    }
    problems
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct EpisodeConfig {
    pub policies: PolicySet,
    pub content: ContentSettings,
    pub registry: ToolRegistry,
    pub engine: EngineConfig,
    /// Used when the persona carries no script.
    pub backend: Option<Arc<dyn CompletionBackend>>,
    /// Defaults to a fresh in-memory store per episode.
    pub store: Option<Arc<dyn EventStore>>,
}

impl std::fmt::Debug for EpisodeConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpisodeConfig")
            .field("content", &self.content)
            .field("registry", &self.registry)
            .field("engine", &self.engine)
            .finish_non_exhaustive()
    }
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            policies: PolicySet::builtin(),
            content: ContentSettings::default(),
            registry: ToolRegistry::stub_defaults(),
            engine: EngineConfig::default(),
            backend: None,
            store: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// User-turn number; 0 is the goal. Failed turns count here but not in
    /// `turn_index`.
    pub attempt: u32,
    pub turn_index: u32,
    pub observation_kind: ObservationKind,
    pub observation_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub plan_size: usize,
    pub plan_version: u64,
    pub shown_items: usize,
    pub evicted_observations: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub persona: String,
    pub session_id: SessionId,
    pub turns: Vec<TurnRecord>,
    pub actions: Vec<ActionKind>,
    pub plan_sizes: Vec<usize>,
    pub question_count: usize,
    pub failed_turns: usize,
    pub violations: Vec<Violation>,
    pub wall_time_ms: f64,
    /// `None` when the episode ran to `max_turns`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early: Option<String>,
    /// The engine's in-memory state after the last turn.
    #[serde(skip)]
    pub final_state: Option<SessionState>,
}

struct Choice {
    kind: ObservationKind,
    text: String,
    answered: Option<AnsweredQuestion>,
}

fn pick_reply(
    rules: &[ResponseRule],
    used: &mut [bool],
    asked: Option<&str>,
    plan: &Plan,
    attempt: u32,
) -> Option<Choice> {
    for (i, rule) in rules.iter().enumerate() {
        if used[i] {
            continue;
        }
        let mut matched = None;
        if let Some(needle) = &rule.trigger.question_contains {
            let needle = needle.to_lowercase();
            let step = plan
                .steps
                .iter()
                .find(|s| s.follow_up_question.to_lowercase().contains(&needle));
            let asked_hit = asked.is_some_and(|q| q.to_lowercase().contains(&needle));
            matched = match (rule.reply.kind, step, asked_hit) {
                (ObservationKind::QuestionAnswer, Some(step), _) => Some(Some(step)),
                (_, _, true) => Some(None),
                (ObservationKind::FreeFormFeedback, Some(_), _) => Some(None),
                _ => None,
            };
        }
        if matched.is_none() && rule.trigger.turn == Some(attempt) {
            // a question-answer without a matching step falls back to free-form
            matched = Some(None);
        }
        let Some(step) = matched else { continue };
        used[i] = true;
        return Some(match step {
            Some(step) if rule.reply.kind == ObservationKind::QuestionAnswer => Choice {
                kind: ObservationKind::QuestionAnswer,
                text: rule.reply.text.clone(),
                answered: Some(AnsweredQuestion {
                    step_id: step.step_id.clone(),
                    question: step.follow_up_question.clone(),
                }),
            },
            _ => Choice {
                kind: ObservationKind::FreeFormFeedback,
                text: rule.reply.text.clone(),
                answered: None,
            },
        });
    }
    None
}

struct Checker<'a> {
    recorder: &'a RecordingBackend,
    shown_limit: usize,
    violations: Vec<Violation>,
}

impl Checker<'_> {
    fn flag(&mut self, turn: u32, check: InvariantCheck, detail: impl Into<String>) {
        self.violations.push(Violation {
            turn,
            check,
            detail: detail.into(),
        });
    }

    /// Context contract over every context-bearing prompt sent since `mark`.
    fn prompts(&mut self, attempt: u32, mark: usize, current: &Observation, earlier: &[Observation], goal: &str) -> usize {
        let mut evicted = 0;
        let exchanges = self.recorder.exchanges();
        for (request, _) in exchanges.iter().skip(mark) {
            if matches!(request.policy_id, PolicyId::ToolSelect | PolicyId::Ranker) {
                continue;
            }
            match check_context_prompt(&request.rendered_prompt, current, earlier, goal) {
                Ok(n) => evicted = evicted.max(n),
                Err(detail) => self.flag(
                    attempt,
                    InvariantCheck::ContextPropagation,
                    format!("{}: {detail}", request.policy_id),
                ),
            }
        }
        evicted
    }

    fn turn(&mut self, attempt: u32, before: &Plan, result: &TurnResult, events: &[TurnEvent]) {
        if !result.is_well_formed() {
            self.flag(attempt, InvariantCheck::TurnShape, "turn result is not well formed");
        }
        if !result.plan.names_distinct() {
            self.flag(attempt, InvariantCheck::NameUniqueness, "duplicate normalized step names");
        }
        match result.macro_action.action {
            ActionKind::AskQuestion => {
                if &result.plan != before {
                    self.flag(attempt, InvariantCheck::AskQuestionInvariance, "plan changed on ask-question");
                }
            }
            ActionKind::AlterSteps => {
                let altered: HashSet<_> = result.plan_diff.altered_steps.iter().map(|a| &a.after.step_id).collect();
                if result.plan.steps.len() != before.steps.len() {
                    self.flag(attempt, InvariantCheck::AlterLocality, "alter-steps changed the step count");
                }
                for step in &before.steps {
                    if altered.contains(&step.step_id) {
                        continue;
                    }
                    if result.plan.get(&step.step_id) != Some(step) {
                        self.flag(attempt, InvariantCheck::AlterLocality, format!("untargeted step {} changed", step.step_id));
                    }
                }
            }
            ActionKind::AddSteps => {
                if before.steps.iter().any(|s| result.plan.get(&s.step_id) != Some(s)) {
                    self.flag(attempt, InvariantCheck::AlterLocality, "add-steps changed an existing step");
                }
            }
        }
        for problem in check_content(events, self.shown_limit) {
            self.flag(attempt, InvariantCheck::ContentSubset, problem);
        }
    }
}

fn engine_for(persona: &Persona, config: &EpisodeConfig) -> Result<(PlannerEngine, Arc<RecordingBackend>), String> {
    let inner: Arc<dyn CompletionBackend> = match (&persona.script, &config.backend) {
        (Some(script), _) => Arc::new(ScriptedBackend::new(script.clone())),
        (None, Some(backend)) => backend.clone(),
        (None, None) => return Err(format!("persona {} has no script and no backend is configured", persona.name)),
    };
    let recorder = Arc::new(RecordingBackend::new(inner));
    let store = config.store.clone().unwrap_or_else(|| Arc::new(MemoryStore::new()));
    let engine = PlannerEngine::new(
        Gateway::new(recorder.clone()),
        config.policies.clone(),
        ContentPipeline::new(config.registry.clone(), config.content),
        store,
    )
    .with_config(config.engine);
    Ok((engine, recorder))
}

/// Runs one persona to completion. Engine failures are recorded and the
/// episode moves on to the persona's next reply.
pub fn run_episode(persona: &Persona, config: &EpisodeConfig) -> Result<EpisodeReport, PersonaError> {
    persona.validate()?;
    let (engine, recorder) = engine_for(persona, config).map_err(|message| PersonaError::Invalid {
        name: persona.name.clone(),
        message,
    })?;
    let started = Instant::now();
    let session = SessionId::generate();
    let mut checker = Checker {
        recorder: &recorder,
        shown_limit: config.content.shown,
        violations: Vec::new(),
    };
    let mut turns = Vec::new();
    let mut used = vec![false; persona.response_rules.len()];
    let mut asked: Option<String> = None;
    let mut stopped_early = None;

    for attempt in 0..persona.max_turns {
        let (before_state, choice) = if attempt == 0 {
            (None, Choice {
                kind: ObservationKind::InitialGoal,
                text: persona.goal_text.clone(),
                answered: None,
            })
        } else {
            let state = match engine.live_state(&session) {
                Ok(s) => s,
                Err(e) => {
                    stopped_early = Some(format!("session unavailable: {e}"));
                    break;
                }
            };
            match pick_reply(&persona.response_rules, &mut used, asked.as_deref(), &state.plan, attempt) {
                Some(c) => (Some(state), c),
                None => {
                    stopped_early = Some(format!("no reply for turn {attempt}"));
                    break;
                }
            }
        };

        let before_plan = before_state.as_ref().map(|s| s.plan.clone()).unwrap_or_default();
        let before_json = before_state.as_ref().map(|s| s.canonical_json());
        let earlier: Vec<Observation> = before_state
            .as_ref()
            .map(|s| s.history.iter().map(|h| h.observation.clone()).collect())
            .unwrap_or_default();
        let turn_index = earlier.len() as u32;
        let mark = recorder.exchanges().len();
        let events_before = engine.events(&session).map(|e| e.len()).unwrap_or(0);

        let outcome = if attempt == 0 {
            engine.create_session_with_id(session.clone(), &choice.text)
        } else {
            Observation::new(choice.kind, choice.text.clone(), choice.answered.clone(), turn_index)
                .map_err(EngineError::from)
                .and_then(|obs| engine.process_turn(&session, obs))
        };

        let current = Observation::new(choice.kind, choice.text.clone(), choice.answered, turn_index)
            .expect("validated above");
        let goal = before_state.as_ref().map_or(persona.goal_text.trim().to_string(), |s| s.goal.text.clone());
        let evicted = checker.prompts(attempt, mark, &current, &earlier, &goal);
        let events = engine.events(&session).unwrap_or_default();
        let new_events = events.get(events_before..).unwrap_or_default();

        let record = match outcome {
            Ok(result) => {
                checker.turn(attempt, &before_plan, &result, new_events);
                asked = result.question_asked.clone();
                TurnRecord {
                    attempt,
                    turn_index,
                    observation_kind: choice.kind,
                    observation_text: choice.text,
                    action: Some(result.macro_action.action),
                    error: None,
                    question: result.question_asked.clone(),
                    plan_size: result.plan.steps.len(),
                    plan_version: result.plan.version,
                    shown_items: result.plan.steps.iter().map(|s| s.content_items.len()).sum(),
                    evicted_observations: evicted,
                    violations: 0,
                }
            }
            Err(e) => {
                if let Ok(after) = engine.live_state(&session) {
                    if before_json.is_some_and(|b| b != after.canonical_json()) {
                        checker.flag(attempt, InvariantCheck::FailedTurnAtomicity, "failed turn changed session state");
                    }
                }
                asked = None;
                let plan = engine.live_state(&session).map(|s| s.plan).unwrap_or_default();
                TurnRecord {
                    attempt,
                    turn_index,
                    observation_kind: choice.kind,
                    observation_text: choice.text,
                    action: None,
                    error: Some(e.to_string()),
                    question: None,
                    plan_size: plan.steps.len(),
                    plan_version: plan.version,
                    shown_items: 0,
                    evicted_observations: evicted,
                    violations: 0,
                }
            }
        };
        turns.push(record);
        if attempt == 0 && !engine.session_exists(&session) {
            stopped_early = Some("session was not created".into());
            break;
        }
    }

    for t in &mut turns {
        t.violations = checker.violations.iter().filter(|v| v.turn == t.attempt).count();
    }
    let actions: Vec<ActionKind> = turns.iter().filter_map(|t| t.action).collect();
    let final_state = engine.live_state(&session).ok();
    Ok(EpisodeReport {
        persona: persona.name.clone(),
        session_id: session,
        plan_sizes: turns.iter().filter(|t| t.action.is_some()).map(|t| t.plan_size).collect(),
        question_count: actions.iter().filter(|a| **a == ActionKind::AskQuestion).count(),
        failed_turns: turns.iter().filter(|t| t.error.is_some()).count(),
        actions,
        turns,
        violations: checker.violations,
        wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
        stopped_early,
        final_state,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub episodes: usize,
    pub turns: usize,
    pub failed_turns: usize,
    pub ask_question_turns: usize,
    pub violations: usize,
    pub wall_time_ms: f64,
}

/// Runs every persona, in parallel across personas. Reports keep the input
/// order.
pub fn run_sweep(personas: &[Persona], config: &EpisodeConfig) -> Result<(Vec<EpisodeReport>, SweepSummary), PersonaError> {
    let started = Instant::now();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(personas.len().max(1));
    let chunk = personas.len().div_ceil(workers).max(1);
    let results: Vec<Result<EpisodeReport, PersonaError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = personas
            .chunks(chunk)
            .map(|group| scope.spawn(move || group.iter().map(|p| run_episode(p, config)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("episode thread panicked"))
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary = SweepSummary {
        episodes: reports.len(),
        turns: reports.iter().map(|r| r.turns.len()).sum(),
        failed_turns: reports.iter().map(|r| r.failed_turns).sum(),
        ask_question_turns: reports.iter().map(|r| r.question_count).sum(),
        violations: reports.iter().map(|r| r.violations.len()).sum(),
        wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
    };
    Ok((reports, summary))
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    persona: &'a str,
    attempt: u32,
    turn_index: u32,
    observation_kind: &'a str,
    action: &'a str,
    failed: bool,
    plan_size: usize,
    plan_version: u64,
    shown_items: usize,
    evicted_observations: usize,
    violations: usize,
}

/// Writes `episodes.json`, `summary.json` and `turns.csv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[EpisodeReport], summary: &SweepSummary) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let to_io = |e: serde_json::Error| std::io::Error::new(std::io::ErrorKind::InvalidData, e);
    std::fs::write(dir.join("episodes.json"), serde_json::to_vec_pretty(reports).map_err(to_io)?)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(summary).map_err(to_io)?)?;
    let mut csv = csv::Writer::from_path(dir.join("turns.csv"))?;
    for report in reports {
        for t in &report.turns {
            csv.serialize(CsvRow {
                persona: &report.persona,
                attempt: t.attempt,
                turn_index: t.turn_index,
                observation_kind: t.observation_kind.as_str(),
                action: t.action.map_or("failed", ActionKind::as_str),
                failed: t.error.is_some(),
                plan_size: t.plan_size,
                plan_version: t.plan_version,
                shown_items: t.shown_items,
                evicted_observations: t.evicted_observations,
                violations: t.violations,
            })?;
        }
    }
    csv.flush()
}

// ---------------------------------------------------------------------------
// Random personas
// ---------------------------------------------------------------------------

const TOPICS: &[&str] = &[
    "learn to play the piano",
    "run a half marathon",
    "start a small vegetable garden",
    "learn conversational Spanish",
    "save for a house deposit",
    "get better at public speaking",
    "learn woodworking",
    "cook healthier meals for my family",
    "prepare for a data science interview",
    "train my puppy",
    "learn to draw portraits",
    "reduce my screen time",
];

const VERBS: &[&str] = &["Practice", "Explore", "Plan", "Review", "Build", "Track", "Try", "Schedule"];
const NOUNS: &[&str] = &["fundamentals", "a weekly routine", "resources", "progress", "small wins", "a checklist", "feedback", "milestones"];
const KEYWORDS: &[&str] = &["beginner guide", "video tutorial", "weekly plan", "common mistakes", "expert tips", "checklist", "workbook"];
const PHRASES: &[&str] = &[
    "That sounds good, but I only have evenings free",
    "Can you make it simpler?",
    "I already know the basics",
    "My budget is quite limited",
    "I prefer videos over articles",
    "Could we add something more challenging?",
    "I'm not sure where to start",
];

#[derive(Debug, Clone, PartialEq, Eq)]
struct SimStep {
    name: String,
    question: String,
    description: String,
    keywords: Vec<String>,
}

impl SimStep {
    fn new(name: String, question: String, description: String, rng: &mut ChaCha8Rng) -> Self {
        let count = rng.random_range(1..=3);
        let keywords = KEYWORDS.choose_multiple(rng, count).map(|k| k.to_string()).collect();
        Self { name, question, description, keywords }
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "name": self.name,
            "description": self.description,
            "follow_up_question": self.question,
            "search_keywords": self.keywords,
        })
    }
}

fn junk(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..6) {
        0 => String::new(),
        1 => "I think we should add some steps.".to_string(),
        2 => r#"{"thought": "cut off", "action": "add-st"#.to_string(),
        3 => r#"{"thought": "x", "action": "teleport", "arguments": []}"#.to_string(),
        4 => "x".repeat(10_000),
        _ => r#"{"steps": 5, "question": null, "step": []}"#.to_string(),
    }
}

fn meta_entry(contains: &str, action: &str, args: &[String]) -> ScriptEntry {
    let response = json!({"thought": "scripted", "action": action, "arguments": args});
    ScriptEntry::new(PolicyId::MetaController, contains, response.to_string()).once()
}

/// A persona with `max_turns` turns and a script consistent with it. The
/// generator tracks the plan the script should produce so that alter
/// targets, collisions and follow-up answers line up with the real run.
pub fn random_persona(rng: &mut ChaCha8Rng, ordinal: usize, max_turns: u32) -> Persona {
    let tag = format!("p{ordinal:04}");
    let goal = format!("I want to {} ({tag})", TOPICS.choose(rng).expect("topics"));
    let mut plan: Vec<SimStep> = Vec::new();
    let mut entries: Vec<ScriptEntry> = Vec::new();
    let mut rules: Vec<ResponseRule> = Vec::new();
    let mut last_question: Option<String> = None;
    let mut fresh = 0usize;

    for turn in 0..max_turns {
        let (obs_text, rule) = if turn == 0 {
            (goal.clone(), None)
        } else {
            let text = format!("{} ({tag}-t{turn:02})", PHRASES.choose(rng).expect("phrases"));
            let trigger_step = (!plan.is_empty() && rng.random_bool(0.5)).then(|| plan.choose(rng).expect("nonempty").clone());
            let rule = match (trigger_step, &last_question) {
                (Some(step), _) => ResponseRule {
                    trigger: Trigger { question_contains: Some(step.question.clone()), turn: Some(turn) },
                    reply: Reply { kind: ObservationKind::QuestionAnswer, text: text.clone() },
                },
                (None, Some(q)) => ResponseRule {
                    trigger: Trigger { question_contains: Some(q.clone()), turn: Some(turn) },
                    reply: Reply { kind: ObservationKind::FreeFormFeedback, text: text.clone() },
                },
                (None, None) => ResponseRule {
                    trigger: Trigger { question_contains: None, turn: Some(turn) },
                    reply: Reply { kind: ObservationKind::FreeFormFeedback, text: text.clone() },
                },
            };
            (text, Some(rule))
        };
        rules.extend(rule);
        last_question = None;

        let roll: f64 = rng.random();
        let action = if plan.is_empty() {
            if roll < 0.85 { ActionKind::AddSteps } else { ActionKind::AskQuestion }
        } else if roll < 0.4 {
            ActionKind::AddSteps
        } else if roll < 0.7 {
            ActionKind::AlterSteps
        } else {
            ActionKind::AskQuestion
        };

        // decision faults
        if rng.random_bool(0.08) {
            for _ in 0..3 {
                entries.push(ScriptEntry::new(PolicyId::MetaController, &obs_text, junk(rng)).once());
            }
            continue;
        }
        if rng.random_bool(0.15) {
            entries.push(ScriptEntry::new(PolicyId::MetaController, &obs_text, junk(rng)).once());
        }
        let sub_junk = rng.random_bool(0.15);

        match action {
            ActionKind::AddSteps => {
                let count = rng.random_range(1..=4);
                let mut new_steps: Vec<SimStep> = (0..count)
                    .map(|_| {
                        fresh += 1;
                        let name = format!(
                            "{} {} {tag} s{fresh}",
                            VERBS.choose(rng).expect("verbs"),
                            NOUNS.choose(rng).expect("nouns")
                        );
                        let question = format!("How do you feel about {name}?");
                        SimStep::new(name, question, format!("Added at turn {turn}"), rng)
                    })
                    .collect();
                let all_collide = !plan.is_empty() && rng.random_bool(0.05);
                let some_collide = !plan.is_empty() && rng.random_bool(0.2);
                let mut output_steps = new_steps.clone();
                if all_collide {
                    output_steps = vec![plan[0].clone()];
                    new_steps.clear();
                } else if some_collide {
                    let mut dup = plan.choose(rng).expect("nonempty").clone();
                    dup.name = dup.name.to_uppercase();
                    output_steps.insert(0, dup);
                }
                let args: Vec<String> = output_steps.iter().map(|s| s.name.clone()).collect();
                entries.push(meta_entry(&obs_text, "add-steps", &args));
                if sub_junk {
                    entries.push(ScriptEntry::new(PolicyId::AddSteps, &obs_text, junk(rng)).once());
                }
                let steps: Vec<_> = output_steps.iter().map(SimStep::to_json).collect();
                let response = json!({"thought": "scripted", "steps": steps, "user_model_summary": format!("summary after turn {turn}")});
                entries.push(ScriptEntry::new(PolicyId::AddSteps, &obs_text, response.to_string()).once());
                plan.extend(new_steps);
            }
            ActionKind::AlterSteps => {
                if rng.random_bool(0.1) {
                    // unknown target, then a corrected decision
                    entries.push(meta_entry(&obs_text, "alter-steps", &[format!("Nonexistent step {tag} t{turn}")]));
                    entries.push(meta_entry(&obs_text, "ask-question", &["clarify".to_string()]));
                    let q = format!("Which step did you mean ({tag}-q{turn})?");
                    entries.push(ScriptEntry::new(PolicyId::AskQuestion, &obs_text, json!({"thought": "t", "question": q}).to_string()).once());
                    last_question = Some(q);
                    continue;
                }
                let index = rng.random_range(0..plan.len());
                let target = plan[index].clone();
                let arg = if rng.random_bool(0.3) { target.name.to_uppercase() } else { target.name.clone() };
                entries.push(meta_entry(&obs_text, "alter-steps", &[arg]));
                if sub_junk {
                    entries.push(ScriptEntry::new(PolicyId::AlterSteps, &obs_text, junk(rng)).once());
                }
                if rng.random_bool(0.1) {
                    // an unchanged step must be rejected and retried
                    let same = json!({"thought": "same", "step": target.to_json()});
                    entries.push(ScriptEntry::new(PolicyId::AlterSteps, &obs_text, same.to_string()).once());
                }
                let mut name = target.name.clone();
                if name.len() < 60 && rng.random_bool(0.2) {
                    fresh += 1;
                    name = format!("{name} revised s{fresh}");
                }
                let question = format!("How is {name} going after turn {turn}?");
                let altered = SimStep::new(name, question, format!("Revised at turn {turn}"), rng);
                let response = json!({"thought": "scripted", "step": altered.to_json()});
                entries.push(ScriptEntry::new(PolicyId::AlterSteps, &obs_text, response.to_string()).once());
                plan[index] = altered;
            }
            ActionKind::AskQuestion => {
                entries.push(meta_entry(&obs_text, "ask-question", &["details".to_string()]));
                if sub_junk {
                    entries.push(ScriptEntry::new(PolicyId::AskQuestion, &obs_text, junk(rng)).once());
                }
                let mut q = format!("What matters most to you right now ({tag}-q{turn})");
                if rng.random_bool(0.5) {
                    q.push('?');
                }
                entries.push(ScriptEntry::new(PolicyId::AskQuestion, &obs_text, json!({"thought": "t", "question": q}).to_string()).once());
                last_question = Some(q);
            }
        }
    }

    Persona {
        name: format!("random-{tag}"),
        goal_text: goal,
        response_rules: rules,
        max_turns,
        script: Some(Script::new(entries)),
    }
}

/// `count` random personas from `seed`, each with 1 to `max_turns` turns.
pub fn random_personas(seed: u64, count: usize, max_turns: u32) -> Vec<Persona> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let turns = rng.random_range(1..=max_turns.max(1));
            random_persona(&mut rng, i, turns)
        })
        .collect()
}

/// A registry whose tools all fail.
pub fn failing_registry() -> ToolRegistry {
    let mut registry = ToolRegistry::new();
    registry.register(Arc::new(FailingTool::new("search")));
    registry.register(Arc::new(FailingTool::new("recommend-engine")));
    registry
}

/// One synthetic tool and one failing tool.
pub fn degraded_registry() -> ToolRegistry {
    let mut registry = ToolRegistry::new();
    registry.register(Arc::new(StubTool::synthetic("search")));
    registry.register(Arc::new(FailingTool::new("recommend-engine")));
    registry
}
