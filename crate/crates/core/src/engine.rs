//! The turn loop. [`PlannerEngine`] is the only writer of session state:
//! every change is a batch of events appended to the store, and the state it
//! reports is the fold of those events.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, TryLockError};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::content::ContentPipeline;
use crate::domain::{
    diff_plans, ActionKind, Alteration, AnsweredQuestion, Context, Goal, MacroAction, Observation,
    ObservationKind, Plan, PlanDiff, StepId, ValidationError, DEFAULT_CONTEXT_BUDGET,
};
use crate::gateway::Gateway;
use crate::meta::{build_context, decide_macro_action, MetaDecision};
use crate::policy::{PolicyId, PolicySet};
use crate::store::{
    fold_events, plan_at_version, EventBody, EventRange, EventStore, SessionId, SessionState,
    StepContentRecord, StoreError, TurnEvent,
};
use crate::subpolicy::{execute_add_steps, execute_alter_step, execute_ask_question, SubPolicyError};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always returns the same instant. Keeps logs byte-stable in tests.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// What a second concurrent turn on the same session does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusyMode {
    #[default]
    Reject,
    Wait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub context_budget: usize,
    pub busy_mode: BusyMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            context_budget: DEFAULT_CONTEXT_BUDGET,
            busy_mode: BusyMode::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownQuestion {
    pub step_id: StepId,
    pub follow_up_question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub session_id: SessionId,
    pub turn_index: u32,
    pub macro_action: MacroAction,
    /// Plan changes only; a question is reported in `question_asked`.
    pub plan_diff: PlanDiff,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_asked: Option<String>,
    pub shown_questions: Vec<ShownQuestion>,
    pub plan: Plan,
    pub events: EventRange,
}

impl TurnResult {
    /// Exactly one of plan change or question per turn.
    pub fn is_well_formed(&self) -> bool {
        self.plan_diff.changes_plan() != self.question_asked.is_some()
            && self.plan_diff.question_asked.is_none()
            && self.shown_questions.len() == self.plan.steps.len()
    }
}

/// A user message as received by the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserMessage {
    pub text: String,
    pub kind: ObservationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_question: Option<AnsweredQuestion>,
    /// When given, must equal the next turn index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureStage {
    Decision,
    Execution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnFailure {
    pub stage: FailureStage,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw_outputs: Vec<String>,
    /// Id of the committed `TurnFailed` event.
    pub event_id: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("out-of-order turn: expected turn {expected}, got {got}")]
    Sequencing { expected: u32, got: u32 },
    #[error("a turn is already in progress for session {0}")]
    Busy(SessionId),
    #[error("turn rejected during {stage:?}: {reason}", stage = .0.stage, reason = .0.reason)]
    TurnFailed(TurnFailure),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<ValidationError> for EngineError {
    fn from(e: ValidationError) -> Self {
        EngineError::Invalid(e.to_string())
    }
}

pub type CommitObserver = Arc<dyn Fn(&[TurnEvent]) + Send + Sync>;

pub struct PlannerEngine {
    gateway: Gateway,
    policies: PolicySet,
    content: ContentPipeline,
    store: Arc<dyn EventStore>,
    config: EngineConfig,
    clock: Arc<dyn Clock>,
    locks: Mutex<HashMap<SessionId, Arc<Mutex<()>>>>,
    /// State after the last commit, per session. Rebuilt from the log on a
    /// miss and dropped whenever an append fails.
    live: Mutex<HashMap<SessionId, SessionState>>,
    observers: Mutex<Vec<CommitObserver>>,
}

impl std::fmt::Debug for PlannerEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlannerEngine")
            .field("gateway", &self.gateway)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

/// The outcome of running policies for one turn, before commit.
struct Draft {
    decision: MetaDecision,
    bodies: Vec<EventBody>,
}

struct Failure {
    stage: FailureStage,
    reason: String,
    raw_outputs: Vec<String>,
}

impl From<SubPolicyError> for Failure {
    fn from(e: SubPolicyError) -> Self {
        let raw_outputs = match &e {
            SubPolicyError::Execution(f) => f.raw_outputs.clone(),
            _ => Vec::new(),
        };
        Failure {
            stage: FailureStage::Execution,
            reason: e.to_string(),
            raw_outputs,
        }
    }
}

impl PlannerEngine {
    pub fn new(
        gateway: Gateway,
        policies: PolicySet,
        content: ContentPipeline,
        store: Arc<dyn EventStore>,
    ) -> Self {
        Self {
            gateway,
            policies,
            content,
            store,
            config: EngineConfig::default(),
            clock: Arc::new(SystemClock),
            locks: Mutex::new(HashMap::new()),
            live: Mutex::new(HashMap::new()),
            observers: Mutex::new(Vec::new()),
        }
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn store(&self) -> &Arc<dyn EventStore> {
        &self.store
    }

    /// Called with every committed batch, in commit order per session.
    pub fn subscribe(&self, observer: CommitObserver) {
        self.observers.lock().expect("observer lock poisoned").push(observer);
    }

    pub fn session_exists(&self, session: &SessionId) -> bool {
        self.store.exists(session)
    }

    /// Session state reconstructed from the log.
    pub fn state(&self, session: &SessionId) -> Result<SessionState, EngineError> {
        Ok(fold_events(&self.load(session)?)?)
    }

    /// The in-memory state the engine holds after its last commit.
    pub fn live_state(&self, session: &SessionId) -> Result<SessionState, EngineError> {
        if let Some(state) = self.live.lock().expect("live lock poisoned").get(session) {
            return Ok(state.clone());
        }
        let state = self.state(session)?;
        self.live
            .lock()
            .expect("live lock poisoned")
            .insert(session.clone(), state.clone());
        Ok(state)
    }

    /// Commits `events` and installs `state` as the live state.
    fn append(&self, state: SessionState, session: &SessionId, events: &[TurnEvent]) -> Result<EventRange, EngineError> {
        match self.store.append(session, events) {
            Ok(range) => {
                self.live
                    .lock()
                    .expect("live lock poisoned")
                    .insert(session.clone(), state);
                self.notify(events);
                Ok(range)
            }
            Err(e) => {
                self.live.lock().expect("live lock poisoned").remove(session);
                Err(e.into())
            }
        }
    }

    pub fn events(&self, session: &SessionId) -> Result<Vec<TurnEvent>, EngineError> {
        self.load(session)
    }

    /// Current plan, or the plan as of `version`.
    pub fn plan(&self, session: &SessionId, version: Option<u64>) -> Result<Plan, EngineError> {
        let events = self.load(session)?;
        match version {
            None => Ok(fold_events(&events)?.plan),
            Some(v) => Ok(plan_at_version(&events, v)?),
        }
    }

    fn load(&self, session: &SessionId) -> Result<Vec<TurnEvent>, EngineError> {
        self.store.load(session).map_err(|e| match e {
            StoreError::NotFound(id) => EngineError::NotFound(id),
            other => EngineError::Store(other),
        })
    }

    /// Creates a session and runs turn 0 with the goal as the initial
    /// observation. If turn 0 fails the session still exists.
    pub fn create_session(&self, goal_text: &str) -> Result<(SessionId, TurnResult), (Option<SessionId>, EngineError)> {
        let session = SessionId::generate();
        self.create_session_with_id(session.clone(), goal_text)
            .map(|r| (session.clone(), r))
            .map_err(|e| {
                let created = !matches!(e, EngineError::Invalid(_)) && self.store.exists(&session);
                (created.then_some(session), e)
            })
    }

    pub fn create_session_with_id(&self, session: SessionId, goal_text: &str) -> Result<TurnResult, EngineError> {
        let goal = Goal::new(goal_text, self.clock.now())?;
        let observation = Observation::initial_goal(goal.text.clone())?;
        let created = TurnEvent {
            event_id: 1,
            session_id: session.clone(),
            body: EventBody::SessionCreated { goal },
            timestamp: self.clock.now(),
        };
        {
            let lock = self.session_lock(&session);
            let _guard = lock.lock().expect("session lock poisoned");
            let state = SessionState::from_created(&created).map_err(EngineError::Invalid)?;
            self.append(state, &session, std::slice::from_ref(&created))?;
        }
        self.process_turn(&session, observation)
    }

    /// Runs one turn. The observation's turn index must be the next one.
    pub fn process_turn(&self, session: &SessionId, observation: Observation) -> Result<TurnResult, EngineError> {
        self.locked_turn(session, |_| Ok(observation))
    }

    /// Runs one turn for a user message, assigning the next turn index
    /// under the session lock.
    pub fn post_message(&self, session: &SessionId, message: UserMessage) -> Result<TurnResult, EngineError> {
        self.locked_turn(session, |state| {
            let expected = state.next_turn_index();
            if let Some(got) = message.turn_index.filter(|t| *t != expected) {
                return Err(EngineError::Sequencing { expected, got });
            }
            Ok(Observation::new(message.kind, message.text, message.answered_question, expected)?)
        })
    }

    fn locked_turn(
        &self,
        session: &SessionId,
        observe: impl FnOnce(&SessionState) -> Result<Observation, EngineError>,
    ) -> Result<TurnResult, EngineError> {
        if !self.store.exists(session) {
            return Err(EngineError::NotFound(session.clone()));
        }
        let lock = self.session_lock(session);
        let _guard = match self.config.busy_mode {
            BusyMode::Wait => lock.lock().expect("session lock poisoned"),
            BusyMode::Reject => match lock.try_lock() {
                Ok(g) => g,
                Err(TryLockError::WouldBlock) => return Err(EngineError::Busy(session.clone())),
                Err(TryLockError::Poisoned(p)) => p.into_inner(),
            },
        };

        let state = self.live_state(session)?;
        let observation = observe(&state)?;
        observation.validate()?;
        let expected = state.next_turn_index();
        if observation.turn_index != expected {
            return Err(EngineError::Sequencing {
                expected,
                got: observation.turn_index,
            });
        }
        if let Some(aq) = &observation.answered_question {
            if state.plan.get(&aq.step_id).is_none() {
                return Err(EngineError::Invalid(format!(
                    "answered question refers to unknown step {}",
                    aq.step_id
                )));
            }
        }

        let context = build_context(
            &state.goal,
            &state.history,
            &state.prior_macro_actions,
            observation.clone(),
            self.config.context_budget,
        );

        match self.run_policies(&state, &context) {
            Ok(draft) => self.commit_turn(state, observation, draft),
            Err(failure) => {
                let event = TurnEvent {
                    event_id: state.last_event_id + 1,
                    session_id: session.clone(),
                    body: EventBody::TurnFailed {
                        observation,
                        error: failure.reason.clone(),
                        raw_outputs: failure.raw_outputs.clone(),
                    },
                    timestamp: self.clock.now(),
                };
                let mut after = state.clone();
                after.last_event_id = event.event_id;
                self.append(after, session, std::slice::from_ref(&event))?;
                tracing::warn!(session = %session, reason = %failure.reason, "turn rejected");
                Err(EngineError::TurnFailed(TurnFailure {
                    stage: failure.stage,
                    reason: failure.reason,
                    raw_outputs: failure.raw_outputs,
                    event_id: event.event_id,
                }))
            }
        }
    }

    fn commit_turn(&self, state: SessionState, observation: Observation, draft: Draft) -> Result<TurnResult, EngineError> {
        let session = state.session_id.clone();
        let turn_index = observation.turn_index;
        let macro_action = draft.decision.macro_action.clone();
        let mut bodies = vec![
            EventBody::ObservationRecorded { observation },
            EventBody::MacroActionChosen {
                macro_action: macro_action.clone(),
                attempts: draft.decision.attempts,
            },
        ];
        bodies.extend(draft.bodies);

        let now = self.clock.now();
        let events: Vec<TurnEvent> = bodies
            .into_iter()
            .enumerate()
            .map(|(i, body)| TurnEvent {
                event_id: state.last_event_id + 1 + i as u64,
                session_id: session.clone(),
                body,
                timestamp: now,
            })
            .collect();

        let mut next = state.clone();
        for event in &events {
            next.apply(event).map_err(|message| {
                EngineError::Store(StoreError::Integrity {
                    last_valid_event_id: next.last_event_id,
                    message,
                })
            })?;
        }
        let range = self.append(next.clone(), &session, &events)?;

        let question_asked = events.iter().find_map(|e| match &e.body {
            EventBody::QuestionAsked { question, .. } => Some(question.clone()),
            _ => None,
        });
        Ok(TurnResult {
            session_id: session,
            turn_index,
            macro_action,
            plan_diff: diff_plans(&state.plan, &next.plan),
            question_asked,
            shown_questions: next
                .plan
                .steps
                .iter()
                .map(|s| ShownQuestion {
                    step_id: s.step_id.clone(),
                    follow_up_question: s.follow_up_question.clone(),
                })
                .collect(),
            plan: next.plan,
            events: range,
        })
    }

    fn run_policies(&self, state: &SessionState, context: &Context) -> Result<Draft, Failure> {
        let decide = |note: Option<&str>| {
            decide_macro_action(
                &self.gateway,
                context,
                &state.plan,
                self.policies.get(PolicyId::MetaController),
                note,
            )
            .map_err(|f| Failure {
                stage: FailureStage::Decision,
                reason: f.to_string(),
                raw_outputs: f.raw_outputs,
            })
        };

        let mut decision = decide(None)?;
        if decision.macro_action.action == ActionKind::AlterSteps {
            let unknown = unknown_targets(&state.plan, &decision.macro_action.arguments);
            if !unknown.is_empty() {
                let existing: Vec<&str> = state.plan.steps.iter().map(|s| s.name.as_str()).collect();
                let note = format!(
                    "alter-steps named steps that are not in the plan: {}. Existing steps: {}.",
                    quoted(&unknown),
                    if existing.is_empty() { "(none)".to_string() } else { quoted(&existing) }
                );
                tracing::info!(%note, "re-deciding after unknown step");
                decision = decide(Some(&note))?;
                if decision.macro_action.action == ActionKind::AlterSteps {
                    let unknown = unknown_targets(&state.plan, &decision.macro_action.arguments);
                    if !unknown.is_empty() {
                        return Err(Failure {
                            stage: FailureStage::Execution,
                            reason: SubPolicyError::UnknownStep(unknown[0].to_string()).to_string(),
                            raw_outputs: vec![decision.macro_action.raw.clone()],
                        });
                    }
                }
            }
        }

        let bodies = match decision.macro_action.action {
            ActionKind::AddSteps => self.run_add_steps(state, context, &decision.macro_action)?,
            ActionKind::AlterSteps => self.run_alter_steps(state, context, &decision.macro_action)?,
            ActionKind::AskQuestion => {
                let result = execute_ask_question(
                    &self.gateway,
                    context,
                    &decision.macro_action.arguments,
                    self.policies.get(PolicyId::AskQuestion),
                )?;
                vec![EventBody::QuestionAsked {
                    question: result.question,
                    thought: result.thought,
                }]
            }
        };
        Ok(Draft { decision, bodies })
    }

    fn run_add_steps(&self, state: &SessionState, context: &Context, action: &MacroAction) -> Result<Vec<EventBody>, Failure> {
        let result = execute_add_steps(
            &self.gateway,
            context,
            &state.plan,
            &action.arguments,
            self.policies.get(PolicyId::AddSteps),
        )?;
        if !result.dropped.is_empty() {
            tracing::info!(dropped = ?result.dropped, "dropped colliding steps");
        }
        let attachments = result
            .new_steps
            .iter()
            .map(|step| {
                let content = self.content.refresh(&self.gateway, &self.policies, step);
                StepContentRecord {
                    step_id: step.step_id.clone(),
                    items: content.items,
                    fetched_locators: content.fetched_locators,
                }
            })
            .collect();
        Ok(vec![
            EventBody::StepsAdded {
                steps: result.new_steps,
                thought: result.thought,
                user_model_summary: result.user_model_summary,
            },
            EventBody::ContentAttached { attachments },
        ])
    }

    fn run_alter_steps(&self, state: &SessionState, context: &Context, action: &MacroAction) -> Result<Vec<EventBody>, Failure> {
        // resolve every target before touching any
        let mut targets: Vec<StepId> = Vec::new();
        for name in &action.arguments {
            let step = state
                .plan
                .find_by_name(name)
                .ok_or_else(|| Failure::from(SubPolicyError::UnknownStep(name.clone())))?;
            if !targets.contains(&step.step_id) {
                targets.push(step.step_id.clone());
            }
        }

        let mut working = state.plan.clone();
        let mut alterations = Vec::new();
        let mut thoughts = Vec::new();
        for id in &targets {
            let before = working.get(id).expect("resolved above").clone();
            let result = execute_alter_step(
                &self.gateway,
                context,
                &working,
                &before.name,
                self.policies.get(PolicyId::AlterSteps),
            )?;
            *working.get_mut(id).expect("resolved above") = result.altered_step.clone();
            let original = state.plan.get(id).expect("resolved above").clone();
            alterations.push(Alteration {
                before: original,
                after: result.altered_step,
            });
            if !result.thought.is_empty() {
                thoughts.push(result.thought);
            }
        }

        let attachments = alterations
            .iter()
            .map(|alt| {
                let content = self.content.refresh(&self.gateway, &self.policies, &alt.after);
                StepContentRecord {
                    step_id: alt.after.step_id.clone(),
                    items: content.items,
                    fetched_locators: content.fetched_locators,
                }
            })
            .collect();
        Ok(vec![
            EventBody::StepAltered {
                alterations,
                thought: thoughts.join(" "),
            },
            EventBody::ContentAttached { attachments },
        ])
    }

    fn session_lock(&self, session: &SessionId) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(session.clone())
            .or_default()
            .clone()
    }

    fn notify(&self, events: &[TurnEvent]) {
        let observers = self.observers.lock().expect("observer lock poisoned").clone();
        for observer in observers {
            observer(events);
        }
    }
}

fn unknown_targets<'a>(plan: &Plan, arguments: &'a [String]) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    arguments
        .iter()
        .filter(|a| plan.find_by_name(a).is_none() && seen.insert(a.as_str()))
        .map(String::as_str)
        .collect()
}

fn quoted(names: &[&str]) -> String {
    names.iter().map(|n| format!("{n:?}")).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::{ContentSettings, ToolRegistry};
    use crate::gateway::{Script, ScriptEntry};
    use crate::store::MemoryStore;

    const ADD_THREE: &str = r#"{"thought":"t","steps":[
        {"name":"Learn the basics of crossfit","description":"d","follow_up_question":"Have you done crossfit before?","search_keywords":["crossfit basics"]},
        {"name":"Assess your current fitness level","description":"d","follow_up_question":"How often do you exercise?","search_keywords":["fitness test"]},
        {"name":"Set realistic goals","description":"d","follow_up_question":"What are your fitness goals?","search_keywords":["fitness goals"]}],
        "user_model_summary":"beginner"}"#;

    fn engine(entries: Vec<ScriptEntry>) -> PlannerEngine {
        PlannerEngine::new(
            Gateway::scripted(Script::new(entries)),
            PolicySet::builtin(),
            ContentPipeline::new(ToolRegistry::stub_defaults(), ContentSettings::default()),
            Arc::new(MemoryStore::new()),
        )
    }

    fn meta(contains: &str, action: &str, args: &[&str]) -> ScriptEntry {
        let v = serde_json::json!({"thought": "t", "action": action, "arguments": args});
        ScriptEntry::new(PolicyId::MetaController, contains, v.to_string()).once()
    }

    fn crossfit_entries() -> Vec<ScriptEntry> {
        vec![
            meta("I want to do crossfit", "add-steps", &["basics", "assessment", "goals"]),
            ScriptEntry::new(PolicyId::AddSteps, "", ADD_THREE).once(),
            meta("cardiovascular", "alter-steps", &["Set realistic goals"]),
            ScriptEntry::new(
                PolicyId::AlterSteps,
                "",
                r#"{"thought":"cardio","step":{"name":"Set realistic goals","description":"Cardio-focused goals","follow_up_question":"How many days a week can you train?","search_keywords":["cardio crossfit"]}}"#,
            ),
            meta("", "ask-question", &["schedule"]),
            ScriptEntry::new(PolicyId::AskQuestion, "", r#"{"thought":"t","question":"How many days a week can you train"}"#),
        ]
    }

    #[test]
    fn crossfit_turns() {
        let engine = engine(crossfit_entries());
        let (sid, first) = engine.create_session("I want to do crossfit").unwrap();
        assert_eq!(first.macro_action.action, ActionKind::AddSteps);
        assert_eq!(first.plan.steps.len(), 3);
        assert_eq!(first.plan.version, 1);
        assert!(first.is_well_formed());
        assert!(first.plan.steps.iter().all(|s| !s.content_items.is_empty()));

        let goals = first.plan.steps[2].clone();
        let obs = Observation::new(
            ObservationKind::QuestionAnswer,
            "I would like to improve my cardiovascular health.",
            Some(AnsweredQuestion { step_id: goals.step_id.clone(), question: goals.follow_up_question.clone() }),
            1,
        )
        .unwrap();
        let second = engine.process_turn(&sid, obs).unwrap();
        assert_eq!(second.macro_action.action, ActionKind::AlterSteps);
        assert!(second.plan_diff.added_steps.is_empty());
        assert_eq!(second.plan_diff.altered_steps.len(), 1);
        assert_eq!(second.plan_diff.altered_steps[0].after.name, "Set realistic goals");
        assert_eq!(second.plan.steps[..2], first.plan.steps[..2]);
        assert_eq!(second.plan.version, 2);

        let before = engine.state(&sid).unwrap();
        let obs = Observation::new(ObservationKind::FreeFormFeedback, "ok", None, 2).unwrap();
        let third = engine.process_turn(&sid, obs).unwrap();
        assert!(third.question_asked.as_deref().unwrap().ends_with('?'));
        assert!(third.plan_diff.is_empty());
        assert_eq!(third.plan, before.plan);
        assert!(third.is_well_formed());
    }

    #[test]
    fn out_of_order_turn_is_rejected_without_events() {
        let engine = engine(crossfit_entries());
        let (sid, _) = engine.create_session("I want to do crossfit").unwrap();
        let n = engine.events(&sid).unwrap().len();
        let obs = Observation::new(ObservationKind::FreeFormFeedback, "skip", None, 5).unwrap();
        assert!(matches!(engine.process_turn(&sid, obs), Err(EngineError::Sequencing { expected: 1, got: 5 })));
        assert_eq!(engine.events(&sid).unwrap().len(), n);
    }

    #[test]
    fn failed_turn_keeps_state_and_index() {
        let engine = engine(vec![
            meta("crossfit", "add-steps", &["x"]),
            ScriptEntry::new(PolicyId::AddSteps, "", ADD_THREE).once(),
            ScriptEntry::new(PolicyId::MetaController, "", "garbage"),
        ]);
        let (sid, _) = engine.create_session("I want to do crossfit").unwrap();
        let before = engine.state(&sid).unwrap().canonical_json();
        let obs = Observation::new(ObservationKind::FreeFormFeedback, "hmm", None, 1).unwrap();
        match engine.process_turn(&sid, obs.clone()) {
            Err(EngineError::TurnFailed(f)) => {
                assert_eq!(f.stage, FailureStage::Decision);
                assert_eq!(f.raw_outputs.len(), 3);
            }
            other => panic!("expected failure, got {other:?}"),
        }
        assert_eq!(engine.state(&sid).unwrap().canonical_json(), before);
        // the same turn index is still the next one
        assert!(matches!(engine.process_turn(&sid, obs), Err(EngineError::TurnFailed(_))));
    }

    #[test]
    fn unknown_alter_target_gets_one_retry() {
        let engine = engine(vec![
            meta("crossfit", "add-steps", &["x"]),
            ScriptEntry::new(PolicyId::AddSteps, "", ADD_THREE).once(),
            meta("", "alter-steps", &["Run a marathon"]),
            meta("Run a marathon", "ask-question", &["clarify"]),
            ScriptEntry::new(PolicyId::AskQuestion, "", r#"{"question":"Which step do you mean?"}"#),
        ]);
        let (sid, _) = engine.create_session("I want to do crossfit").unwrap();
        let obs = Observation::new(ObservationKind::FreeFormFeedback, "change it", None, 1).unwrap();
        let r = engine.process_turn(&sid, obs).unwrap();
        assert_eq!(r.macro_action.action, ActionKind::AskQuestion);
    }

    #[test]
    fn unknown_alter_target_twice_fails() {
        let engine = engine(vec![
            meta("crossfit", "add-steps", &["x"]),
            ScriptEntry::new(PolicyId::AddSteps, "", ADD_THREE).once(),
            ScriptEntry::new(PolicyId::MetaController, "", r#"{"action":"alter-steps","arguments":["Nope"]}"#),
        ]);
        let (sid, _) = engine.create_session("I want to do crossfit").unwrap();
        let obs = Observation::new(ObservationKind::FreeFormFeedback, "change it", None, 1).unwrap();
        match engine.process_turn(&sid, obs) {
            Err(EngineError::TurnFailed(f)) => assert_eq!(f.stage, FailureStage::Execution),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn post_message_assigns_turn_index() {
        let engine = engine(crossfit_entries());
        let (sid, first) = engine.create_session("I want to do crossfit").unwrap();
        let goals = &first.plan.steps[2];
        let message = UserMessage {
            text: "I would like to improve my cardiovascular health.".into(),
            kind: ObservationKind::QuestionAnswer,
            answered_question: Some(AnsweredQuestion { step_id: goals.step_id.clone(), question: goals.follow_up_question.clone() }),
            turn_index: None,
        };
        let stale = UserMessage { turn_index: Some(0), ..message.clone() };
        assert!(matches!(engine.post_message(&sid, stale), Err(EngineError::Sequencing { expected: 1, got: 0 })));
        assert_eq!(engine.post_message(&sid, message).unwrap().turn_index, 1);
        let unknown = SessionId::parse("nope").unwrap();
        let msg = UserMessage { text: "x".into(), kind: ObservationKind::FreeFormFeedback, answered_question: None, turn_index: None };
        assert!(matches!(engine.post_message(&unknown, msg), Err(EngineError::NotFound(_))));
    }

    #[test]
    fn busy_session_rejects_second_turn() {
        let engine = engine(crossfit_entries());
        let (sid, _) = engine.create_session("I want to do crossfit").unwrap();
        let lock = engine.session_lock(&sid);
        let _held = lock.lock().unwrap();
        let obs = Observation::new(ObservationKind::FreeFormFeedback, "x", None, 1).unwrap();
        assert!(matches!(engine.process_turn(&sid, obs), Err(EngineError::Busy(_))));
    }

    #[test]
    fn empty_goal_is_invalid_and_creates_nothing() {
        let engine = engine(vec![]);
        let (sid, err) = engine.create_session("   ").unwrap_err();
        assert!(sid.is_none());
        assert!(matches!(err, EngineError::Invalid(_)));
    }

    #[test]
    fn plan_versions_are_recoverable() {
        let engine = engine(crossfit_entries());
        let (sid, first) = engine.create_session("I want to do crossfit").unwrap();
        assert_eq!(engine.plan(&sid, Some(0)).unwrap(), Plan::new());
        assert_eq!(engine.plan(&sid, Some(1)).unwrap(), first.plan);
        assert_eq!(engine.plan(&sid, Some(1)).unwrap(), engine.plan(&sid, None).unwrap());
        assert!(engine.plan(&sid, Some(7)).is_err());
    }
}
