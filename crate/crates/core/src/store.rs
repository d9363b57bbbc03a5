//! Event-sourced session persistence.
//!
//! A session is an append-only log of [`TurnEvent`]s. Session state is never
//! stored; it is the left fold of the log through [`SessionState::apply`].
//! The engine builds new state with the same fold, so a reconstructed
//! session matches the live one by construction.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{
    Alteration, ContentItem, Goal, HistoryEntry, MacroAction, Observation, Plan, PlanStep, StepId,
    UserModelSummary,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    /// Ids double as file names, so only `[A-Za-z0-9_-]` is allowed.
    pub fn parse(id: &str) -> Option<Self> {
        let ok = !id.is_empty()
            && id.len() <= 128
            && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        ok.then(|| Self(id.to_string()))
    }

    pub fn generate() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepContentRecord {
    pub step_id: StepId,
    pub items: Vec<ContentItem>,
    /// Every candidate locator the shown items were selected from.
    pub fetched_locators: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SessionCreated,
    ObservationRecorded,
    MacroActionChosen,
    StepsAdded,
    StepAltered,
    ContentAttached,
    QuestionAsked,
    TurnFailed,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SessionCreated => "SessionCreated",
            EventKind::ObservationRecorded => "ObservationRecorded",
            EventKind::MacroActionChosen => "MacroActionChosen",
            EventKind::StepsAdded => "StepsAdded",
            EventKind::StepAltered => "StepAltered",
            EventKind::ContentAttached => "ContentAttached",
            EventKind::QuestionAsked => "QuestionAsked",
            EventKind::TurnFailed => "TurnFailed",
        }
    }
}

/// Event kind and payload, serialized as adjacent `kind` / `payload` fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    SessionCreated {
        goal: Goal,
    },
    ObservationRecorded {
        observation: Observation,
    },
    MacroActionChosen {
        macro_action: MacroAction,
        attempts: u32,
    },
    StepsAdded {
        steps: Vec<PlanStep>,
        thought: String,
        user_model_summary: UserModelSummary,
    },
    StepAltered {
        alterations: Vec<Alteration>,
        thought: String,
    },
    ContentAttached {
        attachments: Vec<StepContentRecord>,
    },
    QuestionAsked {
        question: String,
        thought: String,
    },
    TurnFailed {
        observation: Observation,
        error: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        raw_outputs: Vec<String>,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::SessionCreated { .. } => EventKind::SessionCreated,
            EventBody::ObservationRecorded { .. } => EventKind::ObservationRecorded,
            EventBody::MacroActionChosen { .. } => EventKind::MacroActionChosen,
            EventBody::StepsAdded { .. } => EventKind::StepsAdded,
            EventBody::StepAltered { .. } => EventKind::StepAltered,
            EventBody::ContentAttached { .. } => EventKind::ContentAttached,
            EventBody::QuestionAsked { .. } => EventKind::QuestionAsked,
            EventBody::TurnFailed { .. } => EventKind::TurnFailed,
        }
    }

    /// The payload on its own, as streamed to observers.
    pub fn payload_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("event bodies serialize");
        v.get_mut("payload").map(serde_json::Value::take).unwrap_or_default()
    }

    fn opens_turn(&self) -> bool {
        matches!(
            self,
            EventBody::ObservationRecorded { .. } | EventBody::TurnFailed { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub event_id: u64,
    pub session_id: SessionId,
    #[serde(flatten)]
    pub body: EventBody,
    pub timestamp: DateTime<Utc>,
}

impl TurnEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}

/// Inclusive range of committed event ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRange {
    pub first: u64,
    pub last: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("sequence conflict: expected event id {expected}, got {found}")]
    Conflict { expected: u64, found: u64 },
    #[error("integrity error after event {last_valid_event_id}: {message}")]
    Integrity {
        last_valid_event_id: u64,
        message: String,
    },
    #[error("unknown plan version {0}")]
    UnknownVersion(u64),
    #[error("storage I/O: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// Fold
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: SessionId,
    pub goal: Goal,
    pub plan: Plan,
    pub history: Vec<HistoryEntry>,
    pub prior_macro_actions: Vec<MacroAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_model_summary: Option<UserModelSummary>,
    /// Bookkeeping only; excluded from the canonical form so a rejected turn
    /// (which commits a `TurnFailed` event) leaves serialized state unchanged.
    #[serde(skip)]
    pub last_event_id: u64,
}

impl SessionState {
    pub fn next_turn_index(&self) -> u32 {
        self.history.len() as u32
    }

    /// Canonical serialization used for equality checks.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("session state serializes")
    }

    /// Starts a fold from the first event, which must be `SessionCreated`.
    pub fn from_created(event: &TurnEvent) -> Result<Self, String> {
        match &event.body {
            EventBody::SessionCreated { goal } if event.event_id == 1 => Ok(Self {
                session_id: event.session_id.clone(),
                goal: goal.clone(),
                plan: Plan::new(),
                history: Vec::new(),
                prior_macro_actions: Vec::new(),
                user_model_summary: None,
                last_event_id: 1,
            }),
            EventBody::SessionCreated { .. } => Err("SessionCreated must be event 1".into()),
            other => Err(format!("log must start with SessionCreated, found {:?}", other.kind())),
        }
    }

    pub fn apply(&mut self, event: &TurnEvent) -> Result<(), String> {
        if event.event_id != self.last_event_id + 1 {
            return Err(format!(
                "event id {} does not follow {}",
                event.event_id, self.last_event_id
            ));
        }
        if event.session_id != self.session_id {
            return Err(format!("event belongs to session {}", event.session_id));
        }
        match &event.body {
            EventBody::SessionCreated { .. } => return Err("duplicate SessionCreated".into()),
            EventBody::ObservationRecorded { observation } => {
                if observation.turn_index != self.next_turn_index() {
                    return Err(format!(
                        "observation turn {} but next turn is {}",
                        observation.turn_index,
                        self.next_turn_index()
                    ));
                }
                self.history.push(HistoryEntry {
                    observation: observation.clone(),
                    system_response: String::new(),
                });
            }
            EventBody::MacroActionChosen { macro_action, .. } => {
                self.open_turn()?;
                self.prior_macro_actions.push(macro_action.clone());
            }
            EventBody::StepsAdded {
                steps,
                user_model_summary,
                ..
            } => {
                let names: Vec<&str> = steps.iter().map(|s| s.name.as_str()).collect();
                self.open_turn()?.system_response = format!("Added steps: {}", names.join("; "));
                self.plan.steps.extend(steps.iter().cloned());
                self.plan.version += 1;
                self.user_model_summary = Some(user_model_summary.clone());
            }
            EventBody::StepAltered { alterations, .. } => {
                for alt in alterations {
                    let slot = self
                        .plan
                        .get_mut(&alt.after.step_id)
                        .ok_or_else(|| format!("altered step {} not in plan", alt.after.step_id))?;
                    *slot = alt.after.clone();
                }
                let names: Vec<&str> = alterations.iter().map(|a| a.after.name.as_str()).collect();
                self.open_turn()?.system_response = format!("Altered steps: {}", names.join("; "));
                self.plan.version += 1;
            }
            EventBody::ContentAttached { attachments } => {
                for record in attachments {
                    let step = self
                        .plan
                        .get_mut(&record.step_id)
                        .ok_or_else(|| format!("content for unknown step {}", record.step_id))?;
                    step.content_items = record.items.clone();
                }
            }
            EventBody::QuestionAsked { question, .. } => {
                self.open_turn()?.system_response = format!("Asked: {question}");
            }
            EventBody::TurnFailed { .. } => {}
        }
        self.last_event_id = event.event_id;
        Ok(())
    }

    fn open_turn(&mut self) -> Result<&mut HistoryEntry, String> {
        self.history
            .last_mut()
            .ok_or_else(|| "turn event before any observation".to_string())
    }
}

/// Folds a whole log.
pub fn fold_events(events: &[TurnEvent]) -> Result<SessionState, StoreError> {
    let first = events.first().ok_or(StoreError::Integrity {
        last_valid_event_id: 0,
        message: "empty log".into(),
    })?;
    let mut state = SessionState::from_created(first).map_err(|message| StoreError::Integrity {
        last_valid_event_id: 0,
        message,
    })?;
    for event in &events[1..] {
        state.apply(event).map_err(|message| StoreError::Integrity {
            last_valid_event_id: state.last_event_id,
            message,
        })?;
    }
    Ok(state)
}

/// The plan as it stood when it first reached `version`, including the
/// content attached in that same turn.
pub fn plan_at_version(events: &[TurnEvent], version: u64) -> Result<Plan, StoreError> {
    let first = events.first().ok_or(StoreError::UnknownVersion(version))?;
    let mut state = SessionState::from_created(first).map_err(|message| StoreError::Integrity {
        last_valid_event_id: 0,
        message,
    })?;
    for (i, event) in events.iter().enumerate() {
        if i > 0 {
            state.apply(event).map_err(|message| StoreError::Integrity {
                last_valid_event_id: state.last_event_id,
                message,
            })?;
        }
        let at_boundary = events.get(i + 1).is_none_or(|next| next.body.opens_turn());
        if at_boundary && state.plan.version == version {
            return Ok(state.plan);
        }
        if state.plan.version > version {
            break;
        }
    }
    Err(StoreError::UnknownVersion(version))
}

// ---------------------------------------------------------------------------
// Stores
// ---------------------------------------------------------------------------

pub trait EventStore: Send + Sync {
    /// Appends a batch atomically. The first event id must be exactly one
    /// past the session's last committed id (1 for a new session).
    fn append(&self, session: &SessionId, events: &[TurnEvent]) -> Result<EventRange, StoreError>;

    fn load(&self, session: &SessionId) -> Result<Vec<TurnEvent>, StoreError>;

    fn exists(&self, session: &SessionId) -> bool;
}

fn check_batch(session: &SessionId, last: u64, events: &[TurnEvent]) -> Result<EventRange, StoreError> {
    let first = events.first().ok_or(StoreError::Conflict {
        expected: last + 1,
        found: 0,
    })?;
    for (offset, event) in events.iter().enumerate() {
        let expected = last + 1 + offset as u64;
        if event.event_id != expected || &event.session_id != session {
            return Err(StoreError::Conflict {
                expected,
                found: event.event_id,
            });
        }
    }
    Ok(EventRange {
        first: first.event_id,
        last: last + events.len() as u64,
    })
}

/// Reconstructs the session from its log.
pub fn reconstruct_session(store: &dyn EventStore, session: &SessionId) -> Result<SessionState, StoreError> {
    fold_events(&store.load(session)?)
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    logs: Mutex<HashMap<SessionId, Vec<TurnEvent>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryStore {
    fn append(&self, session: &SessionId, events: &[TurnEvent]) -> Result<EventRange, StoreError> {
        let mut logs = self.logs.lock().expect("store lock poisoned");
        let last = logs.get(session).map_or(0, |l| l.len() as u64);
        let range = check_batch(session, last, events)?;
        logs.entry(session.clone()).or_default().extend_from_slice(events);
        Ok(range)
    }

    fn load(&self, session: &SessionId) -> Result<Vec<TurnEvent>, StoreError> {
        self.logs
            .lock()
            .expect("store lock poisoned")
            .get(session)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(session.clone()))
    }

    fn exists(&self, session: &SessionId) -> bool {
        self.logs.lock().expect("store lock poisoned").contains_key(session)
    }
}

/// One JSON-lines file per session, named by the session id. Appends write a
/// complete copy of the log to a temporary file and rename it over the
/// original, so a batch is either fully on disk or not at all.
#[derive(Debug)]
pub struct JsonlStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
    crash_after_lines: Mutex<Option<usize>>,
}

impl JsonlStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| StoreError::Io(e.to_string()))?;
        // leftovers from an interrupted append are never part of the log
        if let Ok(entries) = fs::read_dir(&dir) {
            for entry in entries.flatten() {
                let name = entry.file_name();
                if name.to_string_lossy().ends_with(".tmp") {
                    let _ = fs::remove_file(entry.path());
                }
            }
        }
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
            crash_after_lines: Mutex::new(None),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, session: &SessionId) -> PathBuf {
        self.dir.join(session.as_str())
    }

    /// Test hook: the next append writes only `lines` of its batch to the
    /// temporary file and then fails as if the process died before commit.
    pub fn inject_crash_after(&self, lines: usize) {
        *self.crash_after_lines.lock().expect("fault lock poisoned") = Some(lines);
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        let mut ids: Vec<SessionId> = fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| SessionId::parse(&e.file_name().to_string_lossy()))
            .collect();
        ids.sort();
        ids
    }

    fn read_log(&self, session: &SessionId) -> Result<Vec<TurnEvent>, StoreError> {
        let text = match fs::read_to_string(self.path(session)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(session.clone()))
            }
            Err(e) => return Err(StoreError::Io(e.to_string())),
        };
        let mut events: Vec<TurnEvent> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let last_valid_event_id = events.last().map_or(0, |e| e.event_id);
            let event: TurnEvent = serde_json::from_str(line).map_err(|e| StoreError::Integrity {
                last_valid_event_id,
                message: format!("line {}: {e}", lineno + 1),
            })?;
            if event.event_id != last_valid_event_id + 1 {
                return Err(StoreError::Integrity {
                    last_valid_event_id,
                    message: format!("line {}: event id {} out of sequence", lineno + 1, event.event_id),
                });
            }
            events.push(event);
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(StoreError::Integrity {
                last_valid_event_id: events.len().saturating_sub(1) as u64,
                message: "log ends with a torn line".into(),
            });
        }
        Ok(events)
    }
}

impl EventStore for JsonlStore {
    fn append(&self, session: &SessionId, events: &[TurnEvent]) -> Result<EventRange, StoreError> {
        let _guard = self.write_lock.lock().expect("write lock poisoned");
        let existing = match self.read_log(session) {
            Ok(log) => log,
            Err(StoreError::NotFound(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let range = check_batch(session, existing.len() as u64, events)?;

        let path = self.path(session);
        let mut buf = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(StoreError::Io(e.to_string())),
        };
        let crash_after = self.crash_after_lines.lock().expect("fault lock poisoned").take();
        for (i, event) in events.iter().enumerate() {
            if crash_after == Some(i) {
                break;
            }
            serde_json::to_writer(&mut buf, event).map_err(|e| StoreError::Io(e.to_string()))?;
            buf.push(b'\n');
        }

        let tmp = self.dir.join(format!(".{}.tmp", session.as_str()));
        let io = |e: std::io::Error| StoreError::Io(e.to_string());
        let mut file = fs::File::create(&tmp).map_err(io)?;
        file.write_all(&buf).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        if crash_after.is_some() {
            return Err(StoreError::Io("injected crash before commit".into()));
        }
        fs::rename(&tmp, &path).map_err(io)?;
        Ok(range)
    }

    fn load(&self, session: &SessionId) -> Result<Vec<TurnEvent>, StoreError> {
        self.read_log(session)
    }

    fn exists(&self, session: &SessionId) -> bool {
        self.path(session).exists()
    }
}
