//! Hierarchical conversational planning.

pub mod content;
pub mod domain;
pub mod engine;
pub mod gateway;
pub mod meta;
pub mod policy;
pub mod replay;
pub mod service;
pub mod sim;
pub mod store;
pub mod structured;
pub mod subpolicy;

pub use domain::{
    ActionKind, AnsweredQuestion, ContentItem, Goal, MacroAction, Observation, ObservationKind, Plan, PlanDiff,
    PlanStep, StepId,
};
pub use engine::{EngineConfig, EngineError, PlannerEngine, TurnResult, UserMessage};
pub use gateway::{CompletionBackend, Gateway};
pub use policy::{PolicyId, PolicySet};
pub use store::{EventStore, JsonlStore, MemoryStore, SessionId, SessionState, TurnEvent};
