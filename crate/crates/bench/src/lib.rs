//! Inputs shared by the benches.

use std::path::PathBuf;

use chrono::Utc;
use convplan::domain::{ActionKind, Context, Goal, HistoryEntry, MacroAction, Observation, ObservationKind};
use convplan::replay::Transcript;

pub fn transcript(name: &str) -> Transcript {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/transcripts").join(format!("{name}.json"));
    Transcript::load(&path).expect("fixture transcript")
}

/// A context with `turns` earlier exchanges of roughly 200 characters each.
pub fn long_context(turns: u32) -> Context {
    let obs = |t: u32, text: String| Observation::new(ObservationKind::FreeFormFeedback, text, None, t).expect("valid observation");
    Context {
        current_observation: obs(turns, "Could you add something about museums?".into()),
        history: (0..turns)
            .map(|t| HistoryEntry {
                observation: obs(t, format!("Feedback {t}: {}", "they like hands-on things ".repeat(6))),
                system_response: format!("Added steps: Step {t}a; Step {t}b"),
            })
            .collect(),
        prior_macro_actions: (0..turns)
            .map(|t| MacroAction::new(format!("thought {t}"), ActionKind::AddSteps, vec![format!("Step {t}a")], "{}").expect("valid action"))
            .collect(),
        goal: Goal::new("How do I explain to my kids about inventors?", Utc::now()).expect("valid goal"),
    }
}
