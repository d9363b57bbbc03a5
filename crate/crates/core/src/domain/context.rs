use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Goal, MacroAction, Observation, ObservationKind};

/// Default rendered-context budget, in characters.
pub const DEFAULT_CONTEXT_BUDGET: usize = 24_000;

pub const SECTION_OBSERVATION: &str = "## Current observation";
pub const SECTION_HISTORY: &str = "## History";
pub const SECTION_PRIOR_ACTIONS: &str = "## Prior macro-actions";
pub const SECTION_GOAL: &str = "## Goal";

/// One completed turn: what the user said and what the system did about it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub observation: Observation,
    pub system_response: String,
}

/// Everything a policy is conditioned on, rendered in the fixed order
/// observation, history, prior macro-actions, goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub current_observation: Observation,
    pub history: Vec<HistoryEntry>,
    pub prior_macro_actions: Vec<MacroAction>,
    pub goal: Goal,
}

/// How many entries [`Context::fit_to_budget`] dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Eviction {
    pub history: usize,
    pub macro_actions: usize,
}

pub type RenderedContext = String;

impl Context {
    /// Drops whole history pairs oldest-first, then prior macro-actions
    /// oldest-first, until the rendering fits in `budget` characters. The
    /// current observation and the goal are never dropped, so the result may
    /// still exceed a budget smaller than those two blocks.
    pub fn fit_to_budget(&mut self, budget: usize) -> Eviction {
        let mut eviction = Eviction::default();
        let obs = render_observation(&self.current_observation);
        let history: Vec<String> = self.history.iter().map(render_history_entry).collect();
        let priors: Vec<String> = self.prior_macro_actions.iter().map(render_prior).collect();

        let chars = |items: &[String]| items.iter().map(|s| s.chars().count()).collect::<Vec<_>>();
        let (history_lens, prior_lens) = (chars(&history), chars(&priors));
        let fixed = rendered_len(&obs, &[], &[], &self.goal.text) - 2 * NONE.len();
        let mut history_total: usize = history_lens.iter().sum();
        let mut prior_total: usize = prior_lens.iter().sum();

        let mut h = 0;
        let mut p = 0;
        while fixed + list_len(history_total, history.len() - h) + list_len(prior_total, priors.len() - p) > budget {
            if h < history.len() {
                history_total -= history_lens[h];
                h += 1;
            } else if p < priors.len() {
                prior_total -= prior_lens[p];
                p += 1;
            } else {
                break;
            }
        }
        debug_assert_eq!(
            fixed + list_len(history_total, history.len() - h) + list_len(prior_total, priors.len() - p),
            rendered_len(&obs, &history[h..], &priors[p..], &self.goal.text)
        );
        self.history.drain(..h);
        self.prior_macro_actions.drain(..p);
        eviction.history = h;
        eviction.macro_actions = p;
        eviction
    }

    pub fn render(&self) -> RenderedContext {
        let history: Vec<String> = self.history.iter().map(render_history_entry).collect();
        let priors: Vec<String> = self.prior_macro_actions.iter().map(render_prior).collect();
        assemble(
            &render_observation(&self.current_observation),
            &history,
            &priors,
            &self.goal.text,
        )
    }

    /// `## Current observation` section, header included.
    pub fn observation_section(&self) -> String {
        format!("{SECTION_OBSERVATION}\n{}", render_observation(&self.current_observation))
    }

    pub fn history_section(&self) -> String {
        let entries: Vec<String> = self.history.iter().map(render_history_entry).collect();
        format!("{SECTION_HISTORY}\n{}", list_or_none(&entries))
    }

    pub fn prior_actions_section(&self) -> String {
        let entries: Vec<String> = self.prior_macro_actions.iter().map(render_prior).collect();
        format!("{SECTION_PRIOR_ACTIONS}\n{}", list_or_none(&entries))
    }

    pub fn goal_section(&self) -> String {
        format!("{SECTION_GOAL}\n{}", self.goal.text)
    }
}

fn render_observation(obs: &Observation) -> String {
    let mut out = format!("[turn {} | {}", obs.turn_index, obs.kind.as_str());
    if let (ObservationKind::QuestionAnswer, Some(aq)) = (obs.kind, &obs.answered_question) {
        let _ = write!(out, " | answering {:?} on {}", aq.question, aq.step_id);
    }
    let _ = write!(out, "] {}", obs.text);
    out
}

fn render_history_entry(entry: &HistoryEntry) -> String {
    format!(
        "User {}\nAssistant: {}",
        render_observation(&entry.observation),
        entry.system_response
    )
}

fn render_prior(action: &MacroAction) -> String {
    let args = serde_json::to_string(&action.arguments).unwrap_or_default();
    format!("- {} {} (thought: {})", action.action, args, action.thought)
}

const NONE: &str = "(none)";

/// Length of `list_or_none` over `count` entries totalling `chars`.
fn list_len(chars: usize, count: usize) -> usize {
    if count == 0 {
        NONE.len()
    } else {
        chars + count - 1
    }
}

fn list_or_none(entries: &[String]) -> String {
    if entries.is_empty() {
        NONE.to_string()
    } else {
        entries.join("\n")
    }
}

fn assemble(obs: &str, history: &[String], priors: &[String], goal: &str) -> String {
    format!(
        "{SECTION_OBSERVATION}\n{obs}\n\n{SECTION_HISTORY}\n{}\n\n{SECTION_PRIOR_ACTIONS}\n{}\n\n{SECTION_GOAL}\n{goal}",
        list_or_none(history),
        list_or_none(priors),
    )
}

fn rendered_len(obs: &str, history: &[String], priors: &[String], goal: &str) -> usize {
    assemble(obs, history, priors, goal).chars().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionKind;
    use chrono::Utc;

    fn obs(turn: u32, text: &str) -> Observation {
        let kind = if turn == 0 {
            ObservationKind::InitialGoal
        } else {
            ObservationKind::FreeFormFeedback
        };
        Observation::new(kind, text, None, turn).unwrap()
    }

    fn ctx(turns: u32) -> Context {
        let goal = Goal::new("How do I explain to my kids about inventors?", Utc::now()).unwrap();
        Context {
            current_observation: obs(turns, "latest feedback"),
            history: (0..turns)
                .map(|t| HistoryEntry {
                    observation: obs(t, &format!("feedback number {t}")),
                    system_response: format!("Added steps: s{t}"),
                })
                .collect(),
            prior_macro_actions: (0..turns)
                .map(|t| {
                    MacroAction::new(format!("thought {t}"), ActionKind::AddSteps, vec![format!("s{t}")], "{}")
                        .unwrap()
                })
                .collect(),
            goal,
        }
    }

    #[test]
    fn empty_history_renders_placeholders_in_order() {
        let text = ctx(0).render();
        let o = text.find(SECTION_OBSERVATION).unwrap();
        let h = text.find(SECTION_HISTORY).unwrap();
        let p = text.find(SECTION_PRIOR_ACTIONS).unwrap();
        let g = text.find(SECTION_GOAL).unwrap();
        assert!(o < h && h < p && p < g);
        assert_eq!(text.matches("(none)").count(), 2);
    }

    #[test]
    fn render_is_the_four_sections_joined() {
        let c = ctx(2);
        let joined = [
            c.observation_section(),
            c.history_section(),
            c.prior_actions_section(),
            c.goal_section(),
        ]
        .join("\n\n");
        assert_eq!(c.render(), joined);
    }

    #[test]
    fn eviction_is_oldest_history_first() {
        let mut c = ctx(5);
        let full = c.render().chars().count();
        let ev = c.fit_to_budget(full - 1);
        assert_eq!(ev, Eviction { history: 1, macro_actions: 0 });
        assert_eq!(c.history[0].observation.text, "feedback number 1");
        assert!(c.render().chars().count() < full);
    }

    #[test]
    fn tiny_budget_keeps_observation_and_goal() {
        let mut c = ctx(4);
        let ev = c.fit_to_budget(10);
        assert_eq!(ev, Eviction { history: 4, macro_actions: 4 });
        let text = c.render();
        assert!(text.contains("latest feedback"));
        assert!(text.contains("explain to my kids about inventors"));
    }

    #[test]
    fn question_answer_names_the_step() {
        let o = Observation::new(
            ObservationKind::QuestionAnswer,
            "I would like to improve my cardiovascular health.",
            Some(crate::domain::AnsweredQuestion {
                step_id: "step-3".into(),
                question: "What are your fitness goals?".into(),
            }),
            1,
        )
        .unwrap();
        let line = render_observation(&o);
        assert!(line.contains("step-3"));
        assert!(line.contains("What are your fitness goals?"));
        assert!(line.ends_with("I would like to improve my cardiovascular health."));
    }

    proptest::proptest! {
        #[test]
        fn fitting_keeps_the_newest_history_and_fits_when_possible(turns in 0u32..30, budget in 0usize..6000) {
            let full = ctx(turns);
            let mut fitted = full.clone();
            let ev = fitted.fit_to_budget(budget);
            proptest::prop_assert_eq!(&fitted.history[..], &full.history[ev.history..]);
            proptest::prop_assert_eq!(&fitted.prior_macro_actions[..], &full.prior_macro_actions[ev.macro_actions..]);
            // macro-actions only go once history is exhausted
            proptest::prop_assert!(ev.macro_actions == 0 || fitted.history.is_empty());
            let len = fitted.render().chars().count();
            proptest::prop_assert!(len <= budget || (fitted.history.is_empty() && fitted.prior_macro_actions.is_empty()));
            proptest::prop_assert_eq!(&fitted.current_observation, &full.current_observation);
            if ev.history + ev.macro_actions > 0 {
                proptest::prop_assert!(full.render().chars().count() > budget);
            }
        }
    }
}
