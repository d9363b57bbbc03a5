use std::path::PathBuf;

use convplan::domain::{normalize_step_name, ActionKind};
use convplan::policy::PolicySet;
use convplan::replay::{replay, Transcript};
use convplan::store::{fold_events, EventBody};

fn transcript(name: &str) -> Transcript {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/transcripts").join(format!("{name}.json"));
    Transcript::load(&path).unwrap()
}

#[test]
fn inventors_episode() {
    let out = replay(&transcript("inventors"), &PolicySet::builtin());
    assert!(out.report.passed, "{}", out.report.render());
    let actions: Vec<ActionKind> = out.results.iter().map(|r| r.macro_action.action).collect();
    assert_eq!(actions, vec![ActionKind::AddSteps; 3]);
    let state = out.final_state.unwrap();
    assert_eq!(state.plan.steps.len(), 9);
    assert_eq!(state.plan.version, 3);
    let names: Vec<String> = state.plan.steps.iter().map(|s| normalize_step_name(&s.name).unwrap()).collect();
    for want in ["ada lovelace", "grace hopper", "hady lamarr", "start with stories"] {
        assert!(names.contains(&want.to_string()), "{want}");
    }
    // the answer turn carries the step reference into the log
    let answered = out.events.iter().find_map(|e| match &e.body {
        EventBody::ObservationRecorded { observation } => observation.answered_question.clone(),
        _ => None,
    });
    assert_eq!(answered.unwrap().question, "What's your kids favorite invention?");
    // fixture content reaches the first step
    let first = &state.plan.steps[0];
    assert!(first.content_items.iter().any(|c| c.title.contains("children's books on inventions")));
    assert_eq!(fold_events(&out.events).unwrap().canonical_json(), state.canonical_json());
}

#[test]
fn crossfit_episode() {
    let out = replay(&transcript("crossfit"), &PolicySet::builtin());
    assert!(out.report.passed, "{}", out.report.render());
    let first = &out.results[0];
    let second = &out.results[1];
    assert_eq!(second.plan_diff.altered_steps.len(), 1);
    assert_eq!(second.plan_diff.altered_steps[0].after.name, "Set realistic goals");
    assert_ne!(
        second.plan_diff.altered_steps[0].before.search_keywords,
        second.plan_diff.altered_steps[0].after.search_keywords
    );
    for i in 0..2 {
        assert_eq!(
            serde_json::to_string(&first.plan.steps[i]).unwrap(),
            serde_json::to_string(&second.plan.steps[i]).unwrap()
        );
    }
}
