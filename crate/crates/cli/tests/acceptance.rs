//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines always show up in `cargo test` output.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use convplan::content::ContentSettings;
use convplan::domain::{
    normalize_step_name, ActionKind, Context, Goal, MacroAction, Observation, ObservationKind, Plan,
    SECTION_GOAL, SECTION_HISTORY, SECTION_OBSERVATION, SECTION_PRIOR_ACTIONS,
};
use convplan::engine::{EngineConfig, EngineError, PlannerEngine, UserMessage};
use convplan::gateway::{
    BackendKind, CompletionBackend, CompletionRequest, Gateway, GatewayError, ScriptedBackend,
};
use convplan::meta::decide_macro_action;
use convplan::policy::{PolicyId, PolicySet};
use convplan::replay::{replay, Transcript};
use convplan::sim::{self, EpisodeConfig, EpisodeReport, Persona};
use convplan::store::{
    reconstruct_session, EventBody, EventRange, EventStore, JsonlStore, MemoryStore, SessionId, StoreError,
    TurnEvent,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN_RUNTIME: Duration = Duration::from_secs(2);
const MIN_SIM_TURNS: usize = 1000;
const MIN_FUZZ_OUTPUTS: usize = 1000;
const SHRUNK_BUDGET: usize = 2000;
const MIN_CONTENT_STEPS: usize = 500;
const N: usize = 5;
const K: usize = 3;
const ROUND_TRIP_EPISODES: usize = 100;
const SWEEP_PERSONAS: usize = 20;
const SWEEP_MAX_TURNS: u32 = 6;
const SWEEP_LIMIT: Duration = Duration::from_secs(10);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn transcript_path(name: &str) -> PathBuf {
    fixtures().join("transcripts").join(format!("{name}.json"))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs `convplan replay` and returns (exit code, stdout, wall time).
fn replay_binary(path: &Path) -> (Option<i32>, String, Duration) {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_convplan"))
        .arg("replay")
        .arg(path)
        .output()
        .expect("convplan binary runs");
    (out.status.code(), String::from_utf8_lossy(&out.stdout).into_owned(), started.elapsed())
}

fn criterion_1() -> Outcome {
    let (code, stdout, elapsed) = replay_binary(&transcript_path("inventors"));
    ensure(code == Some(0), || format!("replay exited {code:?}:\n{stdout}"))?;
    ensure(elapsed < GOLDEN_RUNTIME, || format!("replay took {elapsed:?}"))?;

    let t = Transcript::load(&transcript_path("inventors")).map_err(|e| e.to_string())?;
    ensure(t.goal == "How do I explain to my kids about inventors?", || format!("goal {:?}", t.goal))?;
    let texts: Vec<&str> = t.messages.iter().map(|m| m.text.as_str()).collect();
    ensure(
        texts == ["They're really interested in computers and tablets", "I would love to introduce them to female inventors too."],
        || format!("messages {texts:?}"),
    )?;
    let out = replay(&t, &PolicySet::builtin());
    let actions: Vec<ActionKind> = out.results.iter().map(|r| r.macro_action.action).collect();
    ensure(actions == [ActionKind::AddSteps; 3], || format!("actions {actions:?}"))?;
    let state = out.final_state.ok_or("no final state")?;
    let names: BTreeSet<String> = state.plan.steps.iter().map(|s| s.name.trim().to_lowercase()).collect();
    for want in [
        "start with stories",
        "use everyday examples",
        "visit museums or science centers",
        "ada lovelace",
        "grace hopper",
        "hady lamarr",
    ] {
        ensure(names.contains(want), || format!("final plan lacks {want:?}: {names:?}"))?;
        ensure(
            state.plan.steps.iter().any(|s| normalize_step_name(&s.name).as_deref() == Ok(want)),
            || format!("normalizer disagrees on {want:?}"),
        )?;
    }
    Ok(format!("exit 0 in {} ms, actions [add-steps x3], {} steps", elapsed.as_millis(), state.plan.steps.len()))
}

fn criterion_2() -> Outcome {
    let (code, stdout, elapsed) = replay_binary(&transcript_path("crossfit"));
    ensure(code == Some(0), || format!("replay exited {code:?}:\n{stdout}"))?;
    ensure(elapsed < GOLDEN_RUNTIME, || format!("replay took {elapsed:?}"))?;

    let t = Transcript::load(&transcript_path("crossfit")).map_err(|e| e.to_string())?;
    ensure(t.goal == "I want to do crossfit", || format!("goal {:?}", t.goal))?;
    ensure(
        t.messages.len() == 1 && t.messages[0].text == "I would like to improve my cardiovascular health.",
        || "unexpected messages".into(),
    )?;
    let out = replay(&t, &PolicySet::builtin());
    let actions: Vec<ActionKind> = out.results.iter().map(|r| r.macro_action.action).collect();
    ensure(actions == [ActionKind::AddSteps, ActionKind::AlterSteps], || format!("actions {actions:?}"))?;
    let before = &out.results[0].plan;
    let after = &out.results[1].plan;
    ensure(before.steps.len() == after.steps.len(), || "step count changed".into())?;
    let mut changed = Vec::new();
    for (b, a) in before.steps.iter().zip(&after.steps) {
        let bj = serde_json::to_string(b).unwrap();
        let aj = serde_json::to_string(a).unwrap();
        if bj != aj {
            changed.push(b.name.clone());
        }
    }
    ensure(changed == ["Set realistic goals"], || format!("changed steps {changed:?}"))?;
    Ok(format!("exit 0 in {} ms, only \"Set realistic goals\" changed", elapsed.as_millis()))
}

/// Independent pass over an event log: for every committed ask-question
/// turn, the plan before and after must be equal.
fn ask_question_audit(events: &[TurnEvent]) -> (usize, usize, Vec<String>) {
    let mut state: Option<convplan::store::SessionState> = None;
    let mut open: Option<(Plan, Option<ActionKind>, u32)> = None;
    let mut asks = 0;
    let mut turns = 0;
    let mut problems = Vec::new();
    let close = |open: &mut Option<(Plan, Option<ActionKind>, u32)>, now: &Plan, asks: &mut usize, problems: &mut Vec<String>| {
        if let Some((before, Some(ActionKind::AskQuestion), turn)) = open.take() {
            *asks += 1;
            if &before != now {
                problems.push(format!("turn {turn}: plan changed on ask-question"));
            }
        }
    };
    for event in events {
        let current = state.as_ref().map(|s| s.plan.clone()).unwrap_or_default();
        match &event.body {
            EventBody::ObservationRecorded { observation } => {
                close(&mut open, &current, &mut asks, &mut problems);
                turns += 1;
                open = Some((current, None, observation.turn_index));
            }
            EventBody::TurnFailed { .. } => close(&mut open, &current, &mut asks, &mut problems),
            EventBody::MacroActionChosen { macro_action, .. } => {
                if let Some(o) = open.as_mut() {
                    o.1 = Some(macro_action.action);
                }
            }
            _ => {}
        }
        match state.as_mut() {
            None => state = Some(convplan::store::SessionState::from_created(event).expect("log starts with creation")),
            Some(s) => s.apply(event).expect("log folds"),
        }
    }
    let last = state.map(|s| s.plan).unwrap_or_default();
    close(&mut open, &last, &mut asks, &mut problems);
    (turns, asks, problems)
}

fn sweep_with_store(personas: &[Persona], mut config: EpisodeConfig) -> (Vec<EpisodeReport>, Arc<MemoryStore>) {
    let store = Arc::new(MemoryStore::new());
    config.store = Some(store.clone());
    let (reports, _) = sim::run_sweep(personas, &config).expect("personas are valid");
    (reports, store)
}

fn criterion_3() -> Outcome {
    let mut personas = sim::random_personas(3, 260, 6);
    let (mut reports, mut store) = sweep_with_store(&personas, EpisodeConfig::default());
    let mut seed = 4;
    let audit = |reports: &[EpisodeReport], store: &MemoryStore| {
        let mut turns = 0;
        let mut asks = 0;
        let mut problems = Vec::new();
        for r in reports {
            let events = store.load(&r.session_id).expect("session logged");
            let (t, a, p) = ask_question_audit(&events);
            turns += t;
            asks += a;
            problems.extend(p.into_iter().map(|p| format!("{}: {p}", r.persona)));
        }
        (turns, asks, problems)
    };
    let (mut turns, mut asks, mut problems) = audit(&reports, &store);
    while turns < MIN_SIM_TURNS {
        personas = sim::random_personas(seed, 100, 6);
        seed += 1;
        (reports, store) = sweep_with_store(&personas, EpisodeConfig::default());
        let (t, a, p) = audit(&reports, &store);
        turns += t;
        asks += a;
        problems.extend(p);
    }
    ensure(asks > 0, || "no ask-question turns were exercised".into())?;
    ensure(problems.is_empty(), || format!("{} violations, first: {}", problems.len(), problems[0]))?;
    Ok(format!("{turns} committed turns, {asks} ask-question turns, 0 violations"))
}

/// Meta-controller output is whatever `next` holds; everything else is
/// served from `fallback` until `next` is set.
struct Adversary {
    next: Mutex<Option<String>>,
    fallback: ScriptedBackend,
}

impl CompletionBackend for Adversary {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        match self.next.lock().unwrap().clone() {
            Some(text) => Ok(text),
            None => self.fallback.complete(request),
        }
    }
}

fn adversarial_outputs(count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let valid = [
        r#"{"thought":"new goal","action":"add-steps","arguments":["Start with stories"]}"#,
        r#"{"thought":"answer","action":"alter-steps","arguments":["Set realistic goals"]}"#,
        r#"{"thought":"unclear","action":"ask-question","arguments":[]}"#,
    ];
    let words = ["add", "steps", "alter", "ask", "question", "remove", "delete", "fly", "", "-", "_", "STEPS"];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let base = valid[i % valid.len()];
        let s = match i % 14 {
            0 => String::new(),
            1 => " \n\t ".repeat(rng.random_range(1..50)),
            2 => {
                let chars: Vec<char> = base.chars().collect();
                chars[..rng.random_range(0..chars.len())].iter().collect()
            }
            3 => {
                let name: String = (0..rng.random_range(1..4)).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join("-");
                format!(r#"{{"thought":"t","action":"{name}","arguments":["x"]}}"#)
            }
            4 => "x".repeat(rng.random_range(10_000..200_000)),
            5 => format!(r#"{{"thought":"{}","action":"add-steps","arguments":["{}"]}}"#, "t".repeat(50_000), "s".repeat(rng.random_range(100..20_000))),
            6 => (0..rng.random_range(1..400)).map(|_| char::from_u32(rng.random_range(0..0x3000)).unwrap_or('\u{fffd}')).collect(),
            7 => ["null", "[]", "42", "\"add-steps\"", "true", "{}", "[{\"action\":\"add-steps\"}]"][rng.random_range(0..7)].to_string(),
            8 => format!(r#"{{"action":{},"arguments":{}}}"#, ["1", "null", "[]", "{}", "\"\""][rng.random_range(0..5)], ["1", "{}", "[1,2]", "[[]]", "\"\"", "[\"\"]", "null"][rng.random_range(0..7)]),
            9 => "{".repeat(rng.random_range(1..5000)) + &"}".repeat(rng.random_range(0..5000)),
            10 => format!("Sure! Here you go:\n```json\n{base}\n```\nand also {base}"),
            11 => base.replace('"', if rng.random_bool(0.5) { "'" } else { "\u{201c}" }),
            12 => format!("{}\u{0}{}", &base[..base.len() / 2], &base[base.len() / 2..]),
            _ => base.to_string(),
        };
        out.push(s);
    }
    out
}

fn criterion_4() -> Outcome {
    let outputs = adversarial_outputs(MIN_FUZZ_OUTPUTS);
    let policies = PolicySet::builtin();
    let config = policies.get(PolicyId::MetaController).clone();
    let goal = Goal::new("I want to do crossfit", chrono::Utc::now()).map_err(|e| e.to_string())?;
    let observation = Observation::initial_goal(goal.text.clone()).map_err(|e| e.to_string())?;
    let context = Context {
        current_observation: observation,
        history: Vec::new(),
        prior_macro_actions: Vec::new(),
        goal,
    };

    let (mut valid, mut failures) = (0, 0);
    for (i, text) in outputs.iter().enumerate() {
        let gateway = Gateway::new(Arc::new(Adversary {
            next: Mutex::new(Some(text.clone())),
            fallback: ScriptedBackend::new(Default::default()),
        }));
        let result = catch_unwind(AssertUnwindSafe(|| decide_macro_action(&gateway, &context, &Plan::default(), &config, None)))
            .map_err(|_| format!("output {i} crashed the decision"))?;
        match result {
            Ok(decision) => {
                let ma = &decision.macro_action;
                MacroAction::new(ma.thought.clone(), ma.action, ma.arguments.clone(), ma.raw.clone())
                    .map_err(|e| format!("output {i} produced an invalid macro-action: {e}"))?;
                ensure(
                    matches!(ma.action, ActionKind::AddSteps | ActionKind::AlterSteps | ActionKind::AskQuestion),
                    || "action outside the closed set".into(),
                )?;
                valid += 1;
            }
            Err(_) => failures += 1,
        }
    }

    // the same outputs through whole turns: failures must not move state
    let transcript = Transcript::load(&transcript_path("crossfit")).map_err(|e| e.to_string())?;
    let backend = Arc::new(Adversary {
        next: Mutex::new(None),
        fallback: ScriptedBackend::new(transcript.script),
    });
    let engine = PlannerEngine::new(
        Gateway::new(backend.clone()),
        PolicySet::builtin(),
        convplan::content::ContentPipeline::new(convplan::content::ToolRegistry::stub_defaults(), ContentSettings::default()),
        Arc::new(MemoryStore::new()),
    );
    let (session, _) = engine.create_session("I want to do crossfit").map_err(|(_, e)| e.to_string())?;
    let (mut failed_turns, mut committed) = (0, 0);
    for (i, text) in outputs.iter().enumerate() {
        *backend.next.lock().unwrap() = Some(text.clone());
        let before = engine.state(&session).map_err(|e| e.to_string())?.canonical_json();
        let message = UserMessage {
            text: format!("feedback {i}"),
            kind: ObservationKind::FreeFormFeedback,
            answered_question: None,
            turn_index: None,
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| engine.post_message(&session, message)))
            .map_err(|_| format!("output {i} crashed the engine"))?;
        match outcome {
            Ok(_) => committed += 1,
            Err(EngineError::TurnFailed(_)) => {
                failed_turns += 1;
                let after = engine.state(&session).map_err(|e| e.to_string())?.canonical_json();
                let live = engine.live_state(&session).map_err(|e| e.to_string())?.canonical_json();
                ensure(before == after && before == live, || format!("output {i}: failed turn changed state"))?;
            }
            Err(e) => return Err(format!("output {i}: unexpected error {e}")),
        }
    }
    ensure(failed_turns > 0, || "no failed turns were exercised".into())?;
    Ok(format!(
        "{} outputs: {valid} valid, {failures} decision failures, 0 crashes; {failed_turns} failed turns byte-identical, {committed} committed",
        outputs.len()
    ))
}

/// Records every prompt the engine sends.
struct Recorder {
    inner: ScriptedBackend,
    prompts: Mutex<Vec<(PolicyId, String)>>,
}

impl CompletionBackend for Recorder {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.prompts.lock().unwrap().push((request.policy_id, request.rendered_prompt.clone()));
        self.inner.complete(request)
    }
}

fn turn_marker(text: &str) -> Option<u32> {
    let at = text.find("[turn ")?;
    let rest = &text[at + 6..];
    rest[..rest.find(' ')?].parse().ok()
}

/// Checks one prompt against the committed log. Returns how many history
/// pairs were evicted.
fn audit_prompt(
    prompt: &str,
    observations: &[(u32, String)],
    failed: &[(u32, String)],
    actions: &[(u32, ActionKind)],
    goal: &str,
) -> Result<usize, String> {
    let pos = |h: &str| prompt.find(&format!("{h}\n")).ok_or_else(|| format!("missing {h}"));
    let (o, h, p, g) = (pos(SECTION_OBSERVATION)?, pos(SECTION_HISTORY)?, pos(SECTION_PRIOR_ACTIONS)?, pos(SECTION_GOAL)?);
    if !(o < h && h < p && p < g) {
        return Err(format!("sections out of order: {o} {h} {p} {g}"));
    }
    let obs_section = &prompt[o..h];
    let history = &prompt[h..p];
    let priors = &prompt[p..g];
    let goal_section = &prompt[g..];
    let turn = turn_marker(obs_section).ok_or("no turn marker on current observation")?;
    // a failed attempt does not consume its index, so several texts may
    // have been offered at this turn
    let verbatim = observations
        .iter()
        .chain(failed)
        .any(|(t, text)| *t == turn && obs_section.contains(&format!("] {text}")));
    if !verbatim {
        return Err(format!("turn {turn}: current observation not verbatim"));
    }
    if !goal_section.lines().nth(1).is_some_and(|l| l == goal) {
        return Err("goal section does not hold the goal".into());
    }

    let earlier: Vec<&(u32, String)> = observations.iter().filter(|(t, _)| *t < turn).collect();
    let kept: Vec<u32> = history
        .lines()
        .filter(|l| l.starts_with("User [turn "))
        .filter_map(turn_marker)
        .collect();
    let evicted = earlier.len().saturating_sub(kept.len());
    let expected: Vec<u32> = earlier[evicted..].iter().map(|(t, _)| *t).collect();
    if kept != expected {
        return Err(format!("turn {turn}: history holds {kept:?}, expected newest {expected:?}"));
    }
    for (t, text) in &earlier[evicted..] {
        if !history.contains(&format!("[turn {t} |")) || !history.contains(text.as_str()) {
            return Err(format!("turn {turn}: earlier turn {t} not verbatim"));
        }
    }

    let prior_kinds: Vec<String> = priors.lines().filter_map(|l| l.strip_prefix("- ")).filter_map(|l| l.split(' ').next()).map(str::to_string).collect();
    let earlier_actions: Vec<String> = actions.iter().filter(|(t, _)| *t < turn).map(|(_, a)| a.to_string()).collect();
    if prior_kinds.len() > earlier_actions.len() || earlier_actions[earlier_actions.len() - prior_kinds.len()..] != prior_kinds[..] {
        return Err(format!("turn {turn}: prior actions {prior_kinds:?} are not the newest of {earlier_actions:?}"));
    }
    Ok(evicted)
}

fn context_sweep(personas: &[Persona], budget: usize) -> Result<(usize, usize, usize), String> {
    let (mut prompts, mut evicting, mut episodes) = (0, 0, 0);
    for persona in personas {
        let mut persona = persona.clone();
        let recorder = Arc::new(Recorder {
            inner: ScriptedBackend::new(persona.script.take().unwrap_or_default()),
            prompts: Mutex::new(Vec::new()),
        });
        let store = Arc::new(MemoryStore::new());
        let config = EpisodeConfig {
            engine: EngineConfig { context_budget: budget, ..EngineConfig::default() },
            backend: Some(recorder.clone()),
            store: Some(store.clone()),
            ..EpisodeConfig::default()
        };
        let report = sim::run_episode(&persona, &config).map_err(|e| e.to_string())?;
        episodes += 1;
        let Ok(events) = store.load(&report.session_id) else { continue };
        let mut observations = Vec::new();
        let mut failed = Vec::new();
        let mut actions = Vec::new();
        for e in &events {
            match &e.body {
                EventBody::ObservationRecorded { observation } => observations.push((observation.turn_index, observation.text.clone())),
                EventBody::TurnFailed { observation, .. } => failed.push((observation.turn_index, observation.text.clone())),
                EventBody::MacroActionChosen { macro_action, .. } => {
                    actions.push((observations.last().map_or(0, |o: &(u32, String)| o.0), macro_action.action))
                }
                _ => {}
            }
        }
        for (policy, prompt) in recorder.prompts.lock().unwrap().iter() {
            if matches!(policy, PolicyId::ToolSelect | PolicyId::Ranker) || !prompt.contains(SECTION_OBSERVATION) {
                continue;
            }
            prompts += 1;
            let evicted = audit_prompt(prompt, &observations, &failed, &actions, &persona.goal_text)
                .map_err(|e| format!("{}: {e}", persona.name))?;
            if evicted > 0 {
                evicting += 1;
            }
        }
    }
    Ok((episodes, prompts, evicting))
}

fn criterion_5() -> Outcome {
    let mut personas = sim::random_personas(5, 120, 6);
    personas.extend(Persona::load_dir(&fixtures().join("personas")).map_err(|e| e.to_string())?);
    let (episodes, prompts, evicting) = context_sweep(&personas, convplan::domain::DEFAULT_CONTEXT_BUDGET)?;
    ensure(evicting == 0, || format!("{evicting} prompts evicted under the default budget"))?;
    // longer episodes so history outgrows the small budget
    personas.extend(sim::random_personas(6, 60, 16));
    let (_, small_prompts, small_evicting) = context_sweep(&personas, SHRUNK_BUDGET)?;
    ensure(small_evicting > 0, || "the shrunken budget never evicted anything".into())?;
    Ok(format!(
        "{episodes} episodes, {prompts} prompts at default budget; {small_prompts} prompts at {SHRUNK_BUDGET} chars with {small_evicting} evicting oldest-first; 0 violations"
    ))
}

fn criterion_6() -> Outcome {
    let settings = ContentSettings { per_tool: N, shown: K, ..ContentSettings::default() };
    let config = EpisodeConfig { content: settings, ..EpisodeConfig::default() };
    let mut records = 0;
    let mut seed = 60;
    while records < MIN_CONTENT_STEPS {
        let personas = sim::random_personas(seed, 80, 6);
        seed += 1;
        let (reports, store) = sweep_with_store(&personas, config.clone());
        for r in &reports {
            for event in store.load(&r.session_id).unwrap_or_default() {
                let EventBody::ContentAttached { attachments } = &event.body else { continue };
                for a in attachments {
                    records += 1;
                    let fetched: HashSet<&String> = a.fetched_locators.iter().collect();
                    ensure(a.items.len() <= K, || format!("{}: {} shown", a.step_id, a.items.len()))?;
                    let locators: HashSet<&String> = a.items.iter().map(|i| &i.locator).collect();
                    ensure(locators.len() == a.items.len(), || format!("{}: duplicate locators", a.step_id))?;
                    ensure(locators.is_subset(&fetched), || format!("{}: shown item never fetched", a.step_id))?;
                    let mut ranks: Vec<u32> = a.items.iter().filter_map(|i| i.final_rank).collect();
                    ranks.sort_unstable();
                    ensure(ranks == (1..=a.items.len() as u32).collect::<Vec<_>>(), || format!("{}: ranks {ranks:?}", a.step_id))?;
                    let mut per_tool: HashMap<&str, usize> = HashMap::new();
                    for l in &a.fetched_locators {
                        *per_tool.entry(l.split('/').nth(2).unwrap_or("")).or_default() += 1;
                    }
                    ensure(per_tool.values().all(|c| *c <= N), || format!("{}: more than {N} fetched from one tool", a.step_id))?;
                }
            }
        }
    }

    let failing = EpisodeConfig { registry: sim::failing_registry(), content: settings, ..EpisodeConfig::default() };
    let (reports, store) = sweep_with_store(&sim::random_personas(61, 40, 4), failing);
    let mut committed_with_steps = 0;
    for r in &reports {
        for event in store.load(&r.session_id).unwrap_or_default() {
            match &event.body {
                EventBody::ContentAttached { attachments } => {
                    ensure(attachments.iter().all(|a| a.items.is_empty()), || "content appeared with every tool failing".into())?;
                }
                EventBody::StepsAdded { .. } | EventBody::StepAltered { .. } => committed_with_steps += 1,
                _ => {}
            }
        }
        if let Some(state) = &r.final_state {
            ensure(state.plan.steps.iter().all(|s| s.content_items.is_empty()), || "step kept content".into())?;
        }
    }
    ensure(committed_with_steps > 0, || "no plan-changing turn committed with tools failing".into())?;
    Ok(format!("{records} step attachments hold (n={N}, k={K}); {committed_with_steps} turns committed with all tools failing"))
}

/// Injects a crash into some multi-event batches and counts what was
/// really committed per session.
struct Faulty {
    inner: Arc<JsonlStore>,
    rng: Mutex<ChaCha8Rng>,
    committed: Mutex<HashMap<SessionId, usize>>,
    crashes: Mutex<usize>,
}

impl EventStore for Faulty {
    fn append(&self, session: &SessionId, events: &[TurnEvent]) -> Result<EventRange, StoreError> {
        if events.len() > 1 {
            let mut rng = self.rng.lock().unwrap();
            if rng.random_bool(0.15) {
                self.inner.inject_crash_after(rng.random_range(1..events.len()));
                *self.crashes.lock().unwrap() += 1;
            }
        }
        let range = self.inner.append(session, events)?;
        *self.committed.lock().unwrap().entry(session.clone()).or_default() += events.len();
        Ok(range)
    }

    fn load(&self, session: &SessionId) -> Result<Vec<TurnEvent>, StoreError> {
        self.inner.load(session)
    }

    fn exists(&self, session: &SessionId) -> bool {
        self.inner.exists(session)
    }
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let faulty = Arc::new(Faulty {
        inner: Arc::new(JsonlStore::open(dir.path()).map_err(|e| e.to_string())?),
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(77)),
        committed: Mutex::new(HashMap::new()),
        crashes: Mutex::new(0),
    });
    let personas = sim::random_personas(70, ROUND_TRIP_EPISODES, 6);
    let config = EpisodeConfig { store: Some(faulty.clone()), ..EpisodeConfig::default() };
    // sequential, so crash injection lands on a known batch
    let mut reports = Vec::new();
    for p in &personas {
        reports.push(sim::run_episode(p, &config).map_err(|e| e.to_string())?);
    }

    let reopened = JsonlStore::open(dir.path()).map_err(|e| e.to_string())?;
    let committed = faulty.committed.lock().unwrap().clone();
    let mut matched = 0;
    for r in &reports {
        let Some(live) = &r.final_state else { continue };
        let rebuilt = reconstruct_session(&reopened, &r.session_id).map_err(|e| format!("{}: {e}", r.persona))?;
        ensure(rebuilt.canonical_json() == live.canonical_json(), || format!("{}: reconstruction differs", r.persona))?;
        let logged = reopened.load(&r.session_id).map_err(|e| e.to_string())?.len();
        ensure(Some(&logged) == committed.get(&r.session_id), || format!("{}: log holds a partial batch", r.persona))?;
        matched += 1;
    }
    ensure(matched == ROUND_TRIP_EPISODES, || format!("only {matched} episodes produced a session"))?;
    let crashes = *faulty.crashes.lock().unwrap();
    ensure(crashes > 0, || "no faults were injected".into())?;
    ensure(
        std::fs::read_dir(dir.path()).map_err(|e| e.to_string())?.flatten().all(|e| !e.file_name().to_string_lossy().ends_with(".tmp")),
        || "temporary files survived reopen".into(),
    )?;
    Ok(format!("{matched} episodes reconstruct byte-identically; {crashes} mid-batch crashes left no partial turn"))
}

fn criterion_8() -> Outcome {
    let personas = sim::random_personas(8, SWEEP_PERSONAS, SWEEP_MAX_TURNS);
    let started = Instant::now();
    let (reports, summary) = sim::run_sweep(&personas, &EpisodeConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(reports.len() == SWEEP_PERSONAS, || format!("{} episodes", reports.len()))?;
    ensure(reports.iter().all(|r| r.turns.len() <= SWEEP_MAX_TURNS as usize), || "an episode ran past its cap".into())?;
    ensure(elapsed < SWEEP_LIMIT, || format!("sweep took {elapsed:?}"))?;
    ensure(summary.violations == 0, || format!("{} violations reported", summary.violations))?;
    Ok(format!("{} episodes, {} turns in {} ms, 0 violations", summary.episodes, summary.turns, elapsed.as_millis()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("golden inventors episode", criterion_1),
        ("golden crossfit episode", criterion_2),
        ("ask-question invariance", criterion_3),
        ("closed action set under fuzzing", criterion_4),
        ("context contract", criterion_5),
        ("retrieve-then-rank properties", criterion_6),
        ("persistence round-trip", criterion_7),
        ("simulator sweep", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
