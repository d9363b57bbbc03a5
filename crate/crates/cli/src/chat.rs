//! Line-oriented terminal session.
//!
//! Plain lines are free-form feedback. `/answer N text` answers the
//! follow-up question of step N. `/plan` reprints the plan, `/quit` ends.

use std::io::{self, BufRead, Write};

use convplan::domain::{AnsweredQuestion, ObservationKind, Plan};
use convplan::engine::{EngineError, PlannerEngine, TurnResult, UserMessage};
use convplan::store::SessionId;

pub fn run(engine: &PlannerEngine, goal: Option<String>, input: &mut impl BufRead, out: &mut impl Write) -> io::Result<()> {
    let goal = match goal {
        Some(g) => g,
        None => {
            write!(out, "goal> ")?;
            out.flush()?;
            match read_line(input)? {
                Some(g) => g,
                None => return Ok(()),
            }
        }
    };
    let session = match engine.create_session(&goal) {
        Ok((session, result)) => {
            writeln!(out, "session {session}")?;
            print_turn(out, &result)?;
            session
        }
        Err((Some(session), e)) => {
            writeln!(out, "session {session}")?;
            print_error(out, &e)?;
            session
        }
        Err((None, e)) => {
            print_error(out, &e)?;
            return Ok(());
        }
    };

    loop {
        write!(out, "> ")?;
        out.flush()?;
        let Some(line) = read_line(input)? else {
            return Ok(());
        };
        match parse(&line) {
            Input::Quit => return Ok(()),
            Input::Empty => {}
            Input::ShowPlan => match engine.plan(&session, None) {
                Ok(plan) => print_plan(out, &plan)?,
                Err(e) => print_error(out, &e)?,
            },
            Input::Bad(msg) => writeln!(out, "{msg}")?,
            Input::Feedback(text) => {
                let message = UserMessage {
                    text,
                    kind: ObservationKind::FreeFormFeedback,
                    answered_question: None,
                    turn_index: None,
                };
                send(engine, &session, message, out)?;
            }
            Input::Answer(n, text) => {
                let plan = match engine.plan(&session, None) {
                    Ok(p) => p,
                    Err(e) => {
                        print_error(out, &e)?;
                        continue;
                    }
                };
                let Some(step) = n.checked_sub(1).and_then(|i| plan.steps.get(i)) else {
                    writeln!(out, "no step {n}")?;
                    continue;
                };
                let message = UserMessage {
                    text,
                    kind: ObservationKind::QuestionAnswer,
                    answered_question: Some(AnsweredQuestion {
                        step_id: step.step_id.clone(),
                        question: step.follow_up_question.clone(),
                    }),
                    turn_index: None,
                };
                send(engine, &session, message, out)?;
            }
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Input {
    Empty,
    Quit,
    ShowPlan,
    Feedback(String),
    Answer(usize, String),
    Bad(String),
}

fn parse(line: &str) -> Input {
    let line = line.trim();
    if line.is_empty() {
        return Input::Empty;
    }
    let Some(command) = line.strip_prefix('/') else {
        return Input::Feedback(line.to_string());
    };
    let (name, rest) = command.split_once(char::is_whitespace).unwrap_or((command, ""));
    match name {
        "quit" | "exit" => Input::Quit,
        "plan" => Input::ShowPlan,
        "answer" => {
            let (n, text) = rest.trim().split_once(char::is_whitespace).unwrap_or((rest.trim(), ""));
            match n.parse::<usize>() {
                Ok(n) if !text.trim().is_empty() => Input::Answer(n, text.trim().to_string()),
                _ => Input::Bad("usage: /answer <step number> <text>".into()),
            }
        }
        other => Input::Bad(format!("unknown command /{other}")),
    }
}

fn read_line(input: &mut impl BufRead) -> io::Result<Option<String>> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim_end_matches(['\r', '\n']).to_string()))
}

fn send(engine: &PlannerEngine, session: &SessionId, message: UserMessage, out: &mut impl Write) -> io::Result<()> {
    match engine.post_message(session, message) {
        Ok(result) => print_turn(out, &result),
        Err(e) => print_error(out, &e),
    }
}

fn print_error(out: &mut impl Write, e: &EngineError) -> io::Result<()> {
    writeln!(out, "turn rejected: {e}")
}

fn print_turn(out: &mut impl Write, result: &TurnResult) -> io::Result<()> {
    let action = &result.macro_action;
    writeln!(out, "[turn {}] {}: {}", result.turn_index, action.action, action.thought)?;
    if let Some(q) = &result.question_asked {
        writeln!(out, "question: {q}")?;
        return Ok(());
    }
    print_plan(out, &result.plan)
}

fn print_plan(out: &mut impl Write, plan: &Plan) -> io::Result<()> {
    writeln!(out, "plan (version {})", plan.version)?;
    for (i, step) in plan.steps.iter().enumerate() {
        writeln!(out, "{}. {}", i + 1, step.name)?;
        writeln!(out, "   {}", step.description)?;
        writeln!(out, "   ? {}", step.follow_up_question)?;
        for item in &step.content_items {
            writeln!(out, "   - {} <{}>", item.title, item.locator)?;
        }
    }
    Ok(())
}
