//! Policy configuration, prompt templating and the parse-and-repair loop that
//! every structured policy call goes through.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyId {
    MetaController,
    AddSteps,
    AlterSteps,
    AskQuestion,
    ToolSelect,
    Ranker,
}

impl PolicyId {
    pub const ALL: [PolicyId; 6] = [
        PolicyId::MetaController,
        PolicyId::AddSteps,
        PolicyId::AlterSteps,
        PolicyId::AskQuestion,
        PolicyId::ToolSelect,
        PolicyId::Ranker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::MetaController => "meta-controller",
            PolicyId::AddSteps => "add-steps",
            PolicyId::AlterSteps => "alter-steps",
            PolicyId::AskQuestion => "ask-question",
            PolicyId::ToolSelect => "tool-select",
            PolicyId::Ranker => "ranker",
        }
    }

    /// Placeholders a template for this policy must contain, in this order.
    fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            PolicyId::MetaController => &["observation", "history", "prior_actions", "goal"],
            PolicyId::AddSteps => &["context", "plan"],
            PolicyId::AlterSteps => &["context", "plan", "target_step"],
            PolicyId::AskQuestion => &["context"],
            PolicyId::ToolSelect => &["step", "tools"],
            PolicyId::Ranker => &["step", "candidates"],
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_MAX_OUTPUT_CHARS: usize = 8_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub policy_id: PolicyId,
    pub prompt_template: String,
    pub exemplars: Vec<String>,
    pub model_id: String,
    pub max_retries: u32,
    pub temperature: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyConfigError {
    #[error("{policy}: template is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder {
        policy: PolicyId,
        placeholder: &'static str,
    },
    #[error("{policy}: placeholder {{{placeholder}}} is out of order")]
    PlaceholderOrder {
        policy: PolicyId,
        placeholder: &'static str,
    },
    #[error("{a} and {b} share the same exemplar set")]
    SharedExemplars { a: PolicyId, b: PolicyId },
    #[error("no configuration for policy {0}")]
    Missing(PolicyId),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyConfigError> {
        let mut last = 0;
        for &placeholder in self.policy_id.required_placeholders() {
            let needle = format!("{{{placeholder}}}");
            let pos = self.prompt_template.find(&needle).ok_or(
                PolicyConfigError::MissingPlaceholder {
                    policy: self.policy_id,
                    placeholder,
                },
            )?;
            if pos < last {
                return Err(PolicyConfigError::PlaceholderOrder {
                    policy: self.policy_id,
                    placeholder,
                });
            }
            last = pos;
        }
        Ok(())
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let exemplars = self.exemplars.join("\n\n");
        let mut all: Vec<(&str, &str)> = vec![("exemplars", exemplars.as_str())];
        all.extend_from_slice(vars);
        render_template(&self.prompt_template, &all)
    }
}

/// Single-pass `{name}` substitution. Only identifiers listed in `vars` are
/// replaced, so literal JSON braces in a template survive untouched and
/// substituted text is never rescanned.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        let closes = after[name_len..].starts_with('}');
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, value)) if closes && !name.is_empty() => {
                out.push_str(value);
                rest = &after[name_len + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// One [`PolicyConfig`] per [`PolicyId`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    configs: BTreeMap<PolicyId, PolicyConfig>,
}

macro_rules! builtin {
    ($name:literal) => {
        (
            include_str!(concat!("../prompts/", $name, ".prompt.txt")),
            include_str!(concat!("../prompts/", $name, ".exemplars.txt")),
        )
    };
}

fn builtin_files(id: PolicyId) -> (&'static str, &'static str) {
    match id {
        PolicyId::MetaController => builtin!("meta-controller"),
        PolicyId::AddSteps => builtin!("add-steps"),
        PolicyId::AlterSteps => builtin!("alter-steps"),
        PolicyId::AskQuestion => builtin!("ask-question"),
        PolicyId::ToolSelect => builtin!("tool-select"),
        PolicyId::Ranker => builtin!("ranker"),
    }
}

/// Exemplar files hold one example per block, separated by `---` lines.
pub fn split_exemplars(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim() == "---" {
            if !current.trim().is_empty() {
                out.push(current.trim().to_string());
            }
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

impl PolicySet {
    pub fn builtin() -> Self {
        let configs = PolicyId::ALL
            .into_iter()
            .map(|id| {
                let (template, exemplars) = builtin_files(id);
                (
                    id,
                    PolicyConfig {
                        policy_id: id,
                        prompt_template: template.to_string(),
                        exemplars: split_exemplars(exemplars),
                        model_id: "default".into(),
                        max_retries: DEFAULT_MAX_RETRIES,
                        temperature: 0.2,
                    },
                )
            })
            .collect();
        Self { configs }
    }

    /// Built-in prompts overlaid with `<policy-id>.prompt.txt` and
    /// `<policy-id>.exemplars.txt` files found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PolicyConfigError> {
        let mut set = Self::builtin();
        for id in PolicyId::ALL {
            let cfg = set.configs.get_mut(&id).expect("builtin covers all policies");
            let template = dir.join(format!("{id}.prompt.txt"));
            if template.exists() {
                cfg.prompt_template = read(&template)?;
            }
            let exemplars = dir.join(format!("{id}.exemplars.txt"));
            if exemplars.exists() {
                cfg.exemplars = split_exemplars(&read(&exemplars)?);
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn get(&self, id: PolicyId) -> &PolicyConfig {
        self.configs.get(&id).expect("policy set is complete")
    }

    pub fn get_mut(&mut self, id: PolicyId) -> &mut PolicyConfig {
        self.configs.get_mut(&id).expect("policy set is complete")
    }

    pub fn set_max_retries(&mut self, retries: u32) {
        for cfg in self.configs.values_mut() {
            cfg.max_retries = retries;
        }
    }

    pub fn set_model(&mut self, model: &str) {
        for cfg in self.configs.values_mut() {
            cfg.model_id = model.to_string();
        }
    }

    /// Checks every template and that no two policies share an exemplar set.
    pub fn validate(&self) -> Result<(), PolicyConfigError> {
        for id in PolicyId::ALL {
            self.configs
                .get(&id)
                .ok_or(PolicyConfigError::Missing(id))?
                .validate()?;
        }
        let sets: Vec<(PolicyId, BTreeSet<&String>)> = self
            .configs
            .iter()
            .map(|(id, c)| (*id, c.exemplars.iter().collect()))
            .collect();
        for (i, (a, sa)) in sets.iter().enumerate() {
            for (b, sb) in &sets[i + 1..] {
                if sa == sb {
                    return Err(PolicyConfigError::SharedExemplars { a: *a, b: *b });
                }
            }
        }
        Ok(())
    }
}

impl Default for PolicySet {
    fn default() -> Self {
        Self::builtin()
    }
}

fn read(path: &Path) -> Result<String, PolicyConfigError> {
    std::fs::read_to_string(path).map_err(|source| PolicyConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Parse-and-repair
// ---------------------------------------------------------------------------

/// A successfully parsed policy output.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub raw: String,
    pub attempts: u32,
}

/// Every attempt failed. `raw_outputs` holds each verbatim output in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{policy_id} failed after {attempts} attempt(s): {reason}")]
pub struct PolicyFailure {
    pub policy_id: PolicyId,
    pub attempts: u32,
    pub raw_outputs: Vec<String>,
    pub reason: String,
}

/// Calls `config`'s policy with `prompt`, parses with `parse`, and on a parse
/// error re-prompts with the error and `schema_hint` appended, up to
/// `max_retries` more times. A gateway error ends the loop at once.
pub fn call_structured<T>(
    gateway: &Gateway,
    config: &PolicyConfig,
    prompt: &str,
    schema_hint: &str,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<Parsed<T>, PolicyFailure> {
    let mut raw_outputs = Vec::new();
    let mut rendered = prompt.to_string();
    let mut reason = String::new();
    for attempt in 1..=config.max_retries + 1 {
        let request = CompletionRequest {
            policy_id: config.policy_id,
            rendered_prompt: rendered.clone(),
            temperature: config.temperature,
            max_output_chars: DEFAULT_MAX_OUTPUT_CHARS,
        };
        let text = match gateway.complete(&request) {
            Ok(resp) => resp.text,
            Err(e) => {
                return Err(gateway_failure(config.policy_id, attempt, raw_outputs, e));
            }
        };
        match parse(&text) {
            Ok(value) => {
                return Ok(Parsed {
                    value,
                    raw: text,
                    attempts: attempt,
                })
            }
            Err(e) => {
                tracing::debug!(policy = %config.policy_id, attempt, error = %e, "unusable policy output");
                reason = e;
                raw_outputs.push(text);
                rendered = format!(
                    "{prompt}\n\n## Repair\nYour previous reply could not be used: {reason}\n{schema_hint}\nReply again with only the JSON object."
                );
            }
        }
    }
    Err(PolicyFailure {
        policy_id: config.policy_id,
        attempts: config.max_retries + 1,
        raw_outputs,
        reason,
    })
}

fn gateway_failure(
    policy_id: PolicyId,
    attempt: u32,
    raw_outputs: Vec<String>,
    err: GatewayError,
) -> PolicyFailure {
    PolicyFailure {
        policy_id,
        attempts: attempt,
        raw_outputs,
        reason: format!("gateway: {err}"),
    }
}
