//! Retrieve-then-rank content for plan steps.
//!
//! Stage one asks a policy which tools to query, then fetches up to `n`
//! items per tool. Stage two asks a ranking policy for the top `k`. Both
//! policy calls have deterministic fallbacks, so content selection never
//! fails a turn.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{ContentItem, PlanStep};
use crate::gateway::Gateway;
use crate::policy::{call_structured, PolicyConfig, PolicyId, PolicySet};
use crate::structured::{extract_object, field, string_field, string_list_field};

pub const DEFAULT_PER_TOOL: usize = 5;
pub const DEFAULT_SHOWN: usize = 3;
pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(5);

/// What a tool adapter returns for one hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawItem {
    pub title: String,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("tool {tool} failed: {message}")]
    Failed { tool: String, message: String },
    #[error("tool {tool} timed out after {elapsed_ms} ms")]
    Timeout { tool: String, elapsed_ms: u64 },
}

pub trait ContentTool: Send + Sync {
    fn name(&self) -> &str;
    fn fetch(&self, keywords: &[String], limit: usize) -> Result<Vec<RawItem>, ToolError>;
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<Arc<dyn ContentTool>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tool`, replacing any tool with the same name.
    pub fn register(&mut self, tool: Arc<dyn ContentTool>) -> &mut Self {
        self.tools.retain(|t| t.name() != tool.name());
        self.tools.push(tool);
        self
    }

    /// `search` and `recommend-engine` stubs that synthesize results.
    pub fn stub_defaults() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(StubTool::synthetic("search")));
        reg.register(Arc::new(StubTool::synthetic("recommend-engine")));
        reg
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn ContentTool>> {
        self.tools.iter().find(|t| t.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolQuery {
    pub tool_name: String,
    pub keywords: Vec<String>,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub items: Vec<ContentItem>,
    pub tool_name: String,
    pub elapsed_ms: f64,
}

// ---------------------------------------------------------------------------
// Tools
// ---------------------------------------------------------------------------

/// Fixture-backed tool. Fixture files map a keyword to its items; lookup is
/// case-insensitive. With `synthesize` set, keywords missing from the
/// fixture produce deterministic placeholder items so every step gets
/// candidates.
#[derive(Debug, Clone, Default)]
pub struct StubTool {
    name: String,
    fixture: HashMap<String, Vec<RawItem>>,
    synthesize: bool,
}

impl StubTool {
    pub fn new(name: impl Into<String>, fixture: HashMap<String, Vec<RawItem>>) -> Self {
        Self {
            name: name.into(),
            fixture: fixture
                .into_iter()
                .map(|(k, v)| (k.trim().to_lowercase(), v))
                .collect(),
            synthesize: false,
        }
    }

    pub fn synthetic(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            fixture: HashMap::new(),
            synthesize: true,
        }
    }

    pub fn with_synthesis(mut self, on: bool) -> Self {
        self.synthesize = on;
        self
    }

    pub fn load_fixture(name: impl Into<String>, path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let fixture: HashMap<String, Vec<RawItem>> = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(name, fixture))
    }
}

fn slug(text: &str) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

impl ContentTool for StubTool {
    fn name(&self) -> &str {
        &self.name
    }

    fn fetch(&self, keywords: &[String], limit: usize) -> Result<Vec<RawItem>, ToolError> {
        let mut out: Vec<RawItem> = keywords
            .iter()
            .filter_map(|k| self.fixture.get(&k.trim().to_lowercase()))
            .flatten()
            .take(limit)
            .cloned()
            .collect();
        if self.synthesize && !keywords.is_empty() {
            let mut i = 0;
            while out.len() < limit {
                let kw = &keywords[i % keywords.len()];
                let ordinal = i / keywords.len() + 1;
                out.push(RawItem {
                    title: format!("{kw} ({} result {ordinal})", self.name),
                    locator: format!("stub://{}/{}/{ordinal}", self.name, slug(kw)),
                    snippet: Some(format!("Placeholder resource about {kw}.")),
                });
                i += 1;
            }
        }
        Ok(out)
    }
}

/// Always errors. Useful for exercising degraded content paths.
#[derive(Debug, Clone)]
pub struct FailingTool {
    name: String,
}

impl FailingTool {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }
}

impl ContentTool for FailingTool {
    fn name(&self) -> &str {
        &self.name
    }

    fn fetch(&self, _keywords: &[String], _limit: usize) -> Result<Vec<RawItem>, ToolError> {
        Err(ToolError::Failed {
            tool: self.name.clone(),
            message: "forced failure".into(),
        })
    }
}

/// Generic HTTP search adapter: `GET {endpoint}?q=<keywords>&limit=<n>`,
/// answering with a JSON list (or `{"results": [...]}`) of objects carrying
/// `title`, `url`/`locator`/`link` and an optional `snippet`.
pub struct WebSearchTool {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl WebSearchTool {
    pub fn new(
        name: impl Into<String>,
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, ToolError> {
        let name = name.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ToolError::Failed {
                tool: name.clone(),
                message: e.to_string(),
            })?;
        Ok(Self {
            name,
            endpoint: endpoint.into(),
            api_key,
            client,
        })
    }

    fn parse_items(value: &Value) -> Vec<RawItem> {
        let list = match value {
            Value::Array(items) => items.as_slice(),
            Value::Object(obj) => match obj.get("results").or_else(|| obj.get("items")) {
                Some(Value::Array(items)) => items.as_slice(),
                _ => &[],
            },
            _ => &[],
        };
        list.iter()
            .filter_map(|v| {
                let obj = v.as_object()?;
                Some(RawItem {
                    title: string_field(obj, &["title", "name"]).ok()??,
                    locator: string_field(obj, &["url", "locator", "link"]).ok()??,
                    snippet: string_field(obj, &["snippet", "description"]).ok()?,
                })
            })
            .collect()
    }
}

impl ContentTool for WebSearchTool {
    fn name(&self) -> &str {
        &self.name
    }

    fn fetch(&self, keywords: &[String], limit: usize) -> Result<Vec<RawItem>, ToolError> {
        let fail = |message: String| ToolError::Failed {
            tool: self.name.clone(),
            message,
        };
        let limit_str = limit.to_string();
        let query = keywords.join(" ");
        let mut req = self
            .client
            .get(&self.endpoint)
            .query(&[("q", query.as_str()), ("limit", limit_str.as_str())]);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("status {}", resp.status())));
        }
        let value: Value = resp.json().map_err(|e| fail(e.to_string()))?;
        Ok(Self::parse_items(&value))
    }
}

// ---------------------------------------------------------------------------
// Stage one: tool selection and fetching
// ---------------------------------------------------------------------------

fn fallback_queries(step: &PlanStep, registry: &ToolRegistry, per_tool: usize) -> Vec<ToolQuery> {
    registry
        .names()
        .into_iter()
        .map(|name| ToolQuery {
            tool_name: name.to_string(),
            keywords: step.search_keywords.clone(),
            limit: per_tool,
        })
        .collect()
}

fn render_step(step: &PlanStep) -> String {
    format!(
        "{}: {} (keywords: {})",
        step.name,
        step.description,
        step.search_keywords.join(", ")
    )
}

/// Picks at most one query per registered tool. Unknown tools are dropped;
/// if nothing usable remains, or the policy fails, every tool is queried
/// with the step's own keywords.
pub fn select_tools(
    gateway: &Gateway,
    step: &PlanStep,
    registry: &ToolRegistry,
    config: &PolicyConfig,
    per_tool: usize,
) -> Vec<ToolQuery> {
    let tools = registry.names().join(", ");
    let prompt = config.render(&[("step", &render_step(step)), ("tools", &tools)]);
    let parse = |text: &str| -> Result<Vec<(String, Vec<String>)>, String> {
        let obj = extract_object(text)?;
        let Some(Value::Array(queries)) = field(&obj, &["queries", "tools"]) else {
            return Err("missing: queries".into());
        };
        queries
            .iter()
            .map(|q| match q {
                Value::String(name) => Ok((name.clone(), Vec::new())),
                Value::Object(o) => Ok((
                    string_field(o, &["tool", "tool_name", "name"])?.ok_or("query without tool")?,
                    string_list_field(o, &["keywords", "search_keywords", "query"])?.unwrap_or_default(),
                )),
                other => Err(format!("bad query {other}")),
            })
            .collect()
    };
    let hint = r#"Required schema: {"thought": string, "queries": [{"tool": string, "keywords": [string]}]}."#;
    let chosen = match call_structured(gateway, config, &prompt, hint, parse) {
        Ok(parsed) => parsed.value,
        Err(e) => {
            tracing::debug!(step = %step.name, error = %e, "tool selection fell back");
            return fallback_queries(step, registry, per_tool);
        }
    };

    let mut seen = HashSet::new();
    let queries: Vec<ToolQuery> = chosen
        .into_iter()
        .filter_map(|(tool, keywords)| {
            if registry.get(&tool).is_none() {
                tracing::info!(tool = %tool, "policy chose an unregistered tool; dropped");
                return None;
            }
            if !seen.insert(tool.clone()) {
                return None;
            }
            let keywords: Vec<String> = keywords.into_iter().filter(|k| !k.is_empty()).collect();
            Some(ToolQuery {
                tool_name: tool,
                keywords: if keywords.is_empty() {
                    step.search_keywords.clone()
                } else {
                    keywords
                },
                limit: per_tool,
            })
        })
        .collect();
    if queries.is_empty() {
        fallback_queries(step, registry, per_tool)
    } else {
        queries
    }
}

/// Runs the queries concurrently. A tool that errors or exceeds `timeout`
/// contributes nothing. Results are merged by tool name, each capped at its
/// query limit, deduplicated by locator (first occurrence wins) and numbered
/// 1.. in merged order, so thread scheduling never affects the outcome.
pub fn fetch_candidates(
    registry: &ToolRegistry,
    queries: &[ToolQuery],
    timeout: Duration,
) -> (Vec<ContentItem>, Vec<ToolResult>) {
    let (tx, rx) = mpsc::channel();
    let mut pending = 0;
    for (idx, query) in queries.iter().enumerate() {
        let Some(tool) = registry.get(&query.tool_name).cloned() else {
            tracing::warn!(tool = %query.tool_name, "query for unregistered tool skipped");
            continue;
        };
        let tx = tx.clone();
        let query = query.clone();
        pending += 1;
        std::thread::spawn(move || {
            let started = Instant::now();
            let result = tool.fetch(&query.keywords, query.limit);
            let _ = tx.send((idx, result, started.elapsed()));
        });
    }
    drop(tx);

    let deadline = Instant::now() + timeout;
    let mut arrived: Vec<(usize, Vec<RawItem>, Duration)> = Vec::new();
    while pending > 0 {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(remaining) {
            Ok((idx, Ok(items), elapsed)) => {
                arrived.push((idx, items, elapsed));
                pending -= 1;
            }
            Ok((idx, Err(e), _)) => {
                tracing::warn!(tool = %queries[idx].tool_name, error = %e, "tool failed; no items from it");
                pending -= 1;
            }
            Err(_) => {
                tracing::warn!(pending, "tool timeout; continuing without late results");
                break;
            }
        }
    }
    arrived.sort_by(|a, b| queries[a.0].tool_name.cmp(&queries[b.0].tool_name).then(a.0.cmp(&b.0)));

    let mut seen = HashSet::new();
    let mut merged = Vec::new();
    let mut results = Vec::new();
    for (idx, items, elapsed) in arrived {
        let query = &queries[idx];
        let mut tool_items = Vec::new();
        for raw in items.into_iter().take(query.limit) {
            if raw.title.trim().is_empty() || raw.locator.trim().is_empty() {
                continue;
            }
            let item = ContentItem {
                title: raw.title,
                locator: raw.locator,
                snippet: raw.snippet,
                source_tool: query.tool_name.clone(),
                fetch_rank: 0,
                final_rank: None,
            };
            tool_items.push(item.clone());
            if seen.insert(item.locator.clone()) {
                merged.push(item);
            }
        }
        results.push(ToolResult {
            items: tool_items,
            tool_name: query.tool_name.clone(),
            elapsed_ms: elapsed.as_secs_f64() * 1000.0,
        });
    }
    for (i, item) in merged.iter_mut().enumerate() {
        item.fetch_rank = i as u32 + 1;
    }
    (merged, results)
}

// ---------------------------------------------------------------------------
// Stage two: ranking
// ---------------------------------------------------------------------------

/// Keeps at most `k` candidates. Locators the policy names that are not
/// among the candidates are ignored, and any remaining slots are filled in
/// fetch order; the policy can reorder and filter but never invent items.
pub fn rank_candidates(
    gateway: &Gateway,
    step: &PlanStep,
    candidates: &[ContentItem],
    k: usize,
    config: &PolicyConfig,
) -> Vec<ContentItem> {
    if candidates.is_empty() || k == 0 {
        return Vec::new();
    }
    let listing = candidates
        .iter()
        .map(|c| {
            format!(
                "[{}] {} | {} | {}",
                c.fetch_rank,
                c.locator,
                c.title,
                c.snippet.as_deref().unwrap_or("")
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let k_str = k.to_string();
    let prompt = config.render(&[("step", &render_step(step)), ("candidates", &listing), ("k", &k_str)]);
    let parse = |text: &str| -> Result<Vec<Value>, String> {
        let obj = extract_object(text)?;
        match field(&obj, &["ranking", "top_k", "locators"]) {
            Some(Value::Array(items)) => Ok(items.clone()),
            _ => Err("missing: ranking".into()),
        }
    };
    let hint = r#"Required schema: {"thought": string, "ranking": [locator, ...]}."#;
    let picks: Vec<Value> = match call_structured(gateway, config, &prompt, hint, parse) {
        Ok(parsed) => parsed.value,
        Err(e) => {
            tracing::debug!(step = %step.name, error = %e, "ranking fell back to fetch order");
            Vec::new()
        }
    };

    let by_locator: HashMap<&str, &ContentItem> =
        candidates.iter().map(|c| (c.locator.as_str(), c)).collect();
    let mut chosen: Vec<&ContentItem> = Vec::new();
    let mut taken = HashSet::new();
    for pick in &picks {
        if chosen.len() == k {
            break;
        }
        let item = match pick {
            Value::String(loc) => by_locator.get(loc.trim()).copied(),
            Value::Number(n) => n
                .as_u64()
                .and_then(|r| candidates.iter().find(|c| u64::from(c.fetch_rank) == r)),
            _ => None,
        };
        match item {
            Some(item) if taken.insert(item.locator.as_str()) => chosen.push(item),
            Some(_) => {}
            None => tracing::debug!(pick = %pick, "ranker named an unknown candidate; ignored"),
        }
    }
    let mut by_fetch: Vec<&ContentItem> = candidates.iter().collect();
    by_fetch.sort_by_key(|c| c.fetch_rank);
    for item in by_fetch {
        if chosen.len() == k {
            break;
        }
        if taken.insert(item.locator.as_str()) {
            chosen.push(item);
        }
    }
    chosen
        .into_iter()
        .enumerate()
        .map(|(i, item)| ContentItem {
            final_rank: Some(i as u32 + 1),
            ..item.clone()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContentSettings {
    /// `n`: items fetched per tool.
    pub per_tool: usize,
    /// `k`: items shown per step.
    pub shown: usize,
    pub tool_timeout: Duration,
}

impl Default for ContentSettings {
    fn default() -> Self {
        Self {
            per_tool: DEFAULT_PER_TOOL,
            shown: DEFAULT_SHOWN,
            tool_timeout: DEFAULT_TOOL_TIMEOUT,
        }
    }
}

/// Shown items for one step plus the locators they were chosen from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepContent {
    pub items: Vec<ContentItem>,
    pub fetched_locators: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ContentPipeline {
    pub registry: ToolRegistry,
    pub settings: ContentSettings,
}

impl ContentPipeline {
    pub fn new(registry: ToolRegistry, settings: ContentSettings) -> Self {
        Self { registry, settings }
    }

    pub fn refresh(&self, gateway: &Gateway, policies: &PolicySet, step: &PlanStep) -> StepContent {
        if self.registry.is_empty() {
            return StepContent {
                items: Vec::new(),
                fetched_locators: Vec::new(),
            };
        }
        let queries = select_tools(
            gateway,
            step,
            &self.registry,
            policies.get(PolicyId::ToolSelect),
            self.settings.per_tool,
        );
        let (candidates, _) = fetch_candidates(&self.registry, &queries, self.settings.tool_timeout);
        let items = rank_candidates(
            gateway,
            step,
            &candidates,
            self.settings.shown,
            policies.get(PolicyId::Ranker),
        );
        StepContent {
            items,
            fetched_locators: candidates.into_iter().map(|c| c.locator).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CreatedBy, Provenance, StepDraft, StepId};
    use crate::gateway::{Script, ScriptEntry};

    fn step(name: &str, keywords: &[&str]) -> PlanStep {
        PlanStep::from_draft(
            StepId::for_ordinal(1),
            StepDraft::new(name, "d", "q?", keywords.iter().map(|s| s.to_string())).unwrap(),
            Provenance { created_turn: 0, last_altered_turn: None, created_by: CreatedBy::AddSteps },
        )
    }

    fn cfg(id: PolicyId) -> PolicyConfig {
        PolicySet::builtin().get(id).clone()
    }

    fn candidates(n: usize) -> Vec<ContentItem> {
        (1..=n)
            .map(|i| ContentItem {
                title: format!("t{i}"),
                locator: format!("https://x/{i}"),
                snippet: None,
                source_tool: "search".into(),
                fetch_rank: i as u32,
                final_rank: None,
            })
            .collect()
    }

    struct SlowTool;
    impl ContentTool for SlowTool {
        fn name(&self) -> &str {
            "slow"
        }
        fn fetch(&self, _: &[String], _: usize) -> Result<Vec<RawItem>, ToolError> {
            std::thread::sleep(Duration::from_millis(500));
            Ok(vec![RawItem { title: "late".into(), locator: "late://1".into(), snippet: None }])
        }
    }

    #[test]
    fn select_tools_queries_every_tool_on_policy_failure() {
        let gw = Gateway::scripted(Script::default());
        let q = select_tools(&gw, &step("Learn the basics of crossfit", &["crossfit basics"]), &ToolRegistry::stub_defaults(), &cfg(PolicyId::ToolSelect), 5);
        assert_eq!(q.len(), 2);
        assert!(q.iter().all(|q| q.keywords == vec!["crossfit basics"] && q.limit == 5));
    }

    #[test]
    fn select_tools_clamps_to_registry() {
        let gw = Gateway::scripted(Script::new(vec![ScriptEntry::new(
            PolicyId::ToolSelect,
            "",
            r#"{"queries":[{"tool":"search","keywords":["a"]},{"tool":"recommend-engine"},{"tool":"search"}]}"#,
        )]));
        let mut reg = ToolRegistry::new();
        reg.register(Arc::new(StubTool::synthetic("search")));
        let q = select_tools(&gw, &step("s", &["k"]), &reg, &cfg(PolicyId::ToolSelect), 5);
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].keywords, vec!["a"]);
    }

    #[test]
    fn select_tools_unknown_tool_falls_back() {
        let gw = Gateway::scripted(Script::new(vec![ScriptEntry::new(
            PolicyId::ToolSelect,
            "",
            r#"{"queries":[{"tool":"wiki","keywords":["a"]}]}"#,
        )]));
        let q = select_tools(&gw, &step("s", &["k"]), &ToolRegistry::stub_defaults(), &cfg(PolicyId::ToolSelect), 5);
        assert_eq!(q.iter().map(|q| q.tool_name.as_str()).collect::<Vec<_>>(), vec!["search", "recommend-engine"]);
    }

    #[test]
    fn fetch_caps_and_dedups() {
        let reg = ToolRegistry::stub_defaults();
        let queries = fallback_queries(&step("s", &["crossfit"]), &reg, 5);
        let (items, results) = fetch_candidates(&reg, &queries, DEFAULT_TOOL_TIMEOUT);
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|r| r.items.len() == 5));
        assert_eq!(items.len(), 10);
        assert_eq!(items.iter().map(|i| i.fetch_rank).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        // merged by tool name, so recommend-engine precedes search
        assert_eq!(items[0].source_tool, "recommend-engine");

        let mut fixture = HashMap::new();
        fixture.insert("shared".to_string(), vec![RawItem { title: "same".into(), locator: "https://same".into(), snippet: None }]);
        let mut reg = ToolRegistry::new();
        reg.register(Arc::new(StubTool::new("a", fixture.clone())));
        reg.register(Arc::new(StubTool::new("b", fixture)));
        let queries = fallback_queries(&step("s", &["shared"]), &reg, 5);
        let (items, _) = fetch_candidates(&reg, &queries, DEFAULT_TOOL_TIMEOUT);
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].source_tool, "a");
    }

    #[test]
    fn failing_and_slow_tools_contribute_nothing() {
        let mut reg = ToolRegistry::new();
        reg.register(Arc::new(FailingTool::new("search")));
        reg.register(Arc::new(SlowTool));
        let queries = fallback_queries(&step("s", &["k"]), &reg, 5);
        let started = Instant::now();
        let (items, _) = fetch_candidates(&reg, &queries, Duration::from_millis(50));
        assert!(items.is_empty());
        assert!(started.elapsed() < Duration::from_millis(400));
    }

    #[test]
    fn rank_under_full_returns_everything() {
        let gw = Gateway::scripted(Script::new(vec![ScriptEntry::new(
            PolicyId::Ranker,
            "",
            r#"{"ranking":["https://x/2","https://x/1"]}"#,
        )]));
        let out = rank_candidates(&gw, &step("s", &["k"]), &candidates(2), 3, &cfg(PolicyId::Ranker));
        assert_eq!(out.iter().map(|c| c.locator.as_str()).collect::<Vec<_>>(), vec!["https://x/2", "https://x/1"]);
        assert_eq!(out.iter().map(|c| c.final_rank).collect::<Vec<_>>(), vec![Some(1), Some(2)]);
    }

    #[test]
    fn rank_ignores_fabricated_locators_and_fills_by_fetch_rank() {
        let gw = Gateway::scripted(Script::new(vec![ScriptEntry::new(
            PolicyId::Ranker,
            "",
            r#"{"ranking":["https://evil/1","https://x/4","https://x/4"]}"#,
        )]));
        let out = rank_candidates(&gw, &step("s", &["k"]), &candidates(5), 3, &cfg(PolicyId::Ranker));
        assert_eq!(out.iter().map(|c| c.locator.as_str()).collect::<Vec<_>>(), vec!["https://x/4", "https://x/1", "https://x/2"]);
    }

    #[test]
    fn rank_falls_back_to_fetch_order() {
        let gw = Gateway::scripted(Script::default());
        let out = rank_candidates(&gw, &step("s", &["k"]), &candidates(5), 3, &cfg(PolicyId::Ranker));
        assert_eq!(out.iter().map(|c| c.fetch_rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn web_search_item_parsing() {
        let v: Value = serde_json::json!({"results": [
            {"title": "A", "url": "https://a", "snippet": "s"},
            {"title": "no locator"},
            {"name": "B", "link": "https://b"}
        ]});
        let items = WebSearchTool::parse_items(&v);
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].locator, "https://b");
    }

    proptest::proptest! {
        #[test]
        fn ranking_never_invents_or_repeats(n in 0usize..12, k in 0usize..6, reply in ".{0,200}", picks in proptest::collection::vec(0u32..15, 0..8)) {
            let cands = candidates(n);
            let listed: Vec<String> = picks.iter().map(|p| format!("\"https://x/{p}\"")).collect();
            let structured = format!(r#"{{"ranking":[{}]}}"#, listed.join(","));
            for text in [reply.clone(), structured] {
                let gw = Gateway::scripted(Script::new(vec![ScriptEntry::new(PolicyId::Ranker, "", text)]));
                let shown = rank_candidates(&gw, &step("s", &["k"]), &cands, k, &cfg(PolicyId::Ranker));
                proptest::prop_assert_eq!(shown.len(), k.min(n));
                let locs: HashSet<&str> = shown.iter().map(|c| c.locator.as_str()).collect();
                proptest::prop_assert_eq!(locs.len(), shown.len());
                for (i, item) in shown.iter().enumerate() {
                    proptest::prop_assert!(cands.iter().any(|c| c.locator == item.locator && c.title == item.title));
                    proptest::prop_assert_eq!(item.final_rank, Some(i as u32 + 1));
                }
            }
        }
    }
}
