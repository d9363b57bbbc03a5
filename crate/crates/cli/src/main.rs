use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use convplan::content::{ContentPipeline, ContentSettings, ToolRegistry, WebSearchTool};
use convplan::engine::{BusyMode, EngineConfig, PlannerEngine};
use convplan::gateway::{CompletionBackend, Gateway, LiveBackend, LiveConfig, ReplayBackend, Script, ScriptedBackend};
use convplan::policy::PolicySet;
use convplan::replay::{replay_with, Transcript};
use convplan::sim::{self, EpisodeConfig, Persona};
use convplan::store::{EventStore, JsonlStore, MemoryStore};
use tracing_subscriber::EnvFilter;

mod chat;

/// Conversational planning agent.
#[derive(Debug, Parser)]
#[command(name = "convplan", version)]
struct Cli {
    #[command(flatten)]
    config: Config,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start the HTTP service.
    Serve,
    /// Interactive planning session in the terminal.
    Chat {
        /// Goal to start with; prompted for when omitted.
        #[arg(long)]
        goal: Option<String>,
    },
    /// Replay a golden transcript and compare against its expectations.
    Replay { file: PathBuf },
    /// Run persona episodes and report invariant violations.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Directory of persona JSON files.
    persona_dir: Option<PathBuf>,
    /// Generate this many random personas as well.
    #[arg(long, default_value_t = 0)]
    random: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Turn cap for random personas.
    #[arg(long, default_value_t = 6)]
    max_turns: u32,
    /// Write episodes.json, summary.json and turns.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Scripted,
    Replay,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BusyChoice {
    Reject,
    Wait,
}

#[derive(Debug, Args)]
struct Config {
    #[arg(long, global = true, env = "CONVPLAN_LISTEN", default_value = "127.0.0.1:8080")]
    listen: String,
    /// Persist sessions as JSONL logs here; in-memory when omitted.
    #[arg(long, global = true, env = "CONVPLAN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Completion backend. `live` reads CONVPLAN_LLM_URL, CONVPLAN_LLM_MODEL
    /// and CONVPLAN_LLM_API_KEY.
    #[arg(long, global = true, env = "CONVPLAN_BACKEND", value_enum, default_value_t = BackendChoice::Scripted)]
    backend: BackendChoice,
    /// Script (scripted backend) or recorded exchanges (replay backend).
    /// A transcript or persona file is accepted as a script too.
    #[arg(long, global = true, env = "CONVPLAN_SCRIPT")]
    script: Option<PathBuf>,
    /// Items fetched per tool.
    #[arg(short = 'n', long, global = true, env = "CONVPLAN_N", default_value_t = 5)]
    per_tool: usize,
    /// Items shown per step.
    #[arg(short = 'k', long, global = true, env = "CONVPLAN_K", default_value_t = 3)]
    shown: usize,
    #[arg(long, global = true, env = "CONVPLAN_MAX_RETRIES", default_value_t = 2)]
    max_retries: u32,
    #[arg(long, global = true, value_enum, default_value_t = BusyChoice::Reject)]
    busy: BusyChoice,
    /// Context budget in characters.
    #[arg(long, global = true, default_value_t = convplan::domain::DEFAULT_CONTEXT_BUDGET)]
    context_budget: usize,
    /// Require `Authorization: Bearer <token>` on API routes.
    #[arg(long, global = true, env = "CONVPLAN_AUTH_TOKEN")]
    auth_token: Option<String>,
    /// HTTP search endpoint used in place of the stub `search` tool.
    #[arg(long, global = true, env = "CONVPLAN_SEARCH_URL")]
    search_url: Option<String>,
}

/// Failures that are the caller's fault: exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

impl Config {
    fn policies(&self) -> PolicySet {
        let mut policies = PolicySet::builtin();
        policies.set_max_retries(self.max_retries);
        policies
    }

    fn content_settings(&self) -> anyhow::Result<ContentSettings> {
        if self.per_tool == 0 || self.shown == 0 {
            return Err(usage("-n and -k must be at least 1"));
        }
        Ok(ContentSettings {
            per_tool: self.per_tool,
            shown: self.shown,
            ..ContentSettings::default()
        })
    }

    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            context_budget: self.context_budget,
            busy_mode: match self.busy {
                BusyChoice::Reject => BusyMode::Reject,
                BusyChoice::Wait => BusyMode::Wait,
            },
        }
    }

    fn registry(&self, settings: &ContentSettings) -> anyhow::Result<ToolRegistry> {
        let mut registry = ToolRegistry::stub_defaults();
        if let Some(url) = &self.search_url {
            let key = std::env::var("CONVPLAN_SEARCH_API_KEY").ok();
            let tool = WebSearchTool::new("search", url.clone(), key, settings.tool_timeout)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            registry.register(Arc::new(tool));
        }
        Ok(registry)
    }

    fn backend(&self) -> anyhow::Result<Arc<dyn CompletionBackend>> {
        Ok(match self.backend {
            BackendChoice::Scripted => {
                let script = match &self.script {
                    Some(path) => load_script(path)?,
                    None => Script::default(),
                };
                Arc::new(ScriptedBackend::new(script))
            }
            BackendChoice::Replay => {
                let path = self.script.as_ref().ok_or_else(|| usage("--backend replay needs --script"))?;
                Arc::new(
                    ReplayBackend::load_file(path)
                        .map_err(|e| usage(format!("cannot load {}: {e}", path.display())))?,
                )
            }
            BackendChoice::Live => {
                let config = LiveConfig::from_env().ok_or_else(|| usage("--backend live needs CONVPLAN_LLM_URL"))?;
                Arc::new(LiveBackend::new(config).map_err(|e| anyhow::anyhow!("{e}"))?)
            }
        })
    }

    fn store(&self) -> anyhow::Result<Arc<dyn EventStore>> {
        Ok(match &self.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                Arc::new(JsonlStore::open(dir).map_err(|e| anyhow::anyhow!("{e}"))?)
            }
            None => Arc::new(MemoryStore::new()),
        })
    }

    fn engine(&self) -> anyhow::Result<PlannerEngine> {
        let settings = self.content_settings()?;
        Ok(PlannerEngine::new(
            Gateway::new(self.backend()?),
            self.policies(),
            ContentPipeline::new(self.registry(&settings)?, settings),
            self.store()?,
        )
        .with_config(self.engine_config()))
    }
}

/// Reads a bare script list, or the `script` field of a transcript or persona.
fn load_script(path: &Path) -> anyhow::Result<Script> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{} is not JSON: {e}", path.display())))?;
    let list = match value {
        serde_json::Value::Array(list) => list,
        serde_json::Value::Object(mut obj) => match obj.remove("script") {
            Some(serde_json::Value::Array(list)) => list,
            _ => return Err(usage(format!("{} has no script list", path.display()))),
        },
        _ => return Err(usage(format!("{} is not a script", path.display()))),
    };
    Script::from_values(list).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn serve(config: &Config) -> anyhow::Result<ExitCode> {
    let engine = Arc::new(config.engine()?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        println!("listening on http://{}", listener.local_addr()?);
        let app = convplan::service::router(engine, config.auth_token.clone());
        convplan::service::serve(listener, app).await?;
        Ok(ExitCode::SUCCESS)
    })
}

fn replay_file(config: &Config, file: &Path) -> anyhow::Result<ExitCode> {
    let transcript = Transcript::load(file).map_err(|e| usage(e.to_string()))?;
    let outcome = replay_with(&transcript, &config.policies(), config.content_settings()?);
    print!("{}", outcome.report.render());
    Ok(if outcome.report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn simulate(config: &Config, args: &SimulateArgs) -> anyhow::Result<ExitCode> {
    let mut personas = match &args.persona_dir {
        Some(dir) => Persona::load_dir(dir).map_err(|e| usage(e.to_string()))?,
        None => Vec::new(),
    };
    personas.extend(sim::random_personas(args.seed, args.random, args.max_turns));
    if personas.is_empty() {
        return Err(usage("no personas: give a persona directory or --random N"));
    }
    let settings = config.content_settings()?;
    let backend = match (config.backend, &config.script) {
        (BackendChoice::Scripted, None) => None,
        _ => Some(config.backend()?),
    };
    if backend.is_some() {
        // an explicit backend replaces per-persona scripts
        for p in &mut personas {
            p.script = None;
        }
    }
    let episode = EpisodeConfig {
        policies: config.policies(),
        content: settings,
        registry: config.registry(&settings)?,
        engine: config.engine_config(),
        backend,
        store: None,
    };
    let (reports, summary) = sim::run_sweep(&personas, &episode).map_err(|e| usage(e.to_string()))?;
    for r in &reports {
        let actions: Vec<String> = r.actions.iter().map(|a| a.to_string()).collect();
        println!(
            "{}: {} turns, actions [{}], plan sizes {:?}, {} failed, {} violations",
            r.persona,
            r.turns.len(),
            actions.join(", "),
            r.plan_sizes,
            r.failed_turns,
            r.violations.len()
        );
        for v in &r.violations {
            println!("  turn {} {:?}: {}", v.turn, v.check, v.detail);
        }
    }
    println!(
        "episodes {} turns {} failed {} ask-question {} violations {} in {:.0} ms",
        summary.episodes,
        summary.turns,
        summary.failed_turns,
        summary.ask_question_turns,
        summary.violations,
        summary.wall_time_ms
    );
    if let Some(out) = &args.out {
        sim::write_reports(out, &reports, &summary).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(if summary.violations == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Serve => serve(&cli.config),
        Command::Chat { goal } => {
            if cli.config.backend == BackendChoice::Scripted && cli.config.script.is_none() {
                bail!(Usage("chat needs --script or a non-scripted backend".into()));
            }
            let engine = cli.config.engine()?;
            let stdin = std::io::stdin();
            chat::run(&engine, goal.clone(), &mut stdin.lock(), &mut std::io::stdout())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { file } => replay_file(&cli.config, file),
        Command::Simulate(args) => simulate(&cli.config, args),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("CONVPLAN_LOG").unwrap_or_else(|_| EnvFilter::new("error")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
