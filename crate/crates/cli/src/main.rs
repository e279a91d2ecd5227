//! `scm`: chat, summarize, eval and serve entry points.
//!
//! Every option resolves as flag, then environment variable, then default.
//! The effective configuration is echoed to stderr at startup so stdout stays
//! clean for transcripts and reports. Exit codes: 0 ok, 1 usage, 2 runtime.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scm_core::controller::Rendering;
use scm_core::embedding::DEFAULT_HASH_DIMENSION;
use scm_core::evalharness::{bundled_suite, load_probes, offline_engine, run_eval};
use scm_core::store::SessionStore;
use scm_core::summarizer::{write_outputs, SummarizeConfig, Summarizer};
use scm_core::{Ablation, Engine, EngineConfig, Session, TurnTrace};
use scm_service::engine::{build_engine, BackendSpec, EmbedderSpec};
use scm_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "scm", version, about = "Self-controlled memory engine for conversational agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Converse over stdin, one observation per line.
    Chat(ChatArgs),
    /// Summarize a long document into a tree of summaries.
    Summarize(SummarizeArgs),
    /// Replay a probe suite and report accuracy and retrieval recall.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct EngineArgs {
    /// `scripted`, `script:<file.json>` or `remote:<model>`.
    #[arg(long, env = "SCM_BACKEND", default_value = "scripted")]
    backend: BackendSpec,
    /// `hash`, `hash:<dimension>` or `remote:<model>`.
    #[arg(long, env = "SCM_EMBEDDER", default_value = "hash")]
    embedder: EmbedderSpec,
    /// Directory of prompt templates replacing the built-in English pack.
    #[arg(long, env = "SCM_PROMPTS")]
    prompts: Option<PathBuf>,
}

impl EngineArgs {
    fn build(&self) -> Result<Engine> {
        Ok(build_engine(&self.backend, &self.embedder, self.prompts.as_deref())?)
    }

    fn describe(&self) -> String {
        let prompts = self.prompts.as_ref().map_or("builtin".into(), |p| p.display().to_string());
        format!("backend={} embedder={} prompts={prompts}", self.backend, self.embedder)
    }
}

#[derive(Args)]
struct ChatArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Persist the conversation under this id, resuming it if it exists.
    #[arg(long, env = "SCM_SESSION")]
    session: Option<String>,
    #[arg(long, env = "SCM_DATA_DIR", default_value = scm_service::DEFAULT_DATA_DIR)]
    data_dir: PathBuf,
    /// Memories retrieved per turn.
    #[arg(long, env = "SCM_K", default_value_t = 5)]
    k: usize,
    #[arg(long, env = "SCM_ABLATION", default_value = "none")]
    ablation: Ablation,
    /// Print activated memories and controller decisions after each response.
    #[arg(long)]
    show_trace: bool,
}

#[derive(Args)]
struct SummarizeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, env = "SCM_BLOCK_BUDGET", default_value_t = SummarizeConfig::default().block_token_budget)]
    block_budget: usize,
    #[arg(long, env = "SCM_FANOUT", default_value_t = SummarizeConfig::default().merge_fanout)]
    fanout: usize,
    /// Output directory for tree.jsonl, final_summary.txt and side_by_side.md.
    #[arg(long, default_value = "summary-out")]
    out: PathBuf,
    /// Checkpoint directory; a rerun resumes from completed nodes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Probe suite as JSONL; the bundled suite when omitted.
    #[arg(long, env = "SCM_PROBES")]
    probes: Option<PathBuf>,
    #[arg(long, env = "SCM_ABLATION", default_value = "none")]
    ablation: Ablation,
    /// Write the full JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write each case's probe-turn trace into this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// `replay` answers from each case's own script; anything else is a
    /// backend spec shared by all cases.
    #[arg(long, env = "SCM_EVAL_BACKEND", default_value = "replay")]
    backend: String,
    #[arg(long, env = "SCM_EMBEDDER", default_value = "hash")]
    embedder: EmbedderSpec,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, env = scm_service::BIND_ADDR_ENV, default_value = scm_service::DEFAULT_BIND_ADDR)]
    bind: std::net::SocketAddr,
    #[arg(long, env = scm_service::DATA_DIR_ENV, default_value = scm_service::DEFAULT_DATA_DIR)]
    data_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Chat(args) => chat(args),
        Command::Summarize(args) => summarize(args),
        Command::Eval(args) => eval(args),
        Command::Serve(args) => serve(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn chat(args: ChatArgs) -> Result<()> {
    let engine = args.engine.build()?;
    let mut config = EngineConfig { ablation: args.ablation, ..EngineConfig::default() };
    config.retrieval.k = args.k;

    let mut session = match &args.session {
        None => Session::new("ephemeral", config, &engine)?,
        Some(id) => {
            let store = SessionStore::new(args.data_dir.join("sessions"));
            if store.exists(id) {
                let (meta, session) = store.open(id)?;
                if meta.config != config {
                    eprintln!("note: session {id} keeps the configuration it was created with");
                }
                session
            } else {
                store.create(id, config, &engine)?.1
            }
        }
    };
    let config = session.config;
    eprintln!(
        "scm chat: {} session={} data_dir={} k={} ablation={} turn={}",
        args.engine.describe(),
        args.session.as_deref().unwrap_or("(ephemeral)"),
        args.data_dir.display(),
        config.retrieval.k,
        config.ablation.as_str(),
        session.current_turn(),
    );

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut failures = 0usize;
    for line in io::stdin().lock().lines() {
        let line = line.context("reading stdin")?;
        let observation = line.trim();
        if observation.is_empty() {
            continue;
        }
        match session.run_turn(&engine, observation) {
            Ok((response, trace)) => {
                writeln!(out, "user> {observation}")?;
                writeln!(out, "agent> {response}")?;
                if args.show_trace {
                    writeln!(out, "{}", trace_line(&trace))?;
                }
            }
            Err(e) => {
                failures += 1;
                eprintln!("turn failed: {e}");
            }
        }
        out.flush()?;
    }
    if failures > 0 {
        bail!("{failures} turn(s) failed");
    }
    Ok(())
}

/// Compact one-line view of the memory side of a turn.
fn trace_line(trace: &TurnTrace) -> String {
    let verdict = |v: bool| if v { "yes" } else { "no" };
    let activation = match &trace.activation_decision {
        None => "bypassed".to_string(),
        Some(d) if d.fallback_used => format!("{} (fallback)", verdict(d.verdict)),
        Some(d) => verdict(d.verdict).to_string(),
    };
    let list = |xs: Vec<String>| format!("[{}]", xs.join(","));
    let rendering = |r: Rendering| match r {
        Rendering::Full => "full",
        Rendering::Summary => "summary",
    };
    let activated = list(
        trace
            .rendered
            .iter()
            .map(|m| format!("{}:{}", m.item_index, rendering(m.rendering)))
            .collect(),
    );
    let summaries = list(
        trace
            .summary_decisions
            .iter()
            .map(|d| format!("{}:{}", d.item_index.map_or("?".into(), |i| i.to_string()), verdict(d.verdict)))
            .collect(),
    );
    let dropped = list(trace.dropped.iter().map(usize::to_string).collect());
    let flash = trace.flash.as_ref().map_or("-".into(), |f| f.item_index.to_string());
    format!(
        "  [turn {}] activate={activation} memories={activated} summary_decisions={summaries} dropped={dropped} flash={flash}",
        trace.turn
    )
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let engine = args.engine.build()?;
    let document = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let config = SummarizeConfig {
        block_token_budget: args.block_budget,
        merge_fanout: args.fanout,
        ..SummarizeConfig::default()
    };
    eprintln!(
        "scm summarize: {} input={} block_budget={} fanout={} memory_k={} out={} checkpoint={}",
        args.engine.describe(),
        args.input.display(),
        config.block_token_budget,
        config.merge_fanout,
        config.memory_k,
        args.out.display(),
        args.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string()),
    );
    let summarizer = Summarizer { engine: &engine, config, policy: EngineConfig::default().call_policy };
    let run = summarizer.hierarchical_summarize(&document, args.checkpoint.as_deref())?;
    write_outputs(&args.out, &document, &run.tree)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "levels={:?} resumed_nodes={}",
        run.tree.level_sizes(),
        run.resumed_nodes
    );
    println!("{}", run.tree.root().text.trim_end());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cases = match &args.probes {
        Some(path) => load_probes(path).with_context(|| format!("loading {}", path.display()))?,
        None => bundled_suite()?,
    };
    eprintln!(
        "scm eval: probes={} cases={} ablation={} backend={} embedder={}",
        args.probes.as_ref().map_or("bundled".into(), |p| p.display().to_string()),
        cases.len(),
        args.ablation.as_str(),
        args.backend,
        args.embedder,
    );
    let config = EngineConfig::default();
    let trace_dir = args.trace_dir.as_deref();
    let report = if args.backend == "replay" {
        if args.embedder != (EmbedderSpec::Hash { dimension: DEFAULT_HASH_DIMENSION }) {
            bail!("replay evaluation uses the default hash embedder");
        }
        run_eval(&cases, config, args.ablation, offline_engine, trace_dir)?
    } else {
        let backend: BackendSpec = args.backend.parse()?;
        let engine = build_engine(&backend, &args.embedder, None)?;
        run_eval(&cases, config, args.ablation, |_| engine.clone(), trace_dir)?
    };
    println!("ablation                 {}", report.ablation.as_str());
    println!("cases                    {}", report.cases);
    println!("answer_accuracy          {:.3}", report.answer_accuracy);
    println!("memory_retrieval_recall  {:.3}", report.memory_retrieval_recall);
    println!("single_turn_accuracy     {:.3}", report.single_turn_accuracy);
    println!("multi_turn_accuracy      {:.3}", report.multi_turn_accuracy);
    println!("failed_cases             {}", report.failed_cases);
    if let Some(path) = &args.report {
        write_report(&report, path)?;
    }
    Ok(())
}

fn write_report(report: &scm_core::evalharness::EvalReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    report.write(path).with_context(|| format!("writing {}", path.display()))
}

fn serve(args: ServeArgs) -> Result<()> {
    let engine = args.engine.build()?;
    eprintln!(
        "scm serve: {} bind={} data_dir={}",
        args.engine.describe(),
        args.bind,
        args.data_dir.display()
    );
    let config = ServiceConfig { data_dir: args.data_dir, bind_addr: args.bind };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(scm_service::serve(config, engine))?;
    Ok(())
}
