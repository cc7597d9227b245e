//! `mondrian`: count, abstract, evaluate and proxy prompts.
//!
//! JSON results go to stdout and logs to stderr. Exit status is 0 on
//! success, 1 on a usage error and 2 when the command itself fails.

mod config;

use std::io::{IsTerminal, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::RuntimeConfig;
use mondrian_core::engine::parse_ops;
use mondrian_core::eval::{
    ablation_sweep, load_corpus, parse_metrics, run_eval, Axis, ChatCompletions, Echo, EvalOptions, Metric,
    TemplateSpec, Upstream,
};
use mondrian_core::pricing::{margin_report, read_records, Ledger, Window};
use mondrian_core::similarity::ProviderKind;
use mondrian_core::{EditKind, Objective, SimilarityProviderSpec};
use mondrian_proxy::{ProxyState, RequestTemplate};
use serde::Serialize;
use tracing::info;

#[derive(Debug, Parser)]
#[command(name = "mondrian", version, about = "Shorten prompts while keeping their meaning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count the tokens of a text.
    Tokenize(TokenizeArgs),
    /// Abstract a prompt and print the result with its edit trace.
    Abstract(AbstractArgs),
    /// Compare upstream answers to original and abstracted prompts.
    Eval(EvalArgs),
    /// Sweep one abstraction setting and tabulate length and agreement.
    Ablate(AblateArgs),
    /// Run the abstracting chat-completions proxy.
    Serve(ServeArgs),
    /// Summarize the cost ledger.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON runtime config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rank file (tiktoken format).
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    /// WordNet dictionary directory.
    #[arg(long, global = true)]
    wordnet: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EngineFlags {
    /// Similarity threshold in [0, 1].
    #[arg(long, env = "MONDRIAN_ALPHA", value_parser = parse_alpha)]
    alpha: Option<f64>,
    /// What to minimize: token or char.
    #[arg(long, env = "MONDRIAN_OBJECTIVE", value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Comma-separated edit kinds: delete, transform, fragment, translate.
    #[arg(long, env = "MONDRIAN_OPS", value_parser = parse_op_list)]
    ops: Option<OpList>,
    /// Similarity provider.
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Embedding service root for the remote provider.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Debug, Clone)]
struct OpList(Vec<EditKind>);

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderArg {
    Local,
    Remote,
    Exact,
    AlwaysOne,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("{a} is outside [0, 1]"))
    }
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: mondrian_core::engine::ConfigError| e.to_string())
}

fn parse_op_list(s: &str) -> Result<OpList, String> {
    parse_ops(s).map(OpList).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[command(flatten)]
    common: Common,
    /// Also print the token ids.
    #[arg(long)]
    ids: bool,
    /// Text to count; read from stdin when omitted.
    text: Option<String>,
}

#[derive(Debug, Args)]
struct AbstractArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    /// Prompt to abstract; read from stdin when omitted.
    text: Option<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON-lines corpus of samples.
    #[arg(long)]
    corpus: PathBuf,
    /// Built-in template name.
    #[arg(long, default_value = "alpaca")]
    template: String,
    /// Custom template pattern with `{field}` slots; overrides --template.
    #[arg(long)]
    pattern: Option<String>,
    /// Comma-separated labels for a custom classification template.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// `echo`, or the root URL of a chat-completions server.
    #[arg(long)]
    upstream: Option<String>,
    /// Model name sent to a chat-completions upstream.
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    #[arg(long, default_value = "rouge,f1,acc")]
    metrics: String,
    /// Query the original prompt twice to bound agreement.
    #[arg(long)]
    upper_bound: bool,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    run: RunArgs,
    /// Write the full report here and print only the aggregates.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Ops,
    Alpha,
    Objective,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Write the table as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    /// Address to bind, e.g. 127.0.0.1:8080.
    #[arg(long)]
    listen: Option<String>,
    /// JSON-lines ledger file; in memory when not configured.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Forward prompts without abstracting them.
    #[arg(long)]
    no_abstraction: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Inclusive RFC 3339 start.
    #[arg(long)]
    from: Option<String>,
    /// Exclusive RFC 3339 end.
    #[arg(long)]
    to: Option<String>,
}

fn runtime_config(common: &Common, engine: Option<&EngineFlags>) -> Result<RuntimeConfig> {
    let mut config = match &common.config {
        Some(path) => RuntimeConfig::load(path)?,
        None => RuntimeConfig::default(),
    };
    // Flag paths are relative to the working directory, not the config file.
    if let Some(v) = &common.vocab {
        config.vocab = Some(std::path::absolute(v)?);
    }
    if let Some(w) = &common.wordnet {
        config.wordnet = Some(std::path::absolute(w)?);
    }
    if let Some(flags) = engine {
        let a = &mut config.abstraction;
        if let Some(alpha) = flags.alpha {
            a.alpha = alpha;
        }
        if let Some(objective) = flags.objective {
            a.objective = objective;
        }
        if let Some(OpList(ops)) = &flags.ops {
            a.enabled_ops = ops.clone();
        }
        if let Some(p) = flags.provider {
            a.provider = match p {
                ProviderArg::Local => SimilarityProviderSpec::of_kind(ProviderKind::LocalBagOfTokens),
                ProviderArg::Exact => SimilarityProviderSpec::of_kind(ProviderKind::ExactMatch),
                ProviderArg::AlwaysOne => SimilarityProviderSpec::of_kind(ProviderKind::AlwaysOne),
                ProviderArg::Remote => SimilarityProviderSpec {
                    endpoint: flags.endpoint.clone().or(a.provider.endpoint.clone()),
                    ..SimilarityProviderSpec::of_kind(ProviderKind::RemoteEmbedding)
                },
            };
        } else if let Some(endpoint) = &flags.endpoint {
            a.provider = SimilarityProviderSpec::remote(endpoint.clone());
        }
    }
    config.validate()?;
    Ok(config)
}

fn input_text(arg: Option<String>) -> Result<String> {
    if let Some(text) = arg {
        return Ok(text);
    }
    let mut stdin = std::io::stdin();
    if stdin.is_terminal() {
        bail!("no text given and stdin is a terminal");
    }
    let mut text = String::new();
    stdin.read_to_string(&mut text)?;
    Ok(text.strip_suffix('\n').unwrap_or(&text).to_string())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn tokenize(args: TokenizeArgs) -> Result<()> {
    let config = runtime_config(&args.common, None)?;
    let vocab = config.load_vocab()?;
    let text = input_text(args.text)?;
    let seq = vocab.encode(&text);
    if args.ids {
        print_json(&serde_json::json!({"tokens": seq.len(), "ids": seq.ids}))
    } else {
        print_json(&serde_json::json!({"tokens": seq.len()}))
    }
}

fn abstract_cmd(args: AbstractArgs) -> Result<()> {
    let config = runtime_config(&args.common, Some(&args.engine))?;
    let vocab = config.load_vocab()?;
    let engine = config.abstractor(vocab, false)?;
    let text = input_text(args.text)?;
    print_json(&engine.abstract_query(&text))
}

fn upstream_for(config: &RuntimeConfig, run: &RunArgs) -> Result<Box<dyn Upstream>> {
    let spec = config.upstream();
    let (url, template) = match run.upstream.as_deref() {
        Some("echo") => (String::new(), RequestTemplate::Echo),
        Some(url) => (url.to_string(), RequestTemplate::ChatCompletions),
        None => (spec.base_url.clone(), spec.request_template),
    };
    Ok(match template {
        RequestTemplate::Echo => Box::new(Echo),
        RequestTemplate::ChatCompletions => {
            let token = match &spec.auth_token_ref {
                Some(var) => Some(std::env::var(var).with_context(|| format!("environment variable {var}"))?),
                None => None,
            };
            Box::new(ChatCompletions::new(&url, &run.model, token, Duration::from_millis(spec.timeout_ms)))
        }
    })
}

fn template_for(run: &RunArgs) -> Result<TemplateSpec> {
    if let Some(pattern) = &run.pattern {
        let labels: Vec<&str> = run.labels.iter().map(String::as_str).collect();
        return Ok(TemplateSpec::new("custom", pattern, &labels));
    }
    TemplateSpec::builtin(&run.template).with_context(|| {
        format!(
            "unknown template {:?}; built-ins are {}",
            run.template,
            TemplateSpec::builtin_names().join(", ")
        )
    })
}

struct Prepared {
    corpus: Vec<mondrian_core::eval::EvalSample>,
    template: TemplateSpec,
    upstream: Box<dyn Upstream>,
    options: EvalOptions,
}

fn prepare(config: &RuntimeConfig, run: &RunArgs) -> Result<Prepared> {
    let mut corpus = load_corpus(&run.corpus)?;
    if let Some(n) = run.limit {
        corpus.truncate(n);
    }
    let metrics: Vec<Metric> = parse_metrics(&run.metrics)?;
    Ok(Prepared {
        corpus,
        template: template_for(run)?,
        upstream: upstream_for(config, run)?,
        options: EvalOptions {
            metrics,
            upper_bound: run.upper_bound,
        },
    })
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let config = runtime_config(&args.common, Some(&args.engine))?;
    let p = prepare(&config, &args.run)?;
    let engine = config.abstractor(config.load_vocab()?, false)?;
    let report = run_eval(&p.corpus, &p.template, &engine, p.upstream.as_ref(), &p.options)?;
    info!(samples = report.aggregates.samples, failed = report.aggregates.failed, "evaluation done");
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            print_json(&report.aggregates)
        }
        None => print_json(&report),
    }
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let config = runtime_config(&args.common, Some(&args.engine))?;
    let p = prepare(&config, &args.run)?;
    let axis = match args.axis {
        AxisArg::Ops => Axis::Ops,
        AxisArg::Alpha => Axis::Alpha,
        AxisArg::Objective => Axis::Objective,
    };
    let engine = config.abstractor(config.load_vocab()?, axis == Axis::Ops)?;
    let table = ablation_sweep(&p.corpus, &p.template, &engine, p.upstream.as_ref(), axis, &p.options)?;
    if let Some(path) = &args.csv {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        table.write_csv(file)?;
    }
    if let Some(path) = &args.out {
        write_json(path, &table)?;
    }
    print_json(&table)
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let mut config = runtime_config(&args.common, Some(&args.engine))?;
    if let Some(l) = args.ledger {
        config.ledger = Some(std::path::absolute(l)?);
    }
    let vocab = config.load_vocab()?;
    let engine = if args.no_abstraction {
        None
    } else {
        Some(config.abstractor(vocab.clone(), false)?)
    };
    let ledger = match config.ledger_path() {
        Some(path) => Ledger::open(path)?,
        None => Ledger::in_memory(),
    };
    let state = ProxyState::new(
        engine,
        vocab,
        config.pricing.user.clone(),
        config.pricing.upstream.clone(),
        config.upstream(),
        ledger,
    )?;
    let listen = args
        .listen
        .or(config.listen.clone())
        .unwrap_or_else(|| "127.0.0.1:8080".to_string());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        let addr = listener.local_addr()?;
        print_json(&serde_json::json!({"listening": addr.to_string()}))?;
        info!(%addr, "proxy listening");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        mondrian_proxy::serve(listener, state, shutdown).await?;
        Ok(())
    })
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let config = runtime_config(&args.common, None)?;
    let path = match args.ledger {
        Some(p) => p,
        None => config.ledger_path().context("no ledger given (--ledger or `ledger` in the config)")?,
    };
    let time = |s: Option<String>| -> Result<_> {
        s.map(|s| {
            chrono::DateTime::parse_from_rfc3339(&s)
                .map(|t| t.with_timezone(&chrono::Utc))
                .with_context(|| format!("bad timestamp {s:?}"))
        })
        .transpose()
    };
    let window = Window {
        from: time(args.from)?,
        to: time(args.to)?,
    };
    let records = read_records(&path)?;
    print_json(&margin_report(&records, window))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Tokenize(a) => tokenize(a),
        Command::Abstract(a) => abstract_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
