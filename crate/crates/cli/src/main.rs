//! txlens: explain Ethereum transactions from chain-native data.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use txlens_core::harness::{emit_report, EvalReport, ReportFormat};
use txlens_core::pipeline::{run_pipeline, PipelineConfig};
use txlens_core::synth::{BackendChoice, CmdTransport, HttpTransport};
use txlens_core::{
    build_flow_graph, classify_flows, group_macro_actions, load_corpus, load_fixture,
    score_explanation, CardStore, EndpointConfig, EvidenceBoard, HttpCache, ProfileConfig,
    SelectorDb, TransactionBundle, TxHash, Verdict,
};

#[derive(Parser)]
#[command(
    name = "txlens",
    version,
    about = "Grounded explanations of Ethereum transactions from chain-native data"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Run the full pipeline and print the audited explanation
    Explain(ExplainArgs),
    /// Emit the flow graph, macro-actions, and net balances of a fixture
    Decode(DecodeArgs),
    /// Run the profiler over a fixture and print the hypothesis
    Profile(ProfileArgs),
    /// Evaluate the pipeline against a gold-annotated corpus directory
    Eval(EvalArgs),
    /// Fetch a transaction from a node and write it as a fixture
    Fetch(FetchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Template,
    External,
}

#[derive(Args)]
struct SharedArgs {
    /// Directory of knowledge-card JSON files; defaults to a `cards`
    /// directory next to the input
    #[arg(long)]
    cards: Option<PathBuf>,
    /// Refuse all network I/O
    #[arg(long)]
    offline: bool,
    /// Node RPC endpoint (or TXLENS_RPC_URL)
    #[arg(long)]
    rpc_url: Option<String>,
    /// Explorer API base URL (or TXLENS_EXPLORER_URL)
    #[arg(long)]
    explorer_url: Option<String>,
    /// Response cache directory for explorer lookups
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Clear the response cache before running
    #[arg(long)]
    refresh: bool,
}

#[derive(Args)]
struct BackendArgs {
    /// Draft backend
    #[arg(long, value_enum, default_value = "template")]
    backend: BackendKind,
    /// External backend subprocess (request on stdin, response on stdout)
    #[arg(long)]
    backend_cmd: Option<PathBuf>,
    /// External backend HTTP endpoint (one POST per request)
    #[arg(long)]
    backend_url: Option<String>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Fixture path or 0x-prefixed transaction hash
    input: String,
    #[command(flatten)]
    backend: BackendArgs,
    /// Maximum audit passes before giving up as unresolved
    #[arg(long, default_value_t = 3)]
    max_refine: u32,
    #[arg(long, value_enum, default_value = "text")]
    format: OutputFormat,
    /// Write the full evidence board to a JSON file
    #[arg(long)]
    dump_board: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct DecodeArgs {
    fixture: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: OutputFormat,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct ProfileArgs {
    fixture: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: OutputFormat,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory of <name>.fixture.json / <name>.gold.json pairs
    dir: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 3)]
    max_refine: u32,
    #[arg(long, value_enum, default_value = "text")]
    format: OutputFormat,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct FetchArgs {
    /// 0x-prefixed transaction hash
    hash: String,
    /// Write the fixture here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
}

fn endpoint_config(shared: &SharedArgs) -> EndpointConfig {
    let mut cfg = EndpointConfig::from_env();
    if let Some(url) = &shared.rpc_url {
        cfg.rpc_url = Some(url.clone());
    }
    if let Some(url) = &shared.explorer_url {
        cfg.explorer_api_url = Some(url.clone());
    }
    cfg.offline = shared.offline;
    cfg
}

/// Card store resolution: explicit flag first, then a `cards` directory
/// sitting next to the input.
fn card_store(shared: &SharedArgs, input_dir: Option<&Path>) -> Result<CardStore> {
    if let Some(dir) = &shared.cards {
        return CardStore::load_dir(dir).with_context(|| format!("loading cards from {dir:?}"));
    }
    if let Some(dir) = input_dir {
        let candidate = dir.join("cards");
        if candidate.is_dir() {
            return CardStore::load_dir(&candidate)
                .with_context(|| format!("loading cards from {candidate:?}"));
        }
    }
    Ok(CardStore::new())
}

fn cache(shared: &SharedArgs) -> Result<Option<HttpCache>> {
    let Some(dir) = &shared.cache else {
        return Ok(None);
    };
    if shared.refresh && dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_file() {
                std::fs::remove_file(path)?;
            }
        }
    }
    Ok(Some(HttpCache::new(dir.clone())?))
}

fn backend_choice(args: &BackendArgs) -> Result<BackendChoice> {
    match args.backend {
        BackendKind::Template => Ok(BackendChoice::Template),
        BackendKind::External => {
            if let Some(cmd) = &args.backend_cmd {
                Ok(BackendChoice::External(Arc::new(CmdTransport::new(
                    cmd.clone(),
                ))))
            } else if let Some(url) = &args.backend_url {
                Ok(BackendChoice::External(Arc::new(HttpTransport::new(
                    url.clone(),
                ))))
            } else {
                bail!("--backend external requires --backend-cmd or --backend-url")
            }
        }
    }
}

fn load_input(
    input: &str,
    endpoint: &EndpointConfig,
) -> Result<(TransactionBundle, Option<PathBuf>)> {
    let looks_like_hash =
        input.starts_with("0x") && input.len() == 66 && !Path::new(input).exists();
    if looks_like_hash {
        let hash = TxHash::parse(input).map_err(|e| anyhow!("{e}"))?;
        let bundle = txlens_core::fetch_transaction(endpoint, &hash)?;
        Ok((bundle, None))
    } else {
        let path = PathBuf::from(input);
        let bundle = load_fixture(&path)?;
        let parent = path.parent().map(Path::to_path_buf);
        Ok((bundle, parent))
    }
}

fn pipeline_config(
    shared: &SharedArgs,
    backend: &BackendArgs,
    max_refine: u32,
    input_dir: Option<&Path>,
) -> Result<PipelineConfig> {
    Ok(PipelineConfig {
        backend: backend_choice(backend)?,
        max_refine,
        profile: ProfileConfig::default(),
        selector_db: SelectorDb::builtin(),
        card_store: card_store(shared, input_dir)?,
        endpoint: endpoint_config(shared),
        cache: cache(shared)?,
    })
}

fn cmd_explain(args: ExplainArgs) -> Result<ExitCode> {
    let endpoint = endpoint_config(&args.shared);
    let (bundle, input_dir) = load_input(&args.input, &endpoint)?;
    let cfg = pipeline_config(
        &args.shared,
        &args.backend,
        args.max_refine,
        input_dir.as_deref(),
    )?;
    let out = run_pipeline(bundle, &cfg)?;

    if let Some(path) = &args.dump_board {
        std::fs::write(path, out.board.to_json()?)
            .with_context(|| format!("writing board to {path:?}"))?;
    }

    match args.format {
        OutputFormat::Json => println!("{}", output::explain_json(&out)?),
        OutputFormat::Text => print!("{}", output::explain_text(&out)),
    }
    Ok(match out.report.verdict {
        Verdict::Pass => ExitCode::SUCCESS,
        _ => ExitCode::from(2),
    })
}

fn cmd_decode(args: DecodeArgs) -> Result<ExitCode> {
    let bundle = load_fixture(&args.fixture)?;
    let store = card_store(&args.shared, args.fixture.parent())?;
    let classification = classify_flows(&bundle, &store, &ProfileConfig::default());
    let graph = build_flow_graph(&bundle);
    let macros = group_macro_actions(&bundle, &graph, &classification);
    match args.format {
        OutputFormat::Json => println!("{}", output::decode_json(&bundle, &graph, &macros)?),
        OutputFormat::Text => print!("{}", output::decode_text(&bundle, &graph, &macros)),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(args: ProfileArgs) -> Result<ExitCode> {
    let bundle = load_fixture(&args.fixture)?;
    let store = card_store(&args.shared, args.fixture.parent())?;
    let db = SelectorDb::builtin();
    let mut board = EvidenceBoard::new(bundle)?;
    let outcome = txlens_core::profile(&mut board, &db, &store, &ProfileConfig::default());
    match args.format {
        OutputFormat::Json => {
            println!("{}", serde_json::to_string_pretty(&outcome.hypothesis)?)
        }
        OutputFormat::Text => print!("{}", output::hypothesis_text(&outcome.hypothesis)),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let pairs = load_corpus(&args.dir)?;
    for pair in &pairs {
        eprintln!("loaded {}: {} flows", pair.name, pair.bundle.transfers.len());
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let cfg = pipeline_config(
            &args.shared,
            &args.backend,
            args.max_refine,
            Some(&args.dir),
        )?;
        let out = run_pipeline(pair.bundle.clone(), &cfg)?;
        rows.push(score_explanation(&out, pair)?);
    }
    let report = EvalReport::from_rows(rows);
    let format = match args.format {
        OutputFormat::Json => ReportFormat::Json,
        OutputFormat::Text => ReportFormat::Text,
    };
    let rendered = emit_report(&report, format);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &rendered).with_context(|| format!("writing {path:?}"))?;
            eprintln!("report written to {}", path.display());
        }
        None => {
            println!("{rendered}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fetch(args: FetchArgs) -> Result<ExitCode> {
    let endpoint = endpoint_config(&args.shared);
    let hash = TxHash::parse(&args.hash).map_err(|e| anyhow!("{e}"))?;
    let bundle = txlens_core::fetch_transaction(&endpoint, &hash)?;
    let rendered = serde_json::to_string_pretty(&bundle)?;
    match &args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => println!("{rendered}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::Explain(args) => cmd_explain(args),
        Commands::Decode(args) => cmd_decode(args),
        Commands::Profile(args) => cmd_profile(args),
        Commands::Eval(args) => cmd_eval(args),
        Commands::Fetch(args) => cmd_fetch(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
