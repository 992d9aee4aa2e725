use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use hypoprobe::agents::llm::LlmClient;
use hypoprobe::agents::mock::ScriptedLlm;
use hypoprobe::backend::ActivationBackend;
use hypoprobe::pipeline::{self, Mode, RunConfig, RunOptions, RunSummary, EXIT_OK};
use hypoprobe::stub::{StubServer, StubServices};
use hypoprobe::{demo, report, Error, FeatureRef, ToyBackend, ToyWorld};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "hypoprobe", version, about = "Explain and score sparse-autoencoder features with LLM agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate explanations for every configured feature.
    Explain(RunArgs),
    /// Score existing explanations and write the summary table.
    Evaluate(RunArgs),
    /// Explain, then evaluate.
    Run(RunArgs),
    /// Run live and record every remote response into cassettes.
    Record(CassetteArgs),
    /// Run from recorded cassettes without network access.
    Replay(CassetteArgs),
    /// Aggregate a results directory into the per-layer table.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "hypoprobe")]
        method: String,
        /// Print the aggregated rows as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Draw a reproducible random set of latent indices.
    SampleFeatures {
        #[arg(long)]
        d_sae: usize,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy-lm")]
        model: String,
        #[arg(long, default_value = "toy-sae")]
        sae: String,
        /// May be repeated; the same indices are used on every layer.
        #[arg(long = "layer", default_values_t = [0u32])]
        layers: Vec<u32>,
    },
    /// Write the offline demo world, agent script and config into a directory.
    Demo { dir: PathBuf },
    /// Serve a toy world (and optionally a scripted chat model) over HTTP.
    Serve {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 8077)]
        port: u16,
        /// Env var holding the bearer token clients must send.
        #[arg(long)]
        bearer_env: Option<String>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    cassette_dir: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    n_initial: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_turns: Option<u32>,
    #[arg(long)]
    n_sentences: Option<usize>,
    #[arg(long)]
    per_stratum: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Discard earlier per-feature results instead of resuming.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct CassetteArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Cassette directory; defaults to the config's cassette_dir.
    #[arg(long)]
    cassettes: Option<PathBuf>,
    /// Record or replay only the explanation stage.
    #[arg(long)]
    explain_only: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?}; expected live, replay or mock"))
}

impl RunArgs {
    fn load(&self) -> hypoprobe::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = &self.cassette_dir {
            cfg.cassette_dir = Some(v.clone());
        }
        if let Some(v) = &self.method {
            cfg.method = v.clone();
        }
        if let Some(v) = self.n_initial {
            cfg.loop_cfg.n_initial = v;
        }
        if let Some(v) = self.top_k {
            cfg.loop_cfg.top_k = v;
        }
        if let Some(v) = self.max_turns {
            cfg.loop_cfg.max_turns = v;
        }
        if let Some(v) = self.n_sentences {
            cfg.eval.n_sentences = v;
        }
        if let Some(v) = self.per_stratum {
            cfg.eval.per_stratum = v;
        }
        if let Some(v) = self.eval_seed {
            cfg.eval.seed = v;
        }
        Ok(cfg)
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> hypoprobe::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_summary(s: &RunSummary) -> hypoprobe::Result<()> {
    let mut text = String::new();
    for r in &s.results {
        let line = serde_json::json!({
            "feature": r.feature.to_string(),
            "dir": r.dir,
            "status": r.status,
            "gen_accuracy": r.gen_accuracy,
            "pred_accuracy": r.pred_accuracy,
            "protocol_errors": r.protocol_errors.len(),
            "error": r.error,
            "exit_code": r.exit_code,
        });
        text.push_str(&format!("{line}\n"));
    }
    if let Some(t) = &s.table {
        text.push('\n');
        text.push_str(t);
    }
    emit(&text)
}

fn run_stage(cfg: RunConfig, opts: RunOptions) -> hypoprobe::Result<i32> {
    let summary = pipeline::run(&cfg, &opts)?;
    print_summary(&summary)?;
    Ok(summary.exit_code())
}

fn stages(cmd: &Command, force: bool) -> RunOptions {
    let (explain, evaluate) = match cmd {
        Command::Explain(_) => (true, false),
        Command::Evaluate(_) => (false, true),
        Command::Record(a) | Command::Replay(a) if a.explain_only => (true, false),
        _ => (true, true),
    };
    RunOptions {
        explain,
        evaluate,
        force,
        halt_after_turn: None,
    }
}

fn cassette_config(a: &CassetteArgs, mode: Mode) -> hypoprobe::Result<RunConfig> {
    let mut cfg = a.run.load()?;
    cfg.mode = mode;
    if let Some(dir) = &a.cassettes {
        cfg.cassette_dir = Some(dir.clone());
    }
    if cfg.cassette_dir.is_none() {
        return Err(Error::Config("--cassettes or cassette_dir is required".into()));
    }
    Ok(cfg)
}

fn sample(
    d_sae: usize,
    count: usize,
    seed: u64,
    model: &str,
    sae: &str,
    layers: &[u32],
) -> hypoprobe::Result<i32> {
    let idx = pipeline::sample_features(d_sae, count, seed)?;
    let features: Vec<FeatureRef> = layers
        .iter()
        .flat_map(|l| idx.iter().map(move |i| FeatureRef::new(model, sae, *l, *i)))
        .collect();
    emit(&format!("{}\n", serde_json::to_string_pretty(&features)?))?;
    Ok(EXIT_OK)
}

fn serve(world: &Path, script: Option<&Path>, port: u16, bearer_env: Option<&str>) -> hypoprobe::Result<i32> {
    let backend: Arc<dyn ActivationBackend> = Arc::new(ToyBackend::new(ToyWorld::load(world)?)?);
    let llm = script
        .map(|p| ScriptedLlm::load(p).map(|l| Arc::new(l) as Arc<dyn LlmClient>))
        .transpose()?;
    let bearer = bearer_env
        .map(|name| {
            std::env::var(name).map_err(|_| Error::Config(format!("env var {name} is not set")))
        })
        .transpose()?;
    let server = StubServer::start(
        StubServices {
            backend: Some(backend),
            llm,
            bearer,
        },
        port,
    )?;
    eprintln!("serving on {}", server.base_url());
    server.wait();
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> hypoprobe::Result<i32> {
    let opts = stages(&cli.command, false);
    match cli.command {
        Command::Explain(a) | Command::Evaluate(a) | Command::Run(a) => {
            let force = a.force;
            run_stage(a.load()?, RunOptions { force, ..opts })
        }
        Command::Record(a) => {
            let force = a.run.force;
            run_stage(cassette_config(&a, Mode::Live)?, RunOptions { force, ..opts })
        }
        Command::Replay(a) => {
            let force = a.run.force;
            run_stage(cassette_config(&a, Mode::Replay)?, RunOptions { force, ..opts })
        }
        Command::Report { dir, method, json } => {
            let rep = report::report(&dir, &method)?;
            if json {
                emit(&format!("{}\n", serde_json::to_string_pretty(&rep)?))?;
            } else {
                emit(&rep.render_table())?;
            }
            Ok(EXIT_OK)
        }
        Command::SampleFeatures {
            d_sae,
            count,
            seed,
            model,
            sae,
            layers,
        } => sample(d_sae, count, seed, &model, &sae, &layers),
        Command::Demo { dir } => {
            let files = demo::write(&dir)?;
            emit(&format!("{}\n", files.config.display()))?;
            Ok(EXIT_OK)
        }
        Command::Serve {
            world,
            script,
            port,
            bearer_env,
        } => serve(&world, script.as_deref(), port, bearer_env.as_deref()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("HYPOPROBE_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            pipeline::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
