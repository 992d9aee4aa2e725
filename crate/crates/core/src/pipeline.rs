//! Config-driven runs over many features: explain, evaluate, persist and
//! summarize.
//!
//! Each feature writes only inside its own result directory
//! (see [`report::feature_dir`]), so features can run on separate workers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::llm::LlmClient;
use crate::agents::mock::ScriptedLlm;
use crate::agents::openai::OpenAiClient;
use crate::agents::{AgentSet, ExplanationStatus, FinalExplanation, PromptLog, PromptRecord};
use crate::backend::{exemplar_max, ActivationBackend, RemoteBackend, ToyBackend, ToyWorld};
use crate::engine::ledger::{append_jsonl, read_jsonl, write_jsonl};
use crate::engine::{run_feature_resumable, LoopConfig, RunState};
use crate::error::{Error, Result};
use crate::eval::{generative_accuracy, predictive_accuracy, sample_held_out, DEFAULT_N_SENTENCES};
use crate::hypothesis::EvidenceRecord;
use crate::profile::FeatureRef;
use crate::report::{
    self, feature_dir, EXPLANATION_FILE, FEATURE_FILE, GENEVAL_FILE, LEDGER_FILE, PREDEVAL_FILE,
    PROMPTS_FILE, STATE_FILE,
};
use crate::transport::{Cassette, CassetteTransport, LiveTransport, Transport};

pub const EVAL_PROMPTS_FILE: &str = "eval_prompts.jsonl";
pub const SUMMARY_FILE: &str = "summary.md";
pub const BACKEND_CASSETTE: &str = "backend.jsonl";
pub const LLM_CASSETTE: &str = "llm.jsonl";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Io(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Protocol(_) => EXIT_PROTOCOL,
        Error::Transport { .. }
        | Error::NotFound(_)
        | Error::InsufficientData(_)
        | Error::Evaluation(_) => EXIT_BACKEND,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Real network traffic; with `cassette_dir` set, every response is recorded.
    Live,
    /// Served from cassettes only.
    Replay,
    /// Scripted chat model, toy backend, no network.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Toy {
        world: PathBuf,
    },
    Remote {
        base_url: String,
        /// Name of the env var holding the bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LlmConfig {
    Mock {
        script: PathBuf,
    },
    Openai {
        base_url: String,
        model: String,
        /// Literal key, usually written as `"${OPENAI_API_KEY}"`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_sentences: usize,
    pub per_stratum: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_sentences: DEFAULT_N_SENTENCES,
            per_stratum: 5,
            seed: 0,
        }
    }
}

/// Roles whose chat model can be overridden under `roles`.
pub const ROLES: [&str; 5] = ["explainer", "designer", "analyzer", "reviewer", "evaluator"];

fn default_parallelism() -> usize {
    1
}

fn default_method() -> String {
    "hypoprobe".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub features: Vec<FeatureRef>,
    #[serde(rename = "loop", default)]
    pub loop_cfg: LoopConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub backend: BackendConfig,
    pub llm: LlmConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub roles: BTreeMap<String, LlmConfig>,
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_dir: Option<PathBuf>,
    /// Label for the method column of the summary table.
    #[serde(default = "default_method")]
    pub method: String,
}

/// Replaces `${NAME}` in every string with the value of env var `NAME`.
pub fn interpolate_env(value: &mut Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    match value {
        Value::String(s) => {
            let mut out = String::with_capacity(s.len());
            let mut rest = s.as_str();
            while let Some(start) = rest.find("${") {
                out.push_str(&rest[..start]);
                let after = &rest[start + 2..];
                let end = after
                    .find('}')
                    .ok_or_else(|| Error::Config(format!("unterminated ${{ in {s:?}")))?;
                let name = &after[..end];
                let v = lookup(name)
                    .ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
                out.push_str(&v);
                rest = &after[end + 1..];
            }
            out.push_str(rest);
            *s = out;
        }
        Value::Array(items) => {
            for v in items {
                interpolate_env(v, lookup)?;
            }
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                interpolate_env(v, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        interpolate_env(&mut value, &|name| std::env::var(name).ok())?;
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        if let Some(d) = &mut self.cassette_dir {
            resolve(base, d);
        }
        if let BackendConfig::Toy { world } = &mut self.backend {
            resolve(base, world);
        }
        for llm in std::iter::once(&mut self.llm).chain(self.roles.values_mut()) {
            if let LlmConfig::Mock { script } = llm {
                resolve(base, script);
            }
        }
    }

    fn llm_configs(&self) -> impl Iterator<Item = (&str, &LlmConfig)> {
        std::iter::once(("default", &self.llm)).chain(self.roles.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.features.is_empty() {
            return cfg_err("no features configured".into());
        }
        let mut dirs = BTreeSet::new();
        for f in &self.features {
            if !dirs.insert(feature_dir(&self.output_dir, f)) {
                return cfg_err(format!("feature {f} is listed twice"));
            }
        }
        if self.parallelism == 0 {
            return cfg_err("parallelism must be >= 1".into());
        }
        if self.eval.n_sentences == 0 || self.eval.per_stratum == 0 {
            return cfg_err("eval.n_sentences and eval.per_stratum must be >= 1".into());
        }
        self.loop_cfg.validate()?;
        for role in self.roles.keys() {
            if !ROLES.contains(&role.as_str()) {
                return cfg_err(format!("unknown role {role:?}; expected one of {ROLES:?}"));
            }
        }
        for (role, llm) in self.llm_configs() {
            if let LlmConfig::Mock { script } = llm {
                if !script.is_file() {
                    return cfg_err(format!("{role} mock script {} does not exist", script.display()));
                }
            }
        }
        if let BackendConfig::Toy { world } = &self.backend {
            if !world.is_file() {
                return cfg_err(format!("toy world {} does not exist", world.display()));
            }
        }
        match self.mode {
            Mode::Mock => {
                if self.llm_configs().any(|(_, l)| !matches!(l, LlmConfig::Mock { .. })) {
                    return cfg_err("mock mode requires every llm to be a mock script".into());
                }
                if !matches!(self.backend, BackendConfig::Toy { .. }) {
                    return cfg_err("mock mode runs offline: use the toy backend, or replay mode".into());
                }
            }
            Mode::Replay => {
                let dir = self
                    .cassette_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("replay mode requires cassette_dir".into()))?;
                for name in self.cassette_names() {
                    if !dir.join(&name).is_file() {
                        return cfg_err(format!("replay mode: cassette {} does not exist", dir.join(name).display()));
                    }
                }
            }
            Mode::Live => {}
        }
        Ok(())
    }

    /// Cassette files this config reads or writes.
    pub fn cassette_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if matches!(self.backend, BackendConfig::Remote { .. }) {
            names.push(BACKEND_CASSETTE.to_string());
        }
        for (role, llm) in self.llm_configs() {
            if matches!(llm, LlmConfig::Openai { .. }) {
                names.push(llm_cassette(role));
            }
        }
        names
    }
}

fn llm_cassette(role: &str) -> String {
    if role == "default" {
        LLM_CASSETTE.to_string()
    } else {
        format!("llm-{role}.jsonl")
    }
}

/// Live backend and chat clients, plus the role assignment.
#[derive(Clone)]
pub struct Services {
    pub backend: Arc<dyn ActivationBackend>,
    pub explainer: Arc<dyn LlmClient>,
    pub designer: Arc<dyn LlmClient>,
    pub analyzer: Arc<dyn LlmClient>,
    pub reviewer: Arc<dyn LlmClient>,
    pub evaluator: Arc<dyn LlmClient>,
}

impl Services {
    /// Every role shares one client.
    pub fn shared(backend: Arc<dyn ActivationBackend>, llm: Arc<dyn LlmClient>) -> Self {
        Self {
            backend,
            explainer: llm.clone(),
            designer: llm.clone(),
            analyzer: llm.clone(),
            reviewer: llm.clone(),
            evaluator: llm,
        }
    }

    /// A fresh agent set with its own prompt log.
    pub fn agents(&self) -> AgentSet {
        AgentSet {
            explainer: self.explainer.clone(),
            designer: self.designer.clone(),
            analyzer: self.analyzer.clone(),
            reviewer: self.reviewer.clone(),
            log: Arc::new(PromptLog::default()),
        }
    }

    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let transport = |base_url: &str, bearer: Option<String>, cassette: &str| -> Result<Arc<dyn Transport>> {
            let open = || -> Result<Cassette> {
                let dir = cfg
                    .cassette_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("replay mode requires cassette_dir".into()))?;
                Cassette::open(dir.join(cassette))
            };
            Ok(match (cfg.mode, &cfg.cassette_dir) {
                (Mode::Replay, _) => Arc::new(CassetteTransport::replay(open()?)),
                (_, Some(_)) => Arc::new(CassetteTransport::record(
                    Arc::new(LiveTransport::new(base_url, bearer)?),
                    open()?,
                )),
                (_, None) => Arc::new(LiveTransport::new(base_url, bearer)?),
            })
        };
        let env_key = |var: &Option<String>| -> Result<Option<String>> {
            match var {
                None => Ok(None),
                // Replay never talks to the network, so the key is optional.
                Some(v) if cfg.mode == Mode::Replay => Ok(std::env::var(v).ok()),
                Some(v) => std::env::var(v)
                    .map(Some)
                    .map_err(|_| Error::Config(format!("environment variable {v} is not set"))),
            }
        };
        let backend: Arc<dyn ActivationBackend> = match &cfg.backend {
            BackendConfig::Toy { world } => Arc::new(ToyBackend::new(
                ToyWorld::load(world).map_err(|e| Error::Config(format!("{}: {e}", world.display())))?,
            )?),
            BackendConfig::Remote { base_url, api_key_env } => Arc::new(RemoteBackend::new(transport(
                base_url,
                env_key(api_key_env)?,
                BACKEND_CASSETTE,
            )?)),
        };
        let make_llm = |role: &str, l: &LlmConfig| -> Result<Arc<dyn LlmClient>> {
            Ok(match l {
                LlmConfig::Mock { script } => Arc::new(
                    ScriptedLlm::load(script).map_err(|e| Error::Config(format!("{}: {e}", script.display())))?,
                ),
                LlmConfig::Openai {
                    base_url,
                    model,
                    api_key,
                    api_key_env,
                } => {
                    let key = match api_key {
                        Some(k) => Some(k.clone()),
                        None => env_key(api_key_env)?,
                    };
                    Arc::new(OpenAiClient::new(transport(base_url, key, &llm_cassette(role))?, model.clone()))
                }
            })
        };
        let default = make_llm("default", &cfg.llm)?;
        let role = |name: &str| -> Result<Arc<dyn LlmClient>> {
            match cfg.roles.get(name) {
                Some(l) => make_llm(name, l),
                None => Ok(default.clone()),
            }
        };
        Ok(Self {
            backend,
            explainer: role("explainer")?,
            designer: role("designer")?,
            analyzer: role("analyzer")?,
            reviewer: role("reviewer")?,
            evaluator: role("evaluator")?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub explain: bool,
    pub evaluate: bool,
    /// Discard earlier results for each feature instead of resuming.
    pub force: bool,
    /// Stop each feature with an error right after this turn is checkpointed.
    /// Used to exercise resumption.
    pub halt_after_turn: Option<u32>,
}

impl RunOptions {
    pub fn full() -> Self {
        Self {
            explain: true,
            evaluate: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureResult {
    pub feature: FeatureRef,
    pub dir: PathBuf,
    pub status: Option<ExplanationStatus>,
    pub summary: Option<String>,
    pub gen_accuracy: Option<f64>,
    pub pred_accuracy: Option<f64>,
    /// Agent replies that stayed malformed after the reprompt.
    pub protocol_errors: Vec<String>,
    pub error: Option<String>,
    pub exit_code: i32,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub results: Vec<FeatureResult>,
    pub table: Option<String>,
}

impl RunSummary {
    /// 2 beats 3 beats 4 when features fail differently.
    pub fn exit_code(&self) -> i32 {
        let codes: BTreeSet<i32> = self.results.iter().map(|r| r.exit_code).filter(|c| *c != 0).collect();
        codes.into_iter().next().unwrap_or(EXIT_OK)
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_prompts(path: &Path, prior: &[PromptRecord], log: &PromptLog) -> Result<()> {
    let mut all: Vec<PromptRecord> = prior.to_vec();
    all.extend(log.sorted());
    all.sort_by(|a, b| (&a.ctx, a.attempt).cmp(&(&b.ctx, b.attempt)));
    let mut text = String::new();
    for r in &all {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Explains one feature, resuming from `state.json` when present. Returns
/// the explanation and any protocol errors recorded along the way.
pub fn explain_feature(
    cfg: &RunConfig,
    services: &Services,
    feature: &FeatureRef,
    opts: &RunOptions,
) -> Result<(FinalExplanation, Vec<String>)> {
    let dir = feature_dir(&cfg.output_dir, feature);
    if opts.force && dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join(FEATURE_FILE), feature)?;
    let state_path = dir.join(STATE_FILE);
    let ledger_path = dir.join(LEDGER_FILE);
    let prompts_path = dir.join(PROMPTS_FILE);
    let expl_path = dir.join(EXPLANATION_FILE);

    let saved: Option<RunState> = if state_path.exists() { Some(read_json(&state_path)?) } else { None };
    if let Some(state) = &saved {
        if state.finished && expl_path.exists() {
            tracing::info!(%feature, "explanation already complete; reusing");
            return Ok((read_json(&expl_path)?, state.protocol_errors.clone()));
        }
    }
    let (resume, prior_prompts) = match saved {
        Some(state) => {
            let mut ledger = read_jsonl(&ledger_path)?;
            ledger.truncate(state.ledger_len);
            // Drop records appended after the last saved state.
            write_jsonl(&ledger_path, ledger.records())?;
            tracing::info!(%feature, turn = state.turn, records = ledger.len(), "resuming");
            (Some((state, ledger)), read_prompts(&prompts_path)?)
        }
        None => {
            for f in [&ledger_path, &prompts_path, &expl_path] {
                if f.exists() {
                    std::fs::remove_file(f)?;
                }
            }
            (None, vec![])
        }
    };

    let agents = services.agents();
    let log = agents.log.clone();
    let halt = opts.halt_after_turn;
    let mut checkpoint = |state: &RunState, new: &[EvidenceRecord]| -> Result<()> {
        append_jsonl(&ledger_path, new)?;
        write_json(&state_path, state)?;
        write_prompts(&prompts_path, &prior_prompts, &log)?;
        if halt.is_some_and(|t| state.turn >= t && !new.is_empty()) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::Interrupted,
                format!("halted after turn {}", state.turn),
            )));
        }
        Ok(())
    };
    let outcome = run_feature_resumable(
        feature,
        &cfg.loop_cfg,
        &agents,
        services.backend.as_ref(),
        resume,
        &mut checkpoint,
    )?;
    write_json(&expl_path, &outcome.explanation)?;
    Ok((outcome.explanation, outcome.state.protocol_errors))
}

/// Scores a stored explanation. Writes `geneval.json` and `predeval.json`
/// for whichever metrics succeed and returns the first error, if any.
pub fn evaluate_feature(
    cfg: &RunConfig,
    services: &Services,
    feature: &FeatureRef,
) -> Result<(Option<f64>, Option<f64>)> {
    let dir = feature_dir(&cfg.output_dir, feature);
    let expl_path = dir.join(EXPLANATION_FILE);
    if !expl_path.exists() {
        return Err(Error::Config(format!("{feature}: no {EXPLANATION_FILE}; run explain first")));
    }
    let expl: FinalExplanation = read_json(&expl_path)?;
    for f in [GENEVAL_FILE, PREDEVAL_FILE] {
        let p = dir.join(f);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    if expl.status == ExplanationStatus::Unresolved {
        tracing::warn!(%feature, "no accepted hypothesis; skipping evaluation");
        return Ok((None, None));
    }
    let backend = services.backend.as_ref();
    let llm = services.evaluator.as_ref();
    let log = PromptLog::default();
    let exemplars = backend.fetch_top_exemplars(feature, cfg.loop_cfg.top_k)?;
    let emax = exemplar_max(&exemplars);

    let gen = generative_accuracy(&expl.summary, feature, emax, cfg.eval.n_sentences, llm, backend, Some(&log))
        .and_then(|r| {
            write_json(&dir.join(GENEVAL_FILE), &r)?;
            Ok(r.accuracy)
        });
    let pred = sample_held_out(backend, feature, &exemplars, cfg.eval.per_stratum, cfg.eval.seed)
        .and_then(|held| predictive_accuracy(&expl.summary, held, emax, llm, Some(&log)))
        .and_then(|r| {
            write_json(&dir.join(PREDEVAL_FILE), &r)?;
            Ok(r.mean_rho)
        });
    write_prompts(&dir.join(EVAL_PROMPTS_FILE), &[], &log)?;
    match (gen, pred) {
        (Ok(g), Ok(p)) => Ok((Some(g), p)),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

fn process_feature(cfg: &RunConfig, services: &Services, feature: &FeatureRef, opts: &RunOptions) -> FeatureResult {
    let mut r = FeatureResult {
        feature: feature.clone(),
        dir: feature_dir(&cfg.output_dir, feature),
        status: None,
        summary: None,
        gen_accuracy: None,
        pred_accuracy: None,
        protocol_errors: vec![],
        error: None,
        exit_code: EXIT_OK,
    };
    let fail = |r: &mut FeatureResult, e: Error| {
        tracing::error!(%feature, error = %e, "feature failed");
        r.exit_code = exit_code(&e);
        r.error = Some(e.to_string());
    };
    if opts.explain {
        match explain_feature(cfg, services, feature, opts) {
            Ok((expl, errs)) => {
                r.status = Some(expl.status);
                r.summary = Some(expl.summary);
                if !errs.is_empty() {
                    r.exit_code = EXIT_PROTOCOL;
                }
                r.protocol_errors = errs;
            }
            Err(e) => {
                fail(&mut r, e);
                return r;
            }
        }
    }
    if opts.evaluate {
        match evaluate_feature(cfg, services, feature) {
            Ok((g, p)) => {
                r.gen_accuracy = g;
                r.pred_accuracy = p;
            }
            Err(e) => fail(&mut r, e),
        }
    }
    r
}

/// Fails fast when a live remote backend cannot be reached.
fn preflight(cfg: &RunConfig, services: &Services) -> Result<()> {
    if cfg.mode != Mode::Live || !matches!(cfg.backend, BackendConfig::Remote { .. }) {
        return Ok(());
    }
    match services.backend.dashboard(&cfg.features[0]) {
        Err(e @ Error::Transport { .. }) => Err(Error::transport(
            format!("activation backend unreachable: {e}"),
            false,
        )),
        _ => Ok(()),
    }
}

/// Runs the configured stages over every feature on a bounded worker pool.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let services = Services::build(cfg)?;
    run_with(cfg, &services, opts)
}

pub fn run_with(cfg: &RunConfig, services: &Services, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    preflight(cfg, services)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, FeatureResult)>> = Mutex::new(Vec::new());
    let workers = cfg.parallelism.min(cfg.features.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(f) = cfg.features.get(i) else { break };
                let r = process_feature(cfg, services, f, opts);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let results: Vec<FeatureResult> = results.into_iter().map(|(_, r)| r).collect();
    let table = if opts.evaluate {
        match report::report(&cfg.output_dir, &cfg.method) {
            Ok(rep) => {
                let t = rep.render_table();
                write_atomic(&cfg.output_dir.join(SUMMARY_FILE), t.as_bytes())?;
                Some(t)
            }
            Err(e) => {
                tracing::warn!(error = %e, "no summary table");
                None
            }
        }
    } else {
        None
    };
    Ok(RunSummary { results, table })
}

/// `count` distinct latent indices below `d_sae`, reproducible from `seed`,
/// in ascending order.
pub fn sample_features(d_sae: usize, count: usize, seed: u64) -> Result<Vec<u32>> {
    if count == 0 || count > d_sae {
        return Err(Error::input(format!("cannot sample {count} of {d_sae} latents")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<u32> = rand::seq::index::sample(&mut rng, d_sae, count)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    idx.sort_unstable();
    Ok(idx)
}
