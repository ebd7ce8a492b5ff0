use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use tracevote_core::metrics::{
    auroc, confidence_histogram, corpus_consistency, corpus_miou, scored_traces,
    write_histogram_csv, ScoreKind, BINS_PER_DECADE,
};
use tracevote_core::orchestrator::{run_benchmark, Mode, RunConfig, RunReport, Weighting};
use tracevote_core::reliability::{DEFAULT_FALLBACK_K, DEFAULT_K_GRID};
use tracevote_core::synth::{generate_synthetic_dataset, NoiseProfile, TokenFormat};
use tracevote_core::{score_trace, select_k, StageEntropies};
use tracevote_harvest::{
    harvest_question, read_questions, DecodingParams, Endpoint, HarvestConfig,
};

use crate::io::{create, invalid, load_bundles, read_json, read_toml, write_json};

#[derive(Debug, Parser)]
#[command(name = "tracevote", version, about = "Reliability-filtered voting over multi-turn reasoning traces")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-trace stage reliabilities.
    Score(ScoreArgs),
    /// Filter and vote over every stored trace.
    RunOffline(RunArgs),
    /// Replay stored traces with early stopping.
    RunOnline(RunArgs),
    /// Box alignment, AUROC and confidence histogram for a run.
    Metrics(MetricsArgs),
    /// Write a seeded synthetic trace log.
    GenSynthetic(GenArgs),
    /// Collect traces from a live chat endpoint.
    Harvest(HarvestArgs),
}

#[derive(Debug, Args)]
pub struct Input {
    /// Trace log (JSONL).
    #[arg(long = "in", value_name = "TRACES")]
    pub input: PathBuf,
    /// Set aside truncated traces instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct KArgs {
    /// Fixed top-k instead of adaptive selection.
    #[arg(long, conflicts_with = "k_grid")]
    pub k: Option<usize>,
    /// Candidate k values for adaptive selection.
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub k: KArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: Input,
    /// Answer key (JSONL); overrides ground truth stored in the log.
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// TOML file with run settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[command(flatten)]
    pub k: KArgs,
    /// Every kept trace weighs 1.
    #[arg(long)]
    pub uniform: bool,
    /// Disable the per-token abort during online replay.
    #[arg(long)]
    pub no_abort: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoreChoice {
    #[value(name = "w_m")]
    WM,
    #[value(name = "w_r")]
    WR,
    #[value(name = "w_t")]
    WT,
    #[value(name = "C")]
    C,
}

impl From<ScoreChoice> for ScoreKind {
    fn from(s: ScoreChoice) -> Self {
        match s {
            ScoreChoice::WM => ScoreKind::WM,
            ScoreChoice::WR => ScoreKind::WR,
            ScoreChoice::WT => ScoreKind::WT,
            ScoreChoice::C => ScoreKind::C,
        }
    }
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Report from run-offline/run-online; an offline run with default
    /// settings is made when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub miou: bool,
    #[arg(long)]
    pub consistency: bool,
    #[arg(long)]
    pub auroc: bool,
    /// Score used for AUROC.
    #[arg(long, value_enum, default_value = "w_t")]
    pub score: ScoreChoice,
    /// Write the confidence-weight histogram as CSV.
    #[arg(long, value_name = "CSV")]
    pub conf_hist: Option<PathBuf>,
    #[arg(long, default_value_t = BINS_PER_DECADE)]
    pub bins_per_decade: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 500)]
    pub questions: usize,
    #[arg(long, default_value_t = 32)]
    pub traces: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// `default`, `uniform-wrong`, or a TOML file of profile fields.
    #[arg(long, default_value = "default")]
    pub profile: String,
    #[arg(long, value_enum)]
    pub token_format: Option<TokenFormatChoice>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    /// Latent-label sidecar; defaults to `<out>.latent.jsonl`.
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TokenFormatChoice {
    Entropy,
    TopProbs,
}

#[derive(Debug, Args)]
pub struct HarvestArgs {
    /// Chat-completions URL.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value = "default")]
    pub model: String,
    /// Directory that question image paths are relative to.
    #[arg(long)]
    pub images: PathBuf,
    /// Question file (JSONL).
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub traces: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Decoding preset.
    #[arg(long, default_value = "qwen3-vl-thinking")]
    pub preset: String,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<u32>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long, default_value_t = 8)]
    pub max_turns: usize,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Replaces the built-in system prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    pub api_key_env: String,
    /// Where crops are written; a temporary directory when omitted.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Score(a) => score(a),
        Command::RunOffline(a) => run_mode(a, Mode::Offline),
        Command::RunOnline(a) => run_mode(a, Mode::Online),
        Command::Metrics(a) => metrics(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Harvest(a) => harvest(a),
    }
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    question_id: &'a str,
    trace_id: &'a str,
    k: usize,
    w_m: Option<f64>,
    w_r: f64,
    w_t: f64,
    delta: f64,
    two_stage: bool,
    answer: Option<&'a str>,
}

fn score(a: ScoreArgs) -> Result<()> {
    if a.k.k == Some(0) || a.k.k_grid.as_ref().is_some_and(|g| g.contains(&0)) {
        return Err(invalid("k must be at least 1"));
    }
    let bundles = load_bundles(&a.input.input, None, a.input.lenient)?;
    let grid = a.k.k_grid.clone().unwrap_or_else(|| DEFAULT_K_GRID.to_vec());
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for b in &bundles {
        let stages = b
            .traces
            .iter()
            .map(|t| StageEntropies::from_segments(&t.segment()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("{}: {e}", b.question_id)))?;
        let k = a.k.k.unwrap_or_else(|| select_k(&stages, &grid, DEFAULT_FALLBACK_K));
        for (t, s) in b.traces.iter().zip(&stages) {
            let sc = score_trace(s, k)?;
            let line = ScoreLine {
                question_id: &b.question_id,
                trace_id: &t.trace_id,
                k,
                w_m: sc.w_m,
                w_r: sc.w_r,
                w_t: sc.w_t,
                delta: sc.delta,
                two_stage: sc.two_stage,
                answer: t.answer.as_deref(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn build_config(
    file: Option<&Path>,
    mode: Mode,
    overrides: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig> {
    let mut cfg: RunConfig = match file {
        Some(p) => read_toml(p)?,
        None => RunConfig::default(),
    };
    cfg.mode = mode;
    overrides(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run_config(a: &RunArgs, mode: Mode) -> Result<RunConfig> {
    if a.k.k == Some(0) || a.k.k_grid.as_ref().is_some_and(|g| g.contains(&0)) {
        return Err(invalid("k must be at least 1"));
    }
    build_config(a.config.as_deref(), mode, |c| {
        c.alpha = a.alpha.unwrap_or(c.alpha);
        c.tau = a.tau.unwrap_or(c.tau);
        c.beta = a.beta.unwrap_or(c.beta);
        c.budget = a.budget.unwrap_or(c.budget);
        if a.warmup.is_some() {
            c.warmup = a.warmup;
        }
        if a.k.k.is_some() {
            c.fixed_k = a.k.k;
        }
        if let Some(g) = &a.k.k_grid {
            c.k_grid = g.clone();
            c.fixed_k = None;
        }
        if a.uniform {
            c.weighting = Weighting::Uniform;
        }
        if a.no_abort {
            c.online_abort = false;
        }
    })
}

fn run_mode(a: RunArgs, mode: Mode) -> Result<()> {
    let cfg = run_config(&a, mode)?;
    let bundles = load_bundles(&a.input.input, a.key.as_deref(), a.input.lenient)?;
    let report = run_benchmark(&bundles, &cfg)?;
    for s in &report.skipped {
        log::warn!("skipped {}: {}", s.question_id, s.reason);
    }
    log::info!(
        "{} questions, accuracy {:?}, tsr {:?}",
        report.corpus.questions,
        report.corpus.accuracy,
        report.corpus.tsr
    );
    write_json(a.out.as_deref(), &report)
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let bundles = load_bundles(&a.input.input, a.key.as_deref(), a.input.lenient)?;
    let mut report: RunReport = match &a.report {
        Some(p) => read_json(p)?,
        None => {
            let cfg = build_config(a.config.as_deref(), Mode::Offline, |_| {})?;
            run_benchmark(&bundles, &cfg)?
        }
    };
    // grade against the key even when the report was produced without one
    let truth: BTreeMap<&str, Option<String>> = bundles
        .iter()
        .map(|b| (b.question_id.as_str(), b.normalized_truth()))
        .collect();
    for q in &mut report.per_question {
        if let Some(Some(gt)) = truth.get(q.question_id.as_str()) {
            q.ground_truth = Some(gt.clone());
        }
    }

    let everything = !(a.miou || a.consistency || a.auroc || a.conf_hist.is_some());
    let mut out = serde_json::Map::new();
    out.insert("questions".into(), json!(report.per_question.len()));
    if a.miou || everything {
        out.insert("miou".into(), json!(corpus_miou(&bundles, &report)));
    }
    if a.consistency || everything {
        out.insert("consistency".into(), json!(corpus_consistency(&bundles, &report)));
    }
    if a.auroc || everything {
        let kind = ScoreKind::from(a.score);
        let pairs = scored_traces(&report, kind);
        let (s, l): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        out.insert(
            "auroc".into(),
            json!({"score": kind, "value": auroc(&s, &l), "traces": s.len()}),
        );
    }
    if let Some(path) = &a.conf_hist {
        let rows = confidence_histogram(&scored_traces(&report, ScoreKind::C), a.bins_per_decade);
        let mut f = create(path)?;
        write_histogram_csv(&mut f, &rows)?;
        f.flush()?;
        out.insert("conf_hist".into(), json!({"path": path, "bins": rows.len()}));
    }
    write_json(a.out.as_deref(), &out)
}

fn load_profile(spec: &str) -> Result<NoiseProfile> {
    let profile = match NoiseProfile::by_name(spec) {
        Some(p) => p,
        None if Path::new(spec).exists() => read_toml(Path::new(spec))?,
        None => {
            return Err(invalid(format!(
                "unknown profile {spec:?} (expected default, uniform-wrong or a TOML file)"
            )))
        }
    };
    profile.validate().map_err(invalid)?;
    Ok(profile)
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let mut profile = load_profile(&a.profile)?;
    if let Some(f) = a.token_format {
        profile.token_format = match f {
            TokenFormatChoice::Entropy => TokenFormat::Entropy,
            TokenFormatChoice::TopProbs => TokenFormat::TopProbs,
        };
    }
    let data = generate_synthetic_dataset(a.questions, a.traces, &profile, a.seed).map_err(invalid)?;
    let latent = a.latent.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".latent.jsonl");
        PathBuf::from(p)
    });
    let (mut log, mut key, mut lat) = (create(&a.out)?, create(&a.key)?, create(&latent)?);
    data.write(&mut log, &mut key, &mut lat)?;
    for w in [&mut log, &mut key, &mut lat] {
        w.flush()?;
    }
    log::info!(
        "wrote {} questions x {} traces to {}",
        a.questions,
        a.traces,
        a.out.display()
    );
    Ok(())
}

fn harvest(a: HarvestArgs) -> Result<()> {
    let mut decoding = DecodingParams::preset(&a.preset).ok_or_else(|| {
        let names: Vec<&str> = DecodingParams::PRESETS.iter().map(|(n, _)| *n).collect();
        invalid(format!("unknown preset {:?}; one of {names:?}", a.preset))
    })?;
    decoding.temperature = a.temperature.unwrap_or(decoding.temperature);
    decoding.top_p = a.top_p.unwrap_or(decoding.top_p);
    decoding.top_k = a.top_k.unwrap_or(decoding.top_k);
    decoding.max_tokens = a.max_tokens.unwrap_or(decoding.max_tokens);
    if a.traces == 0 || a.max_turns == 0 {
        return Err(invalid("--traces and --max-turns must be at least 1"));
    }
    let system_prompt = match &a.prompt_file {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let questions = {
        let f = std::fs::File::open(&a.questions)
            .with_context(|| format!("cannot open {}", a.questions.display()))?;
        read_questions(std::io::BufReader::new(f)).map_err(|e| invalid(e.to_string()))?
    };
    let scratch;
    let work_dir = match &a.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            scratch = std::env::temp_dir().join(format!("tracevote-crops-{}", std::process::id()));
            std::fs::create_dir_all(&scratch)?;
            scratch
        }
    };
    let endpoint = Endpoint::new(&a.endpoint, &a.model, std::env::var(&a.api_key_env).ok());
    let config = HarvestConfig {
        traces: a.traces,
        max_turns: a.max_turns,
        concurrency: a.concurrency,
        decoding,
        system_prompt,
        work_dir,
    };
    let mut out = create(&a.out)?;
    for q in &questions {
        let h = harvest_question(&endpoint, q, &a.images, &config)
            .with_context(|| format!("question {}", q.question_id))?;
        for t in &h.bundle.traces {
            tracevote_core::trace::write_trace_line(&mut out, &h.bundle, t)?;
        }
        out.flush()?;
        log::info!(
            "{}: {} traces, {} excluded, {} retries",
            q.question_id,
            h.bundle.traces.len(),
            h.excluded.len(),
            h.retries
        );
    }
    Ok(())
}
