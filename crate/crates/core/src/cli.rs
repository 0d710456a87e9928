//! Command-line surface. Each subcommand is a plain function returning the
//! text it would print, so the binary stays a thin dispatcher.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::alloc::{
    build_plan, uniform_budgets_unchecked, validate_plan, AllocParams, AllocationPlan, Strategy,
    PLAN_FORMAT,
};
use crate::cache::{build_cache_set, CacheSet, MemoryReport, DEFAULT_SINKS};
use crate::config::ModelConfig;
use crate::error::{Error, Result, Violation};
use crate::io::{
    config_hash, decode_tokens, encode_text, load_json, load_model, model_checksum, save_json,
    save_model, unix_now, Corpus, FileRecord, RunManifest, MANIFEST_FORMAT,
};
use crate::model::{init_model, Model};
use crate::profile::{
    profile_model_with, rank_correlation, ImportanceProfile, ProfileOptions, MIN_PROMPT_LEN,
    PROFILE_FORMAT,
};
use crate::search::{
    chunk_losses, cross_grid, default_grid, heatmap_text, heuristic_vs_empirical, layer_sweep,
    parameter_search, SearchConfig, SearchReport, SweepReport, DEFAULT_WINDOW, SEARCH_FORMAT,
    SWEEP_FORMAT,
};

pub const EVAL_FORMAT: &str = "bklv-eval-1";
pub const CONSISTENCY_FORMAT: &str = "bklv-consistency-1";
pub const THREADS_ENV: &str = "BKLV_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bklv", version, about = "Budgeted per-head KV-cache allocation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded toy model to a weight file.
    InitModel(InitModelArgs),
    /// Profile head, KV-group and layer importance.
    Profile(ProfileArgs),
    /// Build a per-cache budget plan.
    Plan(PlanArgs),
    /// Grid-search (t, r) by chunked perplexity.
    Search(SearchArgs),
    /// Perplexity and memory for a plan.
    Eval(EvalArgs),
    /// Sliding-window layer sweep.
    Sweep(SweepArgs),
    /// Greedy generation under a plan.
    Generate(GenerateArgs),
    /// Rank agreement of head similarities between two prompts.
    Consistency(ConsistencyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub q_heads: usize,
    #[arg(long, default_value_t = 4)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 512)]
    pub max_context: usize,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_theta: f64,
}

impl InitModelArgs {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            num_q_heads: self.q_heads,
            num_kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            d_model: self.q_heads * self.head_dim,
            d_ff: self.d_ff,
            max_context: self.max_context,
            rope_theta: self.rope_theta,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt text file; repeat for several prompts.
    #[arg(long = "prompt", required = true)]
    pub prompts: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep per-token similarity matrices for heatmaps.
    #[arg(long)]
    pub heatmap: bool,
    #[arg(long, default_value_t = MIN_PROMPT_LEN)]
    pub min_prompt_len: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AllocArgs {
    /// Similarity threshold for the head stage.
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Fractional reduction for the head stage.
    #[arg(long, default_value_t = 0.0)]
    pub r: f64,
    #[arg(long, default_value_t = 0.5)]
    pub layer_t: f64,
    #[arg(long, default_value_t = 0.0)]
    pub layer_r: f64,
    #[arg(long, default_value_t = DEFAULT_SINKS)]
    pub sinks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value = "baklava")]
    pub strategy: String,
    #[arg(long)]
    pub compression: f64,
    #[command(flatten)]
    pub alloc: AllocArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long = "corpus", required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub compression: f64,
    /// Defaults to the model's max_context.
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Comma-separated similarity thresholds.
    #[arg(long)]
    pub t_grid: Option<String>,
    /// Comma-separated reductions.
    #[arg(long)]
    pub r_grid: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub layer_t: f64,
    #[arg(long, default_value_t = 0.0)]
    pub layer_r: f64,
    #[arg(long, default_value_t = DEFAULT_SINKS)]
    pub sinks: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a plain-text heatmap here.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "corpus", required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_element: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "corpus", required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long)]
    pub compression: f64,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SINKS)]
    pub sinks: usize,
    /// Correlate the sweep with this profile's layer importance.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to full budgets.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_SINKS)]
    pub sinks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Exactly two prompt files.
    #[arg(long = "prompt", required = true)]
    pub prompts: Vec<PathBuf>,
    #[arg(long, default_value_t = MIN_PROMPT_LEN)]
    pub min_prompt_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub strategy: Strategy,
    pub compression: f64,
    pub achieved_compression: f64,
    pub tokens_per_chunk: usize,
    pub chunk_losses: Vec<f64>,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub format: String,
    pub prompt_ids: Vec<String>,
    pub per_layer_spearman: Vec<f64>,
}

/// Result of a subcommand: text for stdout.
#[derive(Debug, Clone, Default)]
pub struct Output {
    pub stdout: String,
}

impl Output {
    fn line(&mut self, s: impl AsRef<str>) {
        self.stdout.push_str(s.as_ref());
        self.stdout.push('\n');
    }
}

pub fn run(command: &Command) -> Result<Output> {
    match command {
        Command::InitModel(a) => cmd_init_model(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Search(a) => cmd_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Consistency(a) => cmd_consistency(a),
    }
}

/// Worker cap from `BKLV_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

fn write_manifest(
    command: &str,
    model: Option<&Model>,
    inputs: &[&Path],
    outputs: &[&Path],
    started: u64,
) -> Result<()> {
    let Some(primary) = outputs.first() else {
        return Ok(());
    };
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        command: command.to_string(),
        config_hash: model.map(|m| config_hash(m.config())),
        model_checksum: model.map(model_checksum),
        inputs: inputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
        started_unix: started,
        finished_unix: unix_now(),
    };
    save_json(&manifest, &RunManifest::path_for(primary))
}

fn read_prompts(paths: &[PathBuf]) -> Result<Vec<Vec<u32>>> {
    paths
        .iter()
        .map(|p| Ok(encode_text(&fs::read(p)?)))
        .collect()
}

pub fn cmd_init_model(a: &InitModelArgs) -> Result<Output> {
    let started = unix_now();
    let model = init_model(&a.config())?;
    save_model(&model, &a.out)?;
    write_manifest("init-model", Some(&model), &[], &[&a.out], started)?;
    let mut out = Output::default();
    out.line(format!("wrote {} ({})", a.out.display(), model_checksum(&model)));
    Ok(out)
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<Output> {
    let started = unix_now();
    let model = load_model(&a.model)?;
    let prompts = read_prompts(&a.prompts)?;
    let opts = ProfileOptions {
        min_prompt_len: a.min_prompt_len,
        keep_token_heatmaps: a.heatmap,
    };
    let profile = profile_model_with(&model, &prompts, &opts)?;
    save_json(&profile, &a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.model];
    inputs.extend(a.prompts.iter().map(PathBuf::as_path));
    write_manifest("profile", Some(&model), &inputs, &[&a.out], started)?;

    let mut out = Output::default();
    for (l, row) in profile.kv_importance.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        out.line(format!(
            "layer {l}: kv importance [{}]  layer importance {:.4}",
            cells.join(", "),
            profile.layer_importance[l]
        ));
    }
    Ok(out)
}

pub fn cmd_plan(a: &PlanArgs) -> Result<Output> {
    let started = unix_now();
    let model = load_model(&a.model)?;
    let config = model.config();
    let strategy: Strategy = a.strategy.parse()?;
    let profile: Option<ImportanceProfile> = a
        .profile
        .as_deref()
        .map(|p| load_json(p, PROFILE_FORMAT))
        .transpose()?;
    let params = AllocParams {
        t: a.alloc.t,
        r: a.alloc.r,
        layer_t: a.alloc.layer_t,
        layer_r: a.alloc.layer_r,
    };
    let plan = match build_plan(profile.as_ref(), config, strategy, a.compression, params, a.alloc.sinks) {
        Ok(p) => p,
        Err(Error::Allocation(msg)) => {
            // Report the starved caches of the underlying uniform split.
            let raw = AllocationPlan {
                format: PLAN_FORMAT.to_string(),
                strategy,
                compression: a.compression,
                achieved_compression: 0.0,
                sinks: a.alloc.sinks,
                max_context: config.max_context,
                params,
                budgets: uniform_budgets_unchecked(config, a.compression.clamp(0.0, 1.0)),
            };
            return Err(match validate_plan(&raw, config) {
                Err(v) => Error::Validation(v),
                Ok(()) => Error::Allocation(msg),
            });
        }
        Err(e) => return Err(e),
    };
    validate_plan(&plan, config).map_err(Error::Validation)?;
    save_json(&plan, &a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.model];
    if let Some(p) = &a.profile {
        inputs.push(p);
    }
    write_manifest("plan", Some(&model), &inputs, &[&a.out], started)?;
    let mut out = Output::default();
    out.line(format!(
        "{} plan: requested compression {}, achieved {:.6}, {} tokens",
        plan.strategy,
        plan.compression,
        plan.achieved_compression,
        plan.total_budget()
    ));
    Ok(out)
}

fn parse_list(s: &str, name: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("{name}: `{x}` is not a number ({e})")))
        })
        .collect()
}

fn load_corpus(paths: &[PathBuf]) -> Result<Corpus> {
    Corpus::from_files(paths)
}

pub fn cmd_search(a: &SearchArgs) -> Result<Output> {
    let started = unix_now();
    let model = load_model(&a.model)?;
    let profile: ImportanceProfile = load_json(&a.profile, PROFILE_FORMAT)?;
    let corpus = load_corpus(&a.corpus)?;
    let grid = match (&a.t_grid, &a.r_grid) {
        (None, None) => default_grid(),
        (t, r) => {
            let default = default_grid();
            let ts = match t {
                Some(s) => parse_list(s, "t-grid")?,
                None => dedup(default.iter().map(|p| p.0)),
            };
            let rs = match r {
                Some(s) => parse_list(s, "r-grid")?,
                None => dedup(default.iter().map(|p| p.1)),
            };
            cross_grid(&ts, &rs)
        }
    };
    let cfg = SearchConfig {
        context_len: a.context_len.unwrap_or(model.config().max_context),
        compression: a.compression,
        grid,
        layer_t: a.layer_t,
        layer_r: a.layer_r,
        sinks: a.sinks,
        threads: thread_cap(),
    };
    let report = parameter_search(&model, &profile, &corpus.token_ids, &cfg)?;
    save_json(&report, &a.out)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(h) = &a.heatmap {
        crate::io::write_atomic(h, heatmap_text(&report).as_bytes())?;
        outputs.push(h);
    }
    let mut inputs: Vec<&Path> = vec![&a.model, &a.profile];
    inputs.extend(a.corpus.iter().map(PathBuf::as_path));
    write_manifest("search", Some(&model), &inputs, &outputs, started)?;

    let mut out = Output::default();
    match (report.best, report.best_loss) {
        (Some((t, r)), Some(l)) => out.line(format!(
            "best t={t} r={r} loss={l:.6} perplexity={:.4}",
            l.exp()
        )),
        _ => out.line("no feasible configuration"),
    }
    Ok(out)
}

fn dedup(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Chunked perplexity and memory accounting for a plan.
pub fn evaluate_plan(
    model: &Model,
    corpus: &[u32],
    context_len: usize,
    plan: &AllocationPlan,
    bytes_per_element: usize,
) -> Result<EvalReport> {
    let memory = MemoryReport::for_plan(plan, model.config(), bytes_per_element)?;
    let mut caches = build_cache_set(plan, model.config())?;
    let losses = chunk_losses(model, corpus, context_len, &mut caches)?;
    let mean_nll = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(EvalReport {
        format: EVAL_FORMAT.to_string(),
        strategy: plan.strategy,
        compression: plan.compression,
        achieved_compression: plan.achieved_compression,
        tokens_per_chunk: context_len,
        chunk_losses: losses,
        mean_nll,
        perplexity: mean_nll.exp(),
        memory,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Output> {
    let started = unix_now();
    let model = load_model(&a.model)?;
    let plan: AllocationPlan = load_json(&a.plan, PLAN_FORMAT)?;
    if plan.max_context != model.config().max_context {
        return Err(Error::Config(format!(
            "plan built for max_context {}, model has {}",
            plan.max_context,
            model.config().max_context
        )));
    }
    let corpus = load_corpus(&a.corpus)?;
    let context_len = a.context_len.unwrap_or(model.config().max_context);
    let report = evaluate_plan(&model, &corpus.token_ids, context_len, &plan, a.bytes_per_element)?;
    if let Some(o) = &a.out {
        save_json(&report, o)?;
        let mut inputs: Vec<&Path> = vec![&a.model, &a.plan];
        inputs.extend(a.corpus.iter().map(PathBuf::as_path));
        write_manifest("eval", Some(&model), &inputs, &[o], started)?;
    }
    let mut out = Output::default();
    out.line(format!("perplexity {:.6}", report.perplexity));
    out.line(format!("mean nll {:.9}", report.mean_nll));
    out.line(format!("kv bytes {}", report.memory.total_bytes));
    out.line(format!(
        "compression requested {} achieved {:.6}",
        report.compression, report.memory.achieved_compression
    ));
    Ok(out)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Output> {
    let started = unix_now();
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let context_len = a.context_len.unwrap_or(model.config().max_context);
    let mut report: SweepReport = layer_sweep(
        &model,
        &corpus.token_ids,
        context_len,
        a.window,
        a.compression,
        a.sinks,
        thread_cap(),
    )?;
    if let Some(p) = &a.profile {
        let profile: ImportanceProfile = load_json(p, PROFILE_FORMAT)?;
        report.correlation = Some(heuristic_vs_empirical(&profile, &report)?);
    }
    save_json(&report, &a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.model];
    inputs.extend(a.corpus.iter().map(PathBuf::as_path));
    if let Some(p) = &a.profile {
        inputs.push(p);
    }
    write_manifest("sweep", Some(&model), &inputs, &[&a.out], started)?;
    let mut out = Output::default();
    for (l, (s, (lo, hi))) in report.scores.iter().zip(&report.windows).enumerate() {
        out.line(format!("layer {l} window [{lo},{hi}] perplexity {s:.6}"));
    }
    if let Some(c) = &report.correlation {
        out.line(format!(
            "spearman full {:.4}{} trimmed {:.4}{}",
            c.full,
            if c.full_degenerate { " (degenerate)" } else { "" },
            c.trimmed,
            if c.trimmed_degenerate { " (degenerate)" } else { "" }
        ));
    }
    Ok(out)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    let mut caches = match &a.plan {
        Some(p) => {
            let plan: AllocationPlan = load_json(p, PLAN_FORMAT)?;
            build_cache_set(&plan, model.config())?
        }
        None => CacheSet::full(model.config(), a.sinks)?,
    };
    let prompt = encode_text(a.prompt.as_bytes());
    let tokens = model.greedy_generate(&prompt, a.steps, &mut caches)?;
    let mem = caches.memory_report(2);
    let mut out = Output::default();
    out.line(decode_tokens(&tokens));
    out.line(format!(
        "steps {} kv bytes {} achieved compression {:.6}",
        tokens.len(),
        mem.total_bytes,
        mem.achieved_compression
    ));
    Ok(out)
}

pub fn cmd_consistency(a: &ConsistencyArgs) -> Result<Output> {
    if a.prompts.len() != 2 {
        return Err(Error::Input(format!(
            "consistency compares exactly 2 prompts, got {}",
            a.prompts.len()
        )));
    }
    let model = load_model(&a.model)?;
    let prompts = read_prompts(&a.prompts)?;
    let opts = ProfileOptions {
        min_prompt_len: a.min_prompt_len,
        keep_token_heatmaps: false,
    };
    let pa = profile_model_with(&model, &prompts[..1], &opts)?;
    let pb = profile_model_with(&model, &prompts[1..2], &opts)?;
    let report = ConsistencyReport {
        format: CONSISTENCY_FORMAT.to_string(),
        prompt_ids: vec![pa.prompt_ids[0].clone(), pb.prompt_ids[0].clone()],
        per_layer_spearman: rank_correlation(&pa, &pb)?,
    };
    if let Some(o) = &a.out {
        save_json(&report, o)?;
    }
    let mut out = Output::default();
    for (l, r) in report.per_layer_spearman.iter().enumerate() {
        out.line(format!("layer {l} spearman {r:.4}"));
    }
    Ok(out)
}

/// Machine-readable violation list for stderr.
pub fn violations_json(v: &[Violation]) -> String {
    serde_json::to_string(v).expect("violations serialize")
}

pub fn load_search_report(path: &Path) -> Result<SearchReport> {
    load_json(path, SEARCH_FORMAT)
}

pub fn load_sweep_report(path: &Path) -> Result<SweepReport> {
    load_json(path, SWEEP_FORMAT)
}
