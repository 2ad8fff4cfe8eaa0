//! `causalx`: run the explain-then-recommend pipeline stage by stage.
//!
//! Every stage reads its inputs from and writes its outputs to the paths in
//! the config file, so stages can be re-run independently.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use causalx_core::corpus::{load_interactions, Format};
use causalx_core::explain::{generate_candidates, ExplanationStore, RawExplanation};
use causalx_core::model::{random_model_grad_check, CausalXModel};
use causalx_core::pipeline::{
    self, ablation, evaluate, format_variant_reports, prepare, rank_variant, read_jsonl,
    score_episodes, select_all, write_json, write_jsonl, PipelineConfig, PipelineError, Prepared, Variant,
};
use causalx_core::recommender::RankedResult;
use causalx_core::selector::what_if;
use causalx_core::synth;
use clap::{Parser, Subcommand};

use crate::config::{load_config, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "causalx", version, about = "Debiased explanation selection followed by LLM ranking")]
struct Cli {
    /// Pipeline config (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the deterministic offline chat model and embedder.
    #[arg(long, global = true)]
    mock_llm: bool,
    /// Also write per-user score matrices as CSV (select).
    #[arg(long, global = true)]
    dump_scores: bool,
    #[arg(long, global = true)]
    beta: Option<f32>,
    #[arg(long, global = true)]
    n_explanations: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize an interaction file into the configured data path.
    Ingest {
        input: PathBuf,
    },
    /// Generate a synthetic world into the configured data path.
    Synth,
    /// Ask the chat model for candidate explanations of training interactions.
    GenExplanations,
    /// Embed and cluster raw explanations into the candidate set.
    Cluster,
    /// Train the matching model on the augmented interactions.
    Train,
    /// Select explanations for every episode (or one user).
    Select {
        #[arg(long)]
        user: Option<String>,
    },
    /// Rank every episode's candidates with the selected explanations.
    Recommend,
    /// Compute metrics for the stored rankings.
    Evaluate,
    /// Compare full, non-debiased and random-explanation variants.
    Ablate,
    /// Rank one user's candidates with user-supplied explanations.
    WhatIf {
        #[arg(long)]
        user: String,
        #[arg(long = "explanation", required = true)]
        explanations: Vec<String>,
    },
    /// Finite-difference check of the model gradients on random small models.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        models: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(ConfigError::Missing(_)) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Pipeline(_) => "pipeline",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn pe<E: Into<PipelineError>>(e: E) -> CliError {
    CliError::Pipeline(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}

fn settings(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.mock_llm {
        cfg.mock_llm = true;
    }
    if let Some(b) = cli.beta {
        cfg.beta = b;
    }
    if let Some(n) = cli.n_explanations {
        cfg.n_explanations = n;
    }
    cfg.validate().map_err(pe)?;
    log::info!("config {} sha256 {}", path.display(), cfg.hash());
    log::info!("seeds {}", serde_json::to_string(&cfg.seeds()).unwrap_or_default());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::GradCheck { models } = cli.command {
        return grad_check(cli.seed.unwrap_or(0), models);
    }
    let cfg = settings(&cli)?;
    match &cli.command {
        Command::Ingest { input } => ingest(&cfg, input),
        Command::Synth => synth_world(&cfg),
        Command::GenExplanations => gen_explanations(&cfg),
        Command::Cluster => cluster(&cfg),
        Command::Train => train(&cfg),
        Command::Select { user } => select(&cfg, user.as_deref(), cli.dump_scores),
        Command::Recommend => recommend(&cfg),
        Command::Evaluate => evaluate_cmd(&cfg),
        Command::Ablate => ablate(&cfg),
        Command::WhatIf { user, explanations } => what_if_cmd(&cfg, user, explanations),
        Command::GradCheck { .. } => unreachable!("handled above"),
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} not found; run `{hint}` first", path.display())))
    }
}

fn prepared(cfg: &PipelineConfig) -> Result<Prepared> {
    require(&cfg.data, "ingest` or `synth")?;
    let ds = load_interactions(&cfg.data, Format::from_path(&cfg.data)).map_err(pe)?;
    prepare(ds, cfg.seeds().episodes).map_err(pe)
}

fn load_store(cfg: &PipelineConfig) -> Result<ExplanationStore> {
    require(&cfg.store_dir.join("candidates.jsonl"), "cluster")?;
    ExplanationStore::load(&cfg.store_dir).map_err(pe)
}

fn load_model(cfg: &PipelineConfig) -> Result<CausalXModel> {
    require(&cfg.checkpoint, "train")?;
    Ok(CausalXModel::load(&cfg.checkpoint, &cfg.manifest_path()).map_err(pe)?.0)
}

fn ingest(cfg: &PipelineConfig, input: &Path) -> Result<()> {
    require(input, "ingest <file>")?;
    let ds = load_interactions(input, Format::from_path(input)).map_err(pe)?;
    if let Some(dir) = cfg.data.parent() {
        fs::create_dir_all(dir).map_err(pe)?;
    }
    ds.write_jsonl(&cfg.data).map_err(pe)?;
    write_episodes(cfg, ds)
}

fn write_episodes(cfg: &PipelineConfig, ds: causalx_core::InteractionDataset) -> Result<()> {
    let (users, items, rows) = (ds.num_users(), ds.num_items(), ds.len());
    let prep = prepare(ds, cfg.seeds().episodes).map_err(pe)?;
    write_jsonl(&cfg.reports_dir.join("episodes.jsonl"), &prep.episodes).map_err(pe)?;
    log::info!(
        "{rows} interactions, {users} users, {items} items, {} episodes",
        prep.episodes.len()
    );
    Ok(())
}

fn synth_world(cfg: &PipelineConfig) -> Result<()> {
    let (ds, truth) = synth::generate(&cfg.world_config()).map_err(pe)?;
    for p in [&cfg.data, &cfg.ground_truth] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(pe)?;
        }
    }
    ds.write_jsonl(&cfg.data).map_err(pe)?;
    truth.write_jsonl(&cfg.ground_truth).map_err(pe)?;
    write_episodes(cfg, ds)
}

fn gen_explanations(cfg: &PipelineConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let gateway = cfg.gateway().map_err(pe)?;
    let (raw, report) = generate_candidates(&prep.train, &gateway, cfg.generation_batch).map_err(pe)?;
    fs::create_dir_all(&cfg.store_dir).map_err(pe)?;
    write_jsonl(&cfg.store_dir.join("raw.jsonl"), &raw).map_err(pe)?;
    write_json(&cfg.reports_dir.join("generation.json"), &report).map_err(pe)?;
    log::info!(
        "{} raw explanations from {} prompts ({} skipped, {} backend calls)",
        raw.len(),
        report.prompts,
        report.skipped.len(),
        gateway.backend_calls()
    );
    Ok(())
}

fn cluster(cfg: &PipelineConfig) -> Result<()> {
    let raw_path = cfg.store_dir.join("raw.jsonl");
    require(&raw_path, "gen-explanations")?;
    let raw: Vec<RawExplanation> = read_jsonl(&raw_path).map_err(pe)?;
    let embedder = cfg.embedder().map_err(pe)?;
    let store = ExplanationStore::build(raw, embedder.as_ref(), cfg.hdbscan_params(), cfg.seeds().representatives)
        .map_err(pe)?;
    store.save(&cfg.store_dir).map_err(pe)?;
    log::info!(
        "{} distinct texts, {} candidate explanations",
        store.assignment.points.len(),
        store.candidates.len()
    );
    Ok(())
}

fn train(cfg: &PipelineConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let store = load_store(cfg)?;
    let (model, report) = pipeline::train(cfg, &prep, &store).map_err(pe)?;
    if let Some(dir) = cfg.checkpoint.parent() {
        fs::create_dir_all(dir).map_err(pe)?;
    }
    model
        .save(&cfg.checkpoint, &cfg.manifest_path(), cfg.alpha, cfg.beta, cfg.seed)
        .map_err(pe)?;
    write_json(&cfg.reports_dir.join("train.json"), &report).map_err(pe)?;
    if let Some(l) = report.final_loss() {
        log::info!("final loss {:.4} (real {:.4}, conter {:.4})", l.total, l.real, l.conter);
    }
    Ok(())
}

fn select(cfg: &PipelineConfig, user: Option<&str>, dump: bool) -> Result<()> {
    let mut prep = prepared(cfg)?;
    if let Some(u) = user {
        prep.episodes.retain(|e| e.user == u);
        if prep.episodes.is_empty() {
            return Err(CliError::Usage(format!("user {u} has no evaluation episode")));
        }
    }
    let store = load_store(cfg)?;
    let model = load_model(cfg)?;
    let parts = score_episodes(&model, &prep).map_err(pe)?;
    let sel = select_all(&parts, &store, cfg.beta, cfg.n_explanations).map_err(pe)?;
    let lines: Vec<serde_json::Value> = sel
        .iter()
        .map(|s| serde_json::json!({"user": s.user, "beta": s.beta, "top": s.top}))
        .collect();
    write_jsonl(&cfg.reports_dir.join("selections.jsonl"), &lines).map_err(pe)?;
    if dump {
        let dir = cfg.reports_dir.join("scores");
        fs::create_dir_all(&dir).map_err(pe)?;
        for s in &sel {
            fs::write(dir.join(format!("{}.csv", s.user)), s.matrix_csv()).map_err(pe)?;
        }
    }
    log::info!("selected explanations for {} users at beta {}", sel.len(), cfg.beta);
    Ok(())
}

fn recommend(cfg: &PipelineConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let store = load_store(cfg)?;
    let model = load_model(cfg)?;
    let gateway = cfg.gateway().map_err(pe)?;
    let parts = score_episodes(&model, &prep).map_err(pe)?;
    let results = rank_variant(cfg, &prep, &parts, &store, &gateway, Variant::Full { beta: cfg.beta }).map_err(pe)?;
    write_jsonl(&cfg.reports_dir.join("rankings.jsonl"), &results).map_err(pe)?;
    let failed = results.iter().filter(|r| r.gateway_failed).count();
    log::info!(
        "ranked {} episodes ({failed} by fallback, {} backend calls)",
        results.len(),
        gateway.backend_calls()
    );
    Ok(())
}

fn evaluate_cmd(cfg: &PipelineConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let path = cfg.reports_dir.join("rankings.jsonl");
    require(&path, "recommend")?;
    let results: Vec<RankedResult> = read_jsonl(&path).map_err(pe)?;
    let report = evaluate(&prep, &Variant::Full { beta: cfg.beta }.name(), &results, cfg.strata).map_err(pe)?;
    write_json(&cfg.reports_dir.join("evaluation.json"), &report).map_err(pe)?;
    let table = format_variant_reports(std::slice::from_ref(&report));
    fs::write(cfg.reports_dir.join("evaluation.txt"), &table).map_err(pe)?;
    print!("{table}");
    Ok(())
}

fn ablate(cfg: &PipelineConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let store = load_store(cfg)?;
    let model = load_model(cfg)?;
    let gateway = cfg.gateway().map_err(pe)?;
    let parts = score_episodes(&model, &prep).map_err(pe)?;
    let ab = ablation(cfg, &prep, &parts, &store, &gateway).map_err(pe)?;
    write_json(&cfg.reports_dir.join("ablation.json"), &ab).map_err(pe)?;
    fs::write(cfg.reports_dir.join("ablation.txt"), ab.table()).map_err(pe)?;
    fs::write(cfg.reports_dir.join("trajectory.csv"), ab.trajectory.to_csv()).map_err(pe)?;
    print!("{}", ab.table());
    log::info!("full vs random mean displacement {:.3}", ab.trajectory.mean_displacement);
    Ok(())
}

fn what_if_cmd(cfg: &PipelineConfig, user: &str, explanations: &[String]) -> Result<()> {
    let prep = prepared(cfg)?;
    let episode = prep
        .episodes
        .iter()
        .find(|e| e.user == user)
        .ok_or_else(|| CliError::Usage(format!("user {user} has no evaluation episode")))?;
    let store = load_store(cfg)?;
    let model = load_model(cfg)?;
    let gateway = cfg.gateway().map_err(pe)?;
    let out = what_if(
        &model,
        &prep.full,
        &gateway,
        &prep.popularity,
        &store.candidates,
        episode,
        cfg.beta,
        cfg.n_explanations.min(store.candidates.len()),
        explanations,
    )
    .map_err(pe)?;
    write_json(&cfg.reports_dir.join(format!("what_if_{user}.json")), &out).map_err(pe)?;
    fs::write(cfg.reports_dir.join(format!("what_if_{user}.csv")), out.trajectory.to_csv()).map_err(pe)?;
    println!("mean displacement {:.3}", out.trajectory.mean_displacement);
    for (k, item) in out.modified.ranking.iter().enumerate() {
        println!("{:>2}. {}", k + 1, prep.full.title(item));
    }
    Ok(())
}

fn grad_check(seed: u64, models: u64) -> Result<()> {
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for s in seed..seed + models {
        let r = random_model_grad_check(s).map_err(pe)?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped;
    }
    println!("{models} models, {checked} coordinates checked, {skipped} skipped at kinks, max relative error {worst:.3e}");
    if worst < 1e-3 {
        Ok(())
    } else {
        Err(pe(PipelineError::Invalid(format!("gradient check failed: {worst:.3e} >= 1e-3"))))
    }
}
