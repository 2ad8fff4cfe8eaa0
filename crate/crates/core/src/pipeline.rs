//! End-to-end orchestration shared by the command line and the acceptance
//! suite: episodes, explanations, training, selection, ranking, metrics.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_episodes, compute_popularity, training_split, CorpusError, Episode, InteractionDataset, PopularityTable,
};
use crate::eval::{format_reports, stratified_report, trajectory, EvalError, MetricReport, StrataSource, Trajectory};
use crate::explain::{generate_candidates, ExplainError, ExplanationStore, GenerationReport, HdbscanParams};
use crate::llm::{Embedder, Gateway, GatewayConfig, HttpClient, HttpEmbedder, LlmError, MockEmbedder, RetryPolicy};
use crate::model::{CausalXModel, ModelConfig, ModelError, TrainConfig, TrainReport, TrainingPool};
use crate::recommender::{recommend_batch, RankedResult, RecommendInput};
use crate::selector::{random_selection, ScoreParts, SelectError, SelectionResult};
use crate::synth::{SynthError, WorldConfig};
use crate::tensor::{Activation, OptimizerKind};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Every knob of a run, as one flat key/value table. Relative paths are
/// resolved against the config file's directory by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: PathBuf,
    pub store_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub cache: Option<PathBuf>,
    pub reports_dir: PathBuf,
    pub ground_truth: PathBuf,

    pub seed: u64,
    pub mock_llm: bool,
    pub embed_dim: usize,
    pub embed_model: String,

    pub d_gmf: usize,
    pub d_mlp: usize,
    pub d_pop: usize,
    pub hidden: Vec<usize>,
    pub buckets: usize,

    pub alpha: f32,
    pub beta: f32,
    pub beta_sweep: Vec<f32>,
    pub negatives: usize,
    pub item_negative_share: f32,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,

    pub n_explanations: usize,
    pub strata: StrataSource,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub generation_batch: usize,

    pub llm_model: String,
    pub explain_temperature: f32,
    pub recommend_temperature: f32,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub timeout_secs: u64,

    pub world_users: usize,
    pub world_items: usize,
    pub world_archetypes: usize,
    pub world_conformity: f64,
    pub world_skew: f64,
    pub world_interactions_per_user: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let gw = GatewayConfig::default();
        Self {
            data: "data/interactions.jsonl".into(),
            store_dir: "store".into(),
            checkpoint: "checkpoints/model.cxm".into(),
            cache: None,
            reports_dir: "reports".into(),
            ground_truth: "data/ground_truth.jsonl".into(),
            seed: 0,
            mock_llm: false,
            embed_dim: 64,
            embed_model: "text-embedding-3-small".into(),
            d_gmf: 16,
            d_mlp: 16,
            d_pop: 8,
            hidden: vec![32, 16],
            buckets: 10,
            alpha: 0.5,
            beta: 0.5,
            beta_sweep: (1..=10).map(|k| k as f32 / 10.0).collect(),
            negatives: 4,
            item_negative_share: 0.5,
            epochs: 10,
            lr: 5e-3,
            batch_size: 256,
            n_explanations: crate::selector::DEFAULT_TOP_N,
            strata: StrataSource::InteractionFreq,
            min_cluster_size: 5,
            min_samples: 5,
            generation_batch: 256,
            llm_model: gw.model,
            explain_temperature: gw.explain_temperature,
            recommend_temperature: gw.recommend_temperature,
            max_tokens: gw.max_tokens,
            max_in_flight: gw.max_in_flight,
            timeout_secs: gw.timeout_secs,
            world_users: world.users,
            world_items: world.items,
            world_archetypes: world.archetypes,
            world_conformity: world.conformity,
            world_skew: world.skew,
            world_interactions_per_user: world.interactions_per_user,
        }
    }
}

/// Seeds derived from the single configured seed; logged by every command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub episodes: u64,
    pub llm: u64,
    pub embedder: u64,
    pub representatives: u64,
    pub init: u64,
    pub train: u64,
    pub random_selection: u64,
    pub world: u64,
}

impl PipelineConfig {
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            episodes: s,
            llm: s.wrapping_add(1),
            embedder: s.wrapping_add(2),
            representatives: s.wrapping_add(3),
            init: s.wrapping_add(4),
            train: s.wrapping_add(5),
            random_selection: s.wrapping_add(6),
            world: s,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Joins every relative path onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data);
        join(&mut self.store_dir);
        join(&mut self.checkpoint);
        join(&mut self.reports_dir);
        join(&mut self.ground_truth);
        if let Some(c) = self.cache.as_mut() {
            join(c);
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.checkpoint.with_extension("json")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_gmf: self.d_gmf,
            d_mlp: self.d_mlp,
            d_pop: self.d_pop,
            hidden: self.hidden.clone(),
            activation: Activation::Relu,
            buckets: self.buckets,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            negatives: self.negatives,
            item_negative_share: self.item_negative_share,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            optimizer: OptimizerKind::Adam,
            seed: self.seeds().train,
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            model: self.llm_model.clone(),
            explain_temperature: self.explain_temperature,
            recommend_temperature: self.recommend_temperature,
            max_tokens: self.max_tokens,
            max_in_flight: self.max_in_flight,
            cache_path: self.cache.clone(),
            timeout_secs: self.timeout_secs,
        }
    }

    pub fn hdbscan_params(&self) -> HdbscanParams {
        HdbscanParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            users: self.world_users,
            items: self.world_items,
            archetypes: self.world_archetypes,
            latent_dim: self.world_archetypes,
            conformity: self.world_conformity,
            skew: self.world_skew,
            interactions_per_user: self.world_interactions_per_user,
            seed: self.seeds().world,
            ..WorldConfig::default()
        }
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let cfg = self.gateway_config();
        Ok(if self.mock_llm {
            Gateway::mock(self.seeds().llm, cfg)?
        } else {
            Gateway::from_env(cfg)?
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(if self.mock_llm {
            Box::new(MockEmbedder::new(self.embed_dim, self.seeds().embedder))
        } else {
            let client = HttpClient::from_env(RetryPolicy::default(), Duration::from_secs(self.timeout_secs))?;
            Box::new(HttpEmbedder::new(client, &self.embed_model))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_explanations == 0 {
            return Err(PipelineError::Invalid("n_explanations must be >= 1".into()));
        }
        if !(self.beta >= 0.0) || self.beta_sweep.iter().any(|b| !(*b >= 0.0)) {
            return Err(PipelineError::Invalid("beta values must be >= 0".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }
}

/// Episodes and the leakage-free training view of a dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub full: InteractionDataset,
    pub episodes: Vec<Episode>,
    pub train: InteractionDataset,
    /// Popularity from training interactions only.
    pub popularity: PopularityTable,
}

pub fn prepare(ds: InteractionDataset, seed: u64) -> Result<Prepared> {
    let episodes = build_episodes(&ds, seed);
    if episodes.is_empty() {
        return Err(PipelineError::Invalid("no user qualifies for an evaluation episode".into()));
    }
    let train = training_split(&ds, &episodes);
    let popularity = compute_popularity(&train);
    Ok(Prepared {
        full: ds,
        episodes,
        train,
        popularity,
    })
}

/// Explanation generation over the training interactions.
pub fn explanation_store(cfg: &PipelineConfig, prep: &Prepared, gateway: &Gateway) -> Result<(ExplanationStore, GenerationReport)> {
    let (raw, report) = generate_candidates(&prep.train, gateway, cfg.generation_batch)?;
    let embedder = cfg.embedder()?;
    let store = ExplanationStore::build(raw, embedder.as_ref(), cfg.hdbscan_params(), cfg.seeds().representatives)?;
    Ok((store, report))
}

/// The augmented training pool in the model's row coordinates.
pub fn training_pool(model: &CausalXModel, prep: &Prepared, store: &ExplanationStore) -> Result<TrainingPool> {
    let items = &model.vocabulary().items;
    let popularity = items.iter().map(|i| prep.popularity.score_of(i)).collect();
    let mut pool = TrainingPool::new(popularity);
    for it in prep.train.interactions() {
        pool.note_interaction(model.user_row(&it.user)?, model.item_row(&it.item)?);
    }
    for s in store.augmented(&prep.train)? {
        pool.insert(model.user_row(&s.user)?, model.item_row(&s.item)?, s.expl);
    }
    Ok(pool)
}

/// A freshly initialized model over every user and item of the full data.
pub fn new_model(cfg: &PipelineConfig, prep: &Prepared, store: &ExplanationStore) -> Result<CausalXModel> {
    let users: Vec<String> = prep.full.users().map(str::to_string).collect();
    let items: Vec<String> = prep.full.items().into_iter().map(str::to_string).collect();
    Ok(CausalXModel::new(
        cfg.model_config(),
        users,
        items,
        store.candidates.len(),
        cfg.seeds().init,
    )?)
}

pub fn train(cfg: &PipelineConfig, prep: &Prepared, store: &ExplanationStore) -> Result<(CausalXModel, TrainReport)> {
    let mut model = new_model(cfg, prep, store)?;
    let pool = training_pool(&model, prep, store)?;
    let report = model.train(&pool, &cfg.train_config())?;
    Ok((model, report))
}

/// Both head outputs for every episode; reused across β values.
pub fn score_episodes(model: &CausalXModel, prep: &Prepared) -> Result<Vec<ScoreParts>> {
    prep.episodes
        .par_iter()
        .map(|ep| Ok(ScoreParts::compute(model, &ep.user, &ep.candidates, &prep.popularity)?))
        .collect()
}

pub fn select_all(parts: &[ScoreParts], store: &ExplanationStore, beta: f32, n: usize) -> Result<Vec<SelectionResult>> {
    let n = n.min(store.candidates.len());
    parts
        .iter()
        .map(|p| Ok(p.select(beta, n, &store.candidates)?))
        .collect()
}

/// Which explanations reach the recommender.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum Variant {
    Full { beta: f32 },
    NoDebias,
    RandomExplanations,
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full { beta } => format!("full(beta={beta})"),
            Variant::NoDebias => "no_debias".into(),
            Variant::RandomExplanations => "random_explanations".into(),
        }
    }
}

/// Ranks every episode under `variant`. Fallback scores always come from the
/// variant's debiased matrix (β = 0 for the non-debiased variants).
pub fn rank_variant(
    cfg: &PipelineConfig,
    prep: &Prepared,
    parts: &[ScoreParts],
    store: &ExplanationStore,
    gateway: &Gateway,
    variant: Variant,
) -> Result<Vec<RankedResult>> {
    let beta = match variant {
        Variant::Full { beta } => beta,
        _ => 0.0,
    };
    let selections = select_all(parts, store, beta, cfg.n_explanations)?;
    let inputs: Vec<RecommendInput<'_>> = prep
        .episodes
        .iter()
        .zip(&selections)
        .map(|(ep, sel)| {
            let explanations = match variant {
                Variant::RandomExplanations => {
                    random_selection(&store.candidates, &ep.user, cfg.n_explanations, cfg.seeds().random_selection)
                        .into_iter()
                        .map(|e| store.candidates.text(e).unwrap_or_default().to_string())
                        .collect()
                }
                _ => sel.texts(),
            };
            RecommendInput {
                episode: ep,
                explanations,
                fallback_scores: sel.item_scores(),
            }
        })
        .collect();
    let results = recommend_batch(&prep.full, gateway, &inputs)?;
    if let Some(bad) = results.iter().find(|r| !r.is_permutation()) {
        return Err(PipelineError::Invalid(format!("ranking for {} is not a permutation", bad.user)));
    }
    Ok(results)
}

/// Training-data interaction counts over the full catalogue.
pub fn interaction_frequencies(prep: &Prepared) -> BTreeMap<String, u64> {
    let mut f = prep.train.item_frequencies();
    for i in prep.full.items() {
        f.entry(i.to_string()).or_insert(0);
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub strata: Vec<MetricReport>,
}

pub fn evaluate(prep: &Prepared, variant: &str, results: &[RankedResult], source: StrataSource) -> Result<VariantReport> {
    Ok(VariantReport {
        variant: variant.to_string(),
        strata: stratified_report(results, &interaction_frequencies(prep), source)?,
    })
}

/// One row per variant: Recall@2 and NDCG@2 over all episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall_at_2: f64,
    pub ndcg_at_2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<VariantReport>,
    /// Full against random-explanation rankings.
    pub trajectory: Trajectory,
}

impl Ablation {
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>10}\n", "variant", "Recall@2", "NDCG@2");
        for r in &self.rows {
            out.push_str(&format!("{:<24} {:>10.4} {:>10.4}\n", r.variant, r.recall_at_2, r.ndcg_at_2));
        }
        out
    }
}

pub fn ablation(
    cfg: &PipelineConfig,
    prep: &Prepared,
    parts: &[ScoreParts],
    store: &ExplanationStore,
    gateway: &Gateway,
) -> Result<Ablation> {
    let variants = [
        Variant::Full { beta: cfg.beta },
        Variant::NoDebias,
        Variant::RandomExplanations,
    ];
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for v in variants {
        let results = rank_variant(cfg, prep, parts, store, gateway, v)?;
        let rep = evaluate(prep, &v.name(), &results, cfg.strata)?;
        let all = rep.strata[0].get(2);
        rows.push(AblationRow {
            variant: v.name(),
            recall_at_2: all.recall,
            ndcg_at_2: all.ndcg,
        });
        reports.push(rep);
        runs.push(results);
    }
    let trajectory = trajectory(&runs[0], &runs[2])?;
    Ok(Ablation {
        rows,
        reports,
        trajectory,
    })
}

pub fn format_variant_reports(reports: &[VariantReport]) -> String {
    let rows: Vec<(String, MetricReport)> = reports
        .iter()
        .flat_map(|r| r.strata.iter().map(move |s| (r.variant.clone(), s.clone())))
        .collect();
    format_reports(&rows)
}

/// Everything downstream of a trained model, kept in memory.
pub struct Fitted {
    pub prep: Prepared,
    pub store: ExplanationStore,
    pub model: CausalXModel,
    pub train_report: TrainReport,
    pub parts: Vec<ScoreParts>,
}

/// Runs every stage up to the score matrices.
pub fn fit(cfg: &PipelineConfig, ds: InteractionDataset, gateway: &Gateway) -> Result<Fitted> {
    cfg.validate()?;
    let prep = prepare(ds, cfg.seeds().episodes)?;
    let (store, gen) = explanation_store(cfg, &prep, gateway)?;
    log::info!(
        "{} prompts, {} raw explanations, {} candidates",
        gen.prompts,
        store.raw.len(),
        store.candidates.len()
    );
    let (model, train_report) = train(cfg, &prep, &store)?;
    let parts = score_episodes(&model, &prep)?;
    Ok(Fitted {
        prep,
        store,
        model,
        train_report,
        parts,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Episodes by user, for commands that work on one user.
pub fn episode_index(episodes: &[Episode]) -> HashMap<&str, &Episode> {
    episodes.iter().map(|e| (e.user.as_str(), e)).collect()
}
