//! Candidate explanations: generation through the chat gateway, embedding,
//! clustering, representative selection and the augmented training set.

pub mod hdbscan;

pub use hdbscan::{hdbscan, HdbscanParams, Labels};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionDataset, HISTORY_LEN};
use crate::llm::text::parse_list;
use crate::llm::{
    embed_texts, render, render_item, render_list, Embedder, Gateway, LlmError, TemplateId,
    UNKNOWN_PROFILE,
};
use crate::tensor::{read_records, write_records, Dense, TensorError};

/// Responses are parsed into at most this many explanations.
pub const MAX_EXPLANATIONS_PER_RESPONSE: usize = 10;
/// Fresh re-queries after an unparseable response.
pub const GENERATION_RETRIES: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("inconsistent store: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExplanation {
    pub id: usize,
    /// Index into the dataset's interaction list.
    pub interaction: usize,
    pub user: String,
    pub item: String,
    pub feedback: Option<String>,
    pub text: String,
    pub batch: usize,
}

/// Generation outcome per interaction, in dataset order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub prompts: usize,
    pub skipped: Vec<usize>,
}

/// Renders the explanation prompt for interaction `idx` of `ds`.
pub fn explain_prompt(ds: &InteractionDataset, idx: usize) -> Result<String, LlmError> {
    let it = &ds.interactions()[idx];
    let seq = ds.user_interactions(&it.user);
    let pos = seq
        .iter()
        .position(|x| std::ptr::eq(*x, it))
        .unwrap_or(seq.len());
    let start = pos.saturating_sub(HISTORY_LEN);
    let history: Vec<&str> = seq[start..pos].iter().map(|x| ds.title(&x.item)).collect();
    let meta_attrs = ds.item_meta(&it.item).map(|m| m.attrs.clone()).unwrap_or_default();
    let fields = BTreeMap::from([
        ("user profile", profile_text(ds, &it.user)),
        ("history interactions", history_text(&history)),
        (
            "interacted item",
            render_item(ds.title(&it.item), &meta_attrs, it.feedback.as_deref()),
        ),
    ]);
    render(TemplateId::ExplainGen, &fields)
}

pub fn profile_text(ds: &InteractionDataset, user: &str) -> String {
    ds.user_profile(user)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .unwrap_or(UNKNOWN_PROFILE)
        .to_string()
}

pub fn history_text<S: AsRef<str>>(titles: &[S]) -> String {
    if titles.is_empty() {
        "none".to_string()
    } else {
        render_list(titles)
    }
}

/// Parses a response into trimmed, non-empty list items (capped).
pub fn parse_explanations(response: &str) -> Vec<String> {
    let mut items = parse_list(response);
    items.truncate(MAX_EXPLANATIONS_PER_RESPONSE);
    items
}

/// One prompt per interaction of `ds`; list responses become raw
/// explanations. Interactions whose responses stay unparseable after
/// [`GENERATION_RETRIES`] fresh queries are skipped.
pub fn generate_candidates(
    ds: &InteractionDataset,
    gateway: &Gateway,
    batch_size: usize,
) -> Result<(Vec<RawExplanation>, GenerationReport), ExplainError> {
    let mut raw = Vec::new();
    let mut report = GenerationReport::default();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for (batch, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let reqs = chunk
            .iter()
            .map(|&i| Ok(gateway.request(TemplateId::ExplainGen, &explain_prompt(ds, i)?)))
            .collect::<Result<Vec<_>, LlmError>>()?;
        report.prompts += reqs.len();
        let responses = gateway.chat_many(&reqs);
        for ((&idx, req), resp) in chunk.iter().zip(&reqs).zip(responses) {
            let mut texts = match resp {
                Ok(r) => parse_explanations(&r),
                Err(e) => {
                    log::warn!("interaction {idx}: generation failed: {e}");
                    Vec::new()
                }
            };
            let mut attempt = 0;
            while texts.is_empty() && attempt < GENERATION_RETRIES {
                attempt += 1;
                texts = gateway
                    .chat_fresh(req)
                    .map(|r| parse_explanations(&r))
                    .unwrap_or_default();
            }
            if texts.is_empty() {
                log::warn!("interaction {idx}: no parseable explanations; skipped");
                report.skipped.push(idx);
                continue;
            }
            let it = &ds.interactions()[idx];
            for text in texts {
                raw.push(RawExplanation {
                    id: raw.len(),
                    interaction: idx,
                    user: it.user.clone(),
                    item: it.item.clone(),
                    feedback: it.feedback.clone(),
                    text,
                    batch,
                });
            }
        }
    }
    Ok((raw, report))
}

/// Cluster membership of raw explanations. Identical texts share one point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Distinct texts in first-appearance order.
    pub points: Vec<String>,
    /// Raw explanation id -> point index.
    pub point_of: Vec<usize>,
    /// Point index -> cluster label, `None` for noise.
    pub labels: Labels,
}

/// Either a density cluster or a noise point standing alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Cluster(usize),
    Noise(usize),
}

impl ClusterAssignment {
    pub fn group_of(&self, raw_id: usize) -> Group {
        let p = self.point_of[raw_id];
        match self.labels.0[p] {
            Some(c) => Group::Cluster(c),
            None => Group::Noise(p),
        }
    }

    pub fn label_of(&self, raw_id: usize) -> Option<usize> {
        self.labels.0[self.point_of[raw_id]]
    }
}

/// Deduplicates texts, embeds the distinct ones and clusters them.
pub fn cluster_explanations(
    raw: &[RawExplanation],
    embedder: &dyn Embedder,
    params: HdbscanParams,
) -> Result<(ClusterAssignment, Dense), ExplainError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut points: Vec<String> = Vec::new();
    let point_of = raw
        .iter()
        .map(|r| {
            *index.entry(r.text.as_str()).or_insert_with(|| {
                points.push(r.text.clone());
                points.len() - 1
            })
        })
        .collect();
    let emb = embed_texts(embedder, &points)?;
    let labels = hdbscan(&emb, params);
    log::info!(
        "{} explanations, {} distinct, {} clusters, {} noise",
        raw.len(),
        points.len(),
        labels.num_clusters(),
        labels.noise_count()
    );
    Ok((
        ClusterAssignment {
            points,
            point_of,
            labels,
        },
        emb,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representative {
    pub ordinal: usize,
    pub raw_id: usize,
    pub text: String,
    pub group: Group,
}

/// `E_c`: one representative per group, ordinals dense from 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub reps: Vec<Representative>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn text(&self, ordinal: usize) -> Option<&str> {
        self.reps.get(ordinal).map(|r| r.text.as_str())
    }

    pub fn ordinal_of(&self, group: Group) -> Option<usize> {
        self.reps.iter().find(|r| r.group == group).map(|r| r.ordinal)
    }
}

/// A seeded uniform draw per group: clusters in label order, then noise
/// points (each its own singleton) in first-appearance order.
pub fn pick_representatives(raw: &[RawExplanation], assignment: &ClusterAssignment, seed: u64) -> CandidateSet {
    let mut groups: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
    for r in raw {
        groups.entry(assignment.group_of(r.id)).or_default().push(r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps = groups
        .into_iter()
        .enumerate()
        .map(|(ordinal, (group, members))| {
            let raw_id = members[rng.random_range(0..members.len())];
            Representative {
                ordinal,
                raw_id,
                text: raw[raw_id].text.clone(),
                group,
            }
        })
        .collect();
    CandidateSet { reps }
}

/// One `(u, i, y_d, e)` tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub interaction: usize,
    pub user: String,
    pub item: String,
    pub feedback: Option<String>,
    pub expl: usize,
}

/// Links each interaction to the representatives of the groups its raw
/// explanations fall in, deduplicated.
pub fn build_augmented(
    ds: &InteractionDataset,
    raw: &[RawExplanation],
    assignment: &ClusterAssignment,
    candidates: &CandidateSet,
) -> Result<Vec<AugmentedSample>, ExplainError> {
    let ordinal: HashMap<Group, usize> = candidates.reps.iter().map(|r| (r.group, r.ordinal)).collect();
    let mut linked: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in raw {
        let g = assignment.group_of(r.id);
        let e = *ordinal
            .get(&g)
            .ok_or_else(|| ExplainError::Inconsistent(format!("group {g:?} has no representative")))?;
        linked.entry(r.interaction).or_default().insert(e);
    }
    let without = ds.len() - linked.len();
    if without > 0 {
        log::info!("{without} interactions have no explanation and are excluded");
    }
    let mut out = Vec::new();
    for (idx, es) in linked {
        let it = ds
            .interactions()
            .get(idx)
            .ok_or_else(|| ExplainError::Inconsistent(format!("interaction {idx} out of range")))?;
        for e in es {
            out.push(AugmentedSample {
                interaction: idx,
                user: it.user.clone(),
                item: it.item.clone(),
                feedback: it.feedback.clone(),
                expl: e,
            });
        }
    }
    Ok(out)
}

/// Everything the explanation stage produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationStore {
    pub raw: Vec<RawExplanation>,
    pub assignment: ClusterAssignment,
    pub embeddings: Dense,
    pub candidates: CandidateSet,
}

#[derive(Serialize, Deserialize)]
struct ClusterLine {
    raw_id: usize,
    point: usize,
    label: Option<usize>,
}

impl ExplanationStore {
    pub fn build(
        raw: Vec<RawExplanation>,
        embedder: &dyn Embedder,
        params: HdbscanParams,
        seed: u64,
    ) -> Result<Self, ExplainError> {
        let (assignment, embeddings) = cluster_explanations(&raw, embedder, params)?;
        let candidates = pick_representatives(&raw, &assignment, seed);
        Ok(Self {
            raw,
            assignment,
            embeddings,
            candidates,
        })
    }

    pub fn augmented(&self, ds: &InteractionDataset) -> Result<Vec<AugmentedSample>, ExplainError> {
        build_augmented(ds, &self.raw, &self.assignment, &self.candidates)
    }

    /// Writes `raw.jsonl`, `clusters.jsonl`, `candidates.jsonl` and
    /// `embeddings.cxm` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ExplainError> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("raw.jsonl"), &self.raw)?;
        let lines: Vec<ClusterLine> = self
            .raw
            .iter()
            .map(|r| ClusterLine {
                raw_id: r.id,
                point: self.assignment.point_of[r.id],
                label: self.assignment.label_of(r.id),
            })
            .collect();
        write_jsonl(&dir.join("clusters.jsonl"), &lines)?;
        write_jsonl(&dir.join("candidates.jsonl"), &self.candidates.reps)?;
        let mut buf = Vec::new();
        write_records(&mut buf, [("embeddings", &self.embeddings)])?;
        fs::write(dir.join("embeddings.cxm"), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ExplainError> {
        let raw: Vec<RawExplanation> = read_jsonl(&dir.join("raw.jsonl"))?;
        let lines: Vec<ClusterLine> = read_jsonl(&dir.join("clusters.jsonl"))?;
        let reps: Vec<Representative> = read_jsonl(&dir.join("candidates.jsonl"))?;
        let embeddings = read_records(fs::File::open(dir.join("embeddings.cxm"))?)?
            .into_iter()
            .find(|(n, _)| n == "embeddings")
            .map(|(_, t)| t)
            .ok_or_else(|| ExplainError::Inconsistent("embeddings record missing".into()))?;
        if lines.len() != raw.len() {
            return Err(ExplainError::Inconsistent("clusters.jsonl does not cover raw.jsonl".into()));
        }
        let n_points = lines.iter().map(|l| l.point + 1).max().unwrap_or(0);
        let mut points = vec![String::new(); n_points];
        let mut labels = vec![None; n_points];
        let mut point_of = vec![0; raw.len()];
        for l in &lines {
            let r = raw
                .get(l.raw_id)
                .ok_or_else(|| ExplainError::Inconsistent(format!("unknown raw id {}", l.raw_id)))?;
            point_of[l.raw_id] = l.point;
            points[l.point] = r.text.clone();
            labels[l.point] = l.label;
        }
        Ok(Self {
            raw,
            assignment: ClusterAssignment {
                points,
                point_of,
                labels: Labels(labels),
            },
            embeddings,
            candidates: CandidateSet { reps },
        })
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExplainError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExplainError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ExplainError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_interactions, Format};
    use crate::llm::{GatewayConfig, MockEmbedder};

    fn dataset() -> InteractionDataset {
        let text = r#"{"user":"u1","item":"i1","title":"Heat","attrs":{"genre":"crime heist"},"ts":1}
{"user":"u1","item":"i2","title":"Alien","attrs":{"genre":"space horror","mood":"tense"},"ts":2}
{"user":"u1","item":"i3","title":"Ronin","feedback":"Loved the car chases. Great cast","ts":3}
{"user":"u2","item":"i2","ts":1}
"#;
        parse_interactions(text, Format::Jsonl).unwrap()
    }

    #[test]
    fn generation_with_the_mock() {
        let ds = dataset();
        let g = Gateway::mock(0, GatewayConfig::default()).unwrap();
        let (raw, report) = generate_candidates(&ds, &g, 2).unwrap();
        assert_eq!(report.prompts, 4);
        // i2 has two attributes -> 2 reasons; u2's i2 too; i1 -> 1; i3 review -> 2.
        let per: Vec<usize> = (0..4).map(|k| raw.iter().filter(|r| r.interaction == k).count()).collect();
        assert_eq!(per, vec![1, 2, 2, 2]);
        assert!(raw.iter().all(|r| !r.text.trim().is_empty()));
        assert_eq!(raw.iter().map(|r| r.id).collect::<Vec<_>>(), (0..raw.len()).collect::<Vec<_>>());
        let calls = g.backend_calls();
        generate_candidates(&ds, &g, 2).unwrap();
        assert_eq!(g.backend_calls(), calls);
    }

    #[test]
    fn prompt_fields() {
        let ds = dataset();
        let p = explain_prompt(&ds, 2).unwrap();
        assert!(p.contains("the profile unknown profile has"));
        assert!(p.contains("watched the movie:\nHeat\nAlien\nPlease"));
        assert!(p.contains("selected Ronin (review: Loved the car chases. Great cast) as"));
        let first = explain_prompt(&ds, 0).unwrap();
        assert!(first.contains("movie:\nnone\n"));
    }

    fn raw_of(texts: &[(usize, &str)]) -> Vec<RawExplanation> {
        texts
            .iter()
            .enumerate()
            .map(|(id, (inter, t))| RawExplanation {
                id,
                interaction: *inter,
                user: "u".into(),
                item: format!("i{inter}"),
                feedback: None,
                text: t.to_string(),
                batch: 0,
            })
            .collect()
    }

    fn assignment(point_labels: Vec<Option<usize>>, point_of: Vec<usize>) -> ClusterAssignment {
        ClusterAssignment {
            points: (0..point_labels.len()).map(|k| k.to_string()).collect(),
            point_of,
            labels: Labels(point_labels),
        }
    }

    #[test]
    fn representatives_counting() {
        let raw = raw_of(&[(0, "a"), (0, "b"), (1, "c"), (1, "d")]);
        let two = assignment(vec![Some(0), Some(0), Some(1), Some(1)], vec![0, 1, 2, 3]);
        assert_eq!(pick_representatives(&raw, &two, 1).len(), 2);

        let raw = raw_of(&[(0, "a"), (0, "b"), (0, "c"), (1, "d"), (1, "e"), (2, "f"), (2, "g"), (2, "h")]);
        let labels = vec![Some(0), Some(0), Some(0), Some(0), Some(0), None, None, None];
        let a = assignment(labels, (0..8).collect());
        let c = pick_representatives(&raw, &a, 7);
        assert_eq!(c.len(), 4);
        assert_eq!(c, pick_representatives(&raw, &a, 7));
        assert_eq!(c.reps.iter().map(|r| r.ordinal).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(c.reps[0].group, Group::Cluster(0));
        assert!(c.reps[0].raw_id < 5);
    }

    #[test]
    fn augmented_dedups_per_interaction() {
        let ds = dataset();
        let raw = raw_of(&[(0, "a"), (0, "b"), (0, "c"), (1, "d"), (1, "e")]);
        let a = assignment(vec![Some(0), Some(0), Some(0), Some(0), Some(1)], (0..5).collect());
        let c = pick_representatives(&raw, &a, 0);
        let aug = build_augmented(&ds, &raw, &a, &c).unwrap();
        let for0: Vec<_> = aug.iter().filter(|s| s.interaction == 0).collect();
        let for1: Vec<_> = aug.iter().filter(|s| s.interaction == 1).collect();
        assert_eq!(for0.len(), 1);
        assert_eq!(for1.len(), 2);
        assert!(aug.iter().all(|s| s.expl < c.len()));
    }

    #[test]
    fn store_round_trip() {
        let ds = dataset();
        let g = Gateway::mock(0, GatewayConfig::default()).unwrap();
        let (raw, _) = generate_candidates(&ds, &g, 8).unwrap();
        let store = ExplanationStore::build(
            raw,
            &MockEmbedder::new(16, 0),
            HdbscanParams {
                min_cluster_size: 2,
                min_samples: 2,
            },
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = ExplanationStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.augmented(&ds).unwrap(), store.augmented(&ds).unwrap());
    }
}
