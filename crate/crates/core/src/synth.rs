//! A synthetic movie world with known explanation archetypes.
//!
//! Users and items live in a latent space spanned by a few interest
//! archetypes. Exposure follows a power law over item popularity, users keep
//! the exposed items they match, and every kept interaction carries a review
//! written from one archetype: either an interest archetype (driven by the
//! user-item match) or the conformity archetype (driven by item popularity).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, InteractionDataset, ItemMeta};
use crate::explain::ExplanationStore;

/// Keyword triples of the interest archetypes, in id order.
pub const INTEREST_KEYWORDS: &[[&str; 3]] = &[
    ["space", "robots", "aliens"],
    ["romance", "weddings", "heartbreak"],
    ["detectives", "murders", "clues"],
    ["dragons", "wizards", "quests"],
    ["comedy", "pranks", "laughter"],
    ["war", "soldiers", "battles"],
    ["ghosts", "haunting", "screams"],
    ["music", "bands", "concerts"],
    ["cowboys", "outlaws", "frontier"],
    ["sharks", "oceans", "shipwrecks"],
    ["heists", "vaults", "getaways"],
    ["zombies", "outbreaks", "survival"],
];

/// Keywords of the conformity archetype.
pub const CONFORMITY_KEYWORDS: [&str; 3] = ["popularity", "buzz", "hype"];

const REVIEW_VERBS: &[&str] = &["Loved", "Enjoyed", "Appreciated", "Was captivated by"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("no selections to score")]
    NoSelections,
    #[error("missing provenance: {0}")]
    MissingProvenance(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    /// Interest archetypes; one conformity archetype is always added.
    pub archetypes: usize,
    pub latent_dim: usize,
    /// γ: weight of popularity affinity against interest match.
    pub conformity: f64,
    /// Exposure weight of the item at popularity rank r is (r+1)^-skew.
    pub skew: f64,
    pub interactions_per_user: usize,
    /// Exposed items are kept when the user-item dot product exceeds this.
    pub accept_threshold: f64,
    /// Softmax temperature of the archetype draw.
    pub temperature: f64,
    /// Std-dev of latent noise around the home archetype direction.
    pub noise: f64,
    /// Items in this top fraction by popularity carry a `buzz` attribute.
    pub buzz_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 1500,
            archetypes: 8,
            latent_dim: 8,
            conformity: 0.8,
            skew: 1.0,
            interactions_per_user: 20,
            accept_threshold: 0.5,
            temperature: 0.05,
            noise: 0.1,
            buzz_fraction: 0.15,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.users == 0 || self.items == 0 || self.interactions_per_user == 0 {
            return bad("counts must be positive");
        }
        if self.archetypes == 0 || self.archetypes > INTEREST_KEYWORDS.len() {
            return bad(&format!("archetypes must be in 1..={}", INTEREST_KEYWORDS.len()));
        }
        if self.latent_dim < self.archetypes {
            return bad("latent_dim must be >= archetypes");
        }
        if !(0.0..=1.0).contains(&self.conformity) {
            return bad("conformity must be in [0, 1]");
        }
        if !(self.skew >= 0.0 && self.temperature > 0.0 && self.noise >= 0.0) {
            return bad("skew, temperature and noise must be non-negative (temperature > 0)");
        }
        if !(0.0..=1.0).contains(&self.buzz_fraction) {
            return bad("buzz_fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// Id of the conformity archetype.
    pub fn conformity_archetype(&self) -> usize {
        self.archetypes
    }
}

/// The review sentence keywords of archetype `a`.
pub fn archetype_keywords(cfg: &WorldConfig, a: usize) -> [&'static str; 3] {
    if a == cfg.conformity_archetype() {
        CONFORMITY_KEYWORDS
    } else {
        INTEREST_KEYWORDS[a]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub user: String,
    pub item: String,
    /// Archetype the review was written from.
    pub archetype: usize,
    /// The archetype of best interest match (the draw with γ = 0, τ → 0).
    pub interest_archetype: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub item: String,
    pub rank: usize,
    pub exposure: f64,
    /// Normalized log exposure in [0, 1].
    pub popularity: f64,
    pub home: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user: String,
    pub home: usize,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TruthLine {
    Pair(PairTruth),
    Item(ItemTruth),
    User(UserTruth),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<PairTruth>,
    pub items: Vec<ItemTruth>,
    pub users: Vec<UserTruth>,
}

impl GroundTruth {
    pub fn pair_index(&self) -> HashMap<(&str, &str), &PairTruth> {
        self.pairs
            .iter()
            .map(|p| ((p.user.as_str(), p.item.as_str()), p))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SynthError> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        let lines = self
            .users
            .iter()
            .cloned()
            .map(TruthLine::User)
            .chain(self.items.iter().cloned().map(TruthLine::Item))
            .chain(self.pairs.iter().cloned().map(TruthLine::Pair));
        for l in lines {
            serde_json::to_writer(&mut f, &l)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, SynthError> {
        let mut gt = Self::default();
        for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                TruthLine::Pair(p) => gt.pairs.push(p),
                TruthLine::Item(i) => gt.items.push(i),
                TruthLine::User(u) => gt.users.push(u),
            }
        }
        Ok(gt)
    }
}

/// Latent geometry and popularity of a generated world.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    /// Unit archetype directions, `archetypes × latent_dim`.
    pub directions: Vec<Vec<f64>>,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    /// 0 = most exposed.
    pub item_rank: Vec<usize>,
    pub item_popularity: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl World {
    /// Per-archetype match of `(u, i)`: how strongly both align with each
    /// interest direction; the conformity archetype has match 0.
    pub fn archetype_match(&self, u: usize, i: usize) -> Vec<f64> {
        let mut m: Vec<f64> = self
            .directions
            .iter()
            .map(|d| dot(&self.user_latent[u], d) * dot(&self.item_latent[i], d))
            .collect();
        m.push(0.0);
        m
    }

    /// Popularity affinity per archetype: only the conformity archetype
    /// responds to popularity.
    pub fn archetype_affinity(&self, i: usize) -> Vec<f64> {
        let mut a = vec![0.0; self.cfg.archetypes];
        a.push(self.item_popularity[i]);
        a
    }

    pub fn archetype_logits(&self, u: usize, i: usize) -> Vec<f64> {
        let g = self.cfg.conformity;
        self.archetype_match(u, i)
            .iter()
            .zip(self.archetype_affinity(i))
            .map(|(m, a)| ((1.0 - g) * m + g * a) / self.cfg.temperature)
            .collect()
    }

    pub fn draw_archetype(&self, u: usize, i: usize, rng: &mut impl Rng) -> usize {
        let logits = self.archetype_logits(u, i);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        WeightedIndex::new(&w).expect("finite softmax weights").sample(rng)
    }

    pub fn interest_archetype(&self, u: usize, i: usize) -> usize {
        let m = self.archetype_match(u, i);
        argmax(&m[..self.cfg.archetypes])
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn user_id(u: usize) -> String {
    format!("u{u:04}")
}

pub fn item_id(i: usize) -> String {
    format!("m{i:04}")
}

/// Builds the latent world without drawing interactions.
pub fn build_world(cfg: &WorldConfig) -> Result<World, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Archetype directions are the first `archetypes` axes.
    let directions: Vec<Vec<f64>> = (0..cfg.archetypes)
        .map(|a| {
            let mut d = vec![0.0; cfg.latent_dim];
            d[a] = 1.0;
            d
        })
        .collect();
    let place = |rng: &mut ChaCha8Rng, home: usize| {
        let noise = gaussian_vec(rng, cfg.latent_dim, cfg.noise);
        unit(directions[home].iter().zip(noise).map(|(d, n)| d + n).collect())
    };
    let user_latent: Vec<Vec<f64>> = (0..cfg.users)
        .map(|u| place(&mut rng, u % cfg.archetypes))
        .collect();
    let item_latent: Vec<Vec<f64>> = (0..cfg.items)
        .map(|i| place(&mut rng, i % cfg.archetypes))
        .collect();
    // Popularity ranks are a random permutation so genre and rank decouple.
    let mut ranks: Vec<usize> = (0..cfg.items).collect();
    rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), &mut rng);
    let ln_n = (cfg.items.max(2) as f64).ln();
    let item_popularity = ranks
        .iter()
        .map(|&r| (1.0 - ((r + 1) as f64).ln() / ln_n).clamp(0.0, 1.0))
        .collect();
    Ok(World {
        cfg: cfg.clone(),
        directions,
        user_latent,
        item_latent,
        item_rank: ranks,
        item_popularity,
    })
}

fn review(cfg: &WorldConfig, archetype: usize, rng: &mut impl Rng) -> String {
    let [a, b, c] = archetype_keywords(cfg, archetype);
    let verb = REVIEW_VERBS.choose(rng).expect("non-empty");
    format!("{verb} its {a}, {b} and {c}.")
}

/// Draws the interaction log. Fully determined by `cfg`.
pub fn generate(cfg: &WorldConfig) -> Result<(InteractionDataset, GroundTruth), SynthError> {
    let world = build_world(cfg)?;
    // Separate stream so the geometry does not depend on the draw below.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_f1e7);
    let rank_of = |i: usize| world.item_rank[i];
    let exposure: Vec<f64> = (0..cfg.items)
        .map(|i| ((rank_of(i) + 1) as f64).powf(-cfg.skew))
        .collect();

    let n_buzz = (cfg.buzz_fraction * cfg.items as f64).ceil() as usize;
    let mut meta = BTreeMap::new();
    for i in 0..cfg.items {
        let home = i % cfg.archetypes;
        let mut attrs = BTreeMap::from([("genre".to_string(), INTEREST_KEYWORDS[home].join(", "))]);
        if rank_of(i) < n_buzz {
            attrs.insert("buzz".to_string(), CONFORMITY_KEYWORDS.join(", "));
        }
        meta.insert(
            item_id(i),
            ItemMeta {
                title: Some(format!("Movie {i:04}")),
                attrs,
            },
        );
    }

    let max_attempts = cfg.interactions_per_user * 200;
    let mut rows = Vec::new();
    let mut truth = GroundTruth::default();
    for u in 0..cfg.users {
        let mut weights = exposure.clone();
        let mut kept = 0;
        let mut attempts = 0;
        let mut seen = HashSet::new();
        while kept < cfg.interactions_per_user && attempts < max_attempts {
            attempts += 1;
            let Ok(dist) = WeightedIndex::new(&weights) else {
                break;
            };
            let i = dist.sample(&mut rng);
            // Exposed once: rejected items are not shown again.
            weights[i] = 0.0;
            if !seen.insert(i) || dot(&world.user_latent[u], &world.item_latent[i]) <= cfg.accept_threshold {
                continue;
            }
            let archetype = world.draw_archetype(u, i, &mut rng);
            rows.push(Interaction {
                user: user_id(u),
                item: item_id(i),
                feedback: Some(review(cfg, archetype, &mut rng)),
                ts: Some(kept as i64),
            });
            truth.pairs.push(PairTruth {
                user: user_id(u),
                item: item_id(i),
                archetype,
                interest_archetype: world.interest_archetype(u, i),
            });
            kept += 1;
        }
    }
    truth.items = (0..cfg.items)
        .map(|i| ItemTruth {
            item: item_id(i),
            rank: rank_of(i),
            exposure: exposure[i],
            popularity: world.item_popularity[i],
            home: i % cfg.archetypes,
        })
        .collect();
    truth.users = (0..cfg.users)
        .map(|u| UserTruth {
            user: user_id(u),
            home: u % cfg.archetypes,
            latent: world.user_latent[u].clone(),
        })
        .collect();
    Ok((InteractionDataset::new(rows, meta, BTreeMap::new()), truth))
}

/// Archetype of each candidate explanation, read through its representative
/// raw explanation's `(user, item)` pair.
pub fn representative_archetypes(store: &ExplanationStore, truth: &GroundTruth) -> Result<Vec<usize>, SynthError> {
    let index = truth.pair_index();
    store
        .candidates
        .reps
        .iter()
        .map(|rep| {
            let raw = store
                .raw
                .get(rep.raw_id)
                .ok_or_else(|| SynthError::MissingProvenance(format!("raw explanation {}", rep.raw_id)))?;
            index
                .get(&(raw.user.as_str(), raw.item.as_str()))
                .map(|p| p.archetype)
                .ok_or_else(|| SynthError::MissingProvenance(format!("pair ({}, {})", raw.user, raw.item)))
        })
        .collect()
}

/// Interest archetypes most frequent among `user`'s held-out pairs (all
/// tied modes).
pub fn modal_interest(truth_index: &HashMap<(&str, &str), &PairTruth>, user: &str, held_out: &[String]) -> Result<Vec<usize>, SynthError> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for item in held_out {
        let p = truth_index
            .get(&(user, item.as_str()))
            .ok_or_else(|| SynthError::MissingProvenance(format!("pair ({user}, {item})")))?;
        *counts.entry(p.interest_archetype).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(counts.into_iter().filter(|&(_, c)| c == best).map(|(a, _)| a).collect())
}

/// One user's top-1 selection for [`oracle_accuracy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleInput {
    pub user: String,
    pub held_out: Vec<String>,
    /// Archetype of the top-1 selected explanation.
    pub selected_archetype: usize,
}

/// Fraction of users whose top-1 explanation archetype is a modal interest
/// archetype of their held-out interactions.
pub fn oracle_accuracy(inputs: &[OracleInput], truth: &GroundTruth) -> Result<f64, SynthError> {
    if inputs.is_empty() {
        return Err(SynthError::NoSelections);
    }
    let index = truth.pair_index();
    let mut hits = 0usize;
    for inp in inputs {
        if modal_interest(&index, &inp.user, &inp.held_out)?.contains(&inp.selected_archetype) {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}
