use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CausalXModel, ModelConfig, ModelError, Params};
use crate::tensor::{grad_check, GradCheckReport, Optimizer, OptimizerKind};

/// Gradients are accumulated over fixed-size chunks and summed in order, so
/// results do not depend on the thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f32,
    /// Negative tuples per positive tuple.
    pub negatives: usize,
    /// Fraction of negatives formed by corrupting the item instead of the
    /// explanation. `0.0` corrupts the explanation only.
    pub item_negative_share: f32,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            negatives: 4,
            item_negative_share: 0.5,
            epochs: 20,
            lr: 1e-3,
            batch_size: 256,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha >= 0.0) {
            return Err(ModelError::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.negatives == 0 {
            return Err(ModelError::InvalidConfig("negatives must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.item_negative_share) {
            return Err(ModelError::InvalidConfig("item_negative_share must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(ModelError::InvalidConfig("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One `(u, i, n, e)` tuple with its label, indexed by model table rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub user: usize,
    pub item: usize,
    pub popularity: f64,
    pub expl: usize,
    pub label: f32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub real: f64,
    pub conter: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean losses per epoch.
    pub curve: Vec<LossParts>,
    pub samples_per_epoch: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<LossParts> {
        self.curve.last().copied()
    }
}

/// The augmented dataset in model-row coordinates.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    linked: BTreeMap<(usize, usize), BTreeSet<usize>>,
    user_items: BTreeMap<usize, BTreeSet<usize>>,
    item_popularity: Vec<f64>,
}

impl TrainingPool {
    /// `item_popularity[i]` is the score of item row `i`.
    pub fn new(item_popularity: Vec<f64>) -> Self {
        Self {
            item_popularity,
            ..Self::default()
        }
    }

    /// Adds an augmented tuple; `user_items` also records the interaction.
    pub fn insert(&mut self, user: usize, item: usize, expl: usize) {
        self.linked.entry((user, item)).or_default().insert(expl);
        self.user_items.entry(user).or_default().insert(item);
    }

    /// Records an interaction that has no surviving explanation, so item
    /// negatives never pick it.
    pub fn note_interaction(&mut self, user: usize, item: usize) {
        self.user_items.entry(user).or_default().insert(item);
    }

    pub fn len(&self) -> usize {
        self.linked.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.linked.is_empty()
    }

    pub fn contains(&self, user: usize, item: usize, expl: usize) -> bool {
        self.linked
            .get(&(user, item))
            .is_some_and(|s| s.contains(&expl))
    }

    pub fn popularity(&self, item: usize) -> f64 {
        self.item_popularity[item]
    }

    pub fn positives(&self) -> Vec<LabeledSample> {
        self.linked
            .iter()
            .flat_map(|(&(u, i), es)| {
                es.iter().map(move |&e| (u, i, e))
            })
            .map(|(u, i, e)| LabeledSample {
                user: u,
                item: i,
                popularity: self.item_popularity[i],
                expl: e,
                label: 1.0,
            })
            .collect()
    }
}

/// 1 iff the tuple belongs to the augmented dataset.
pub fn label(pool: &TrainingPool, user: usize, item: usize, expl: usize) -> f32 {
    if pool.contains(user, item, expl) {
        1.0
    } else {
        0.0
    }
}

impl Params {
    fn accumulate(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
    }
}

impl CausalXModel {
    /// Chunked, order-deterministic variant of [`CausalXModel::batch_gradients`].
    fn parallel_gradients(
        &self,
        batch: &[LabeledSample],
        alpha: f32,
    ) -> Result<(LossParts, Params), ModelError> {
        let scale = batch.len() as f32;
        let parts: Vec<Result<(LossParts, Params), ModelError>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                // batch_gradients averages over its own slice; rescale to the batch.
                let (mut loss, mut grads, _) = self.batch_gradients(chunk, alpha)?;
                let w = chunk.len() as f32 / scale;
                for (_, t) in grads.named_mut() {
                    for v in t.as_mut_slice() {
                        *v *= w;
                    }
                }
                loss.real *= f64::from(w);
                loss.conter *= f64::from(w);
                loss.total *= f64::from(w);
                Ok((loss, grads))
            })
            .collect();
        let mut total = LossParts::default();
        let mut grads = self.params.zeros_like();
        for p in parts {
            let (l, g) = p?;
            total.real += l.real;
            total.conter += l.conter;
            total.total += l.total;
            grads.accumulate(&g);
        }
        Ok((total, grads))
    }

    /// Fits both heads on `L_real + α L_conter`.
    pub fn train(&mut self, pool: &TrainingPool, cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
        cfg.validate()?;
        let positives = pool.positives();
        if positives.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let g = self.num_explanations();
        let num_items = self.vocabulary().items.len();
        if pool.item_popularity.len() != num_items {
            return Err(ModelError::InvalidConfig(format!(
                "pool has {} item popularities, model has {num_items} items",
                pool.item_popularity.len()
            )));
        }
        for ((u, i), es) in &pool.linked {
            if es.len() >= g {
                return Err(ModelError::CandidateSetTooSmall(format!(
                    "interaction ({u}, {i}) is linked to all {g} candidate explanations"
                )));
            }
            if let Some(&e) = es.iter().find(|&&e| e >= g) {
                return Err(ModelError::UnknownExplanation(e));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
        let mut report = TrainReport::default();
        for epoch in 0..cfg.epochs {
            let mut samples = Vec::with_capacity(positives.len() * (1 + cfg.negatives));
            for s in &positives {
                samples.push(*s);
                for _ in 0..cfg.negatives {
                    samples.push(draw_negative(pool, s, g, num_items, cfg.item_negative_share, &mut rng));
                }
            }
            samples.shuffle(&mut rng);
            report.samples_per_epoch = samples.len();

            let mut epoch_loss = LossParts::default();
            for batch in samples.chunks(cfg.batch_size) {
                let (loss, grads) = self.parallel_gradients(batch, cfg.alpha)?;
                let w = batch.len() as f64 / samples.len() as f64;
                epoch_loss.real += loss.real * w;
                epoch_loss.conter += loss.conter * w;
                epoch_loss.total += loss.total * w;
                let named_grads = grads.named();
                opt.step(
                    self.params
                        .named_mut()
                        .into_iter()
                        .map(|(n, t)| (n, t.as_mut_slice())),
                    named_grads.into_iter().map(|(n, t)| (n, t.as_slice())),
                )?;
            }
            log::debug!(
                "epoch {epoch}: real {:.4} conter {:.4} total {:.4}",
                epoch_loss.real,
                epoch_loss.conter,
                epoch_loss.total
            );
            report.curve.push(epoch_loss);
        }
        Ok(report)
    }
}

fn draw_negative(
    pool: &TrainingPool,
    pos: &LabeledSample,
    g: usize,
    num_items: usize,
    item_share: f32,
    rng: &mut ChaCha8Rng,
) -> LabeledSample {
    let seen = pool.user_items.get(&pos.user);
    let seen_count = seen.map_or(0, BTreeSet::len);
    let corrupt_item = item_share > 0.0 && seen_count < num_items && rng.random::<f32>() < item_share;
    if corrupt_item {
        loop {
            let i = rng.random_range(0..num_items);
            if !seen.is_some_and(|s| s.contains(&i)) {
                return LabeledSample {
                    item: i,
                    popularity: pool.item_popularity[i],
                    label: label(pool, pos.user, i, pos.expl),
                    ..*pos
                };
            }
        }
    }
    let linked = &pool.linked[&(pos.user, pos.item)];
    // Uniform over E_c \ linked by rank.
    let mut k = rng.random_range(0..g - linked.len());
    let mut e = 0;
    loop {
        if !linked.contains(&e) {
            if k == 0 {
                break;
            }
            k -= 1;
        }
        e += 1;
    }
    LabeledSample {
        expl: e,
        label: 0.0,
        ..*pos
    }
}

/// Central-difference check of [`CausalXModel::batch_gradients`] on a small
/// random model (all dimensions ≤ 8) with parameters redrawn from
/// `N(0, 0.5²)`, over a random pool with mixed negatives.
pub fn random_model_grad_check(seed: u64) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(1..=2);
    let cfg = ModelConfig {
        d_gmf: rng.random_range(1..=8),
        d_mlp: rng.random_range(1..=8),
        d_pop: rng.random_range(1..=8),
        hidden: (0..layers).map(|_| rng.random_range(2..=8)).collect(),
        buckets: rng.random_range(2..=8),
        ..ModelConfig::default()
    };
    let (users, items, g) = (3, 5, rng.random_range(2..=5));
    let ids = |p: &str, n: usize| (0..n).map(|k| format!("{p}{k}")).collect::<Vec<_>>();
    let mut model = CausalXModel::new(cfg, ids("u", users), ids("i", items), g, seed)?;
    let point: Vec<f32> = (0..model.params.flatten().len())
        .map(|_| 0.5 * rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    model.params.unflatten(&point)?;

    let mut pool = TrainingPool::new((0..items).map(|_| rng.random::<f64>()).collect());
    for u in 0..users {
        for _ in 0..2 {
            let i = rng.random_range(0..items);
            // Leave at least one explanation free for negatives.
            let e = rng.random_range(0..g - 1);
            pool.insert(u, i, e);
        }
    }
    let mut batch = Vec::new();
    for s in pool.positives() {
        batch.push(s);
        batch.push(draw_negative(&pool, &s, g, items, 0.5, &mut rng));
    }
    let alpha = rng.random_range(0.1..1.0f32);
    let (_, grads, _) = model.batch_gradients(&batch, alpha)?;
    let mut probe = model.clone();
    Ok(grad_check(
        |x| {
            probe.params.unflatten(x).expect("same layout");
            let (loss, _, pattern) = probe.batch_gradients(&batch, alpha).expect("valid batch");
            (loss.total, pattern)
        },
        &grads.flatten(),
        &point,
        1e-3,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_gmf: 4,
            d_mlp: 4,
            d_pop: 3,
            hidden: vec![6],
            buckets: 4,
            ..ModelConfig::default()
        }
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|k| format!("{prefix}{k}")).collect()
    }

    fn toy_pool() -> TrainingPool {
        let mut pool = TrainingPool::new(vec![0.0, 0.3, 0.6, 1.0, 0.5]);
        pool.insert(0, 0, 0);
        pool.insert(0, 1, 1);
        pool.insert(1, 2, 2);
        pool.insert(1, 3, 0);
        pool.insert(2, 4, 3);
        pool.insert(2, 0, 1);
        pool
    }

    #[test]
    fn labels_follow_membership() {
        let pool = toy_pool();
        assert_eq!(label(&pool, 0, 0, 0), 1.0);
        assert_eq!(label(&pool, 0, 0, 1), 0.0);
        assert_eq!(label(&TrainingPool::new(vec![0.5]), 0, 0, 0), 0.0);
    }

    #[test]
    fn negatives_are_never_labeled_positive_by_mistake() {
        let pool = toy_pool();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in pool.positives() {
            for _ in 0..200 {
                let n = draw_negative(&pool, &s, 4, 5, 0.5, &mut rng);
                assert_eq!(n.label, label(&pool, n.user, n.item, n.expl));
                assert_eq!(n.label, 0.0);
                assert_eq!(n.user, s.user);
            }
        }
    }

    #[test]
    fn explanation_only_negatives_keep_the_item() {
        let pool = toy_pool();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = pool.positives()[0];
        for _ in 0..100 {
            let n = draw_negative(&pool, &s, 4, 5, 0.0, &mut rng);
            assert_eq!((n.user, n.item), (s.user, s.item));
            assert_ne!(n.expl, s.expl);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let pool = toy_pool();
        for seed in 0..10u64 {
            let m = CausalXModel::new(small_cfg(), ids("u", 3), ids("i", 5), 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut batch = Vec::new();
            for s in pool.positives() {
                batch.push(s);
                batch.push(draw_negative(&pool, &s, 4, 5, 0.5, &mut rng));
            }
            let (_, grads, _) = m.batch_gradients(&batch, 0.7).unwrap();
            let point = m.params.flatten();
            let mut probe = m.clone();
            let report = grad_check(
                |x| {
                    probe.params.unflatten(x).unwrap();
                    let (loss, _, pattern) = probe.batch_gradients(&batch, 0.7).unwrap();
                    (loss.total, pattern)
                },
                &grads.flatten(),
                &point,
                1e-3,
            );
            assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
            assert!(report.checked > 10 * report.skipped, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn random_models_pass_grad_check() {
        for seed in 0..5 {
            let r = random_model_grad_check(seed).unwrap();
            assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn alpha_zero_leaves_counterfactual_head_untouched() {
        let mut m = CausalXModel::new(small_cfg(), ids("u", 3), ids("i", 5), 4, 1).unwrap();
        let before = m.params.conter.clone();
        let cfg = TrainConfig {
            alpha: 0.0,
            epochs: 3,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            ..TrainConfig::default()
        };
        m.train(&toy_pool(), &cfg).unwrap();
        for (a, b) in m.params.conter.layers().iter().zip(before.layers()) {
            let bits = |t: &crate::tensor::Dense| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weight), bits(&b.weight));
            assert_eq!(bits(&a.bias), bits(&b.bias));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = CausalXModel::new(small_cfg(), ids("u", 3), ids("i", 5), 4, 2).unwrap();
            let r = m.train(&toy_pool(), &cfg).unwrap();
            (m.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), r)
        };
        assert_eq!(run(), run());
    }

    /// Each user has one explanation it always uses; a model that memorizes
    /// the `(u, e)` pairing separates the pool perfectly.
    #[test]
    fn separable_pool_is_fit() {
        let users = 6;
        let items = 8;
        let mut pool = TrainingPool::new((0..items).map(|i| i as f64 / (items - 1) as f64).collect());
        for u in 0..users {
            for i in 0..items {
                if (u + i) % 2 == 0 {
                    pool.insert(u, i, u % 3);
                }
            }
        }
        let mut m = CausalXModel::new(small_cfg(), ids("u", users), ids("i", items), 3, 5).unwrap();
        let cfg = TrainConfig {
            alpha: 0.5,
            negatives: 2,
            item_negative_share: 0.0,
            epochs: 200,
            lr: 0.01,
            batch_size: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let r = m.train(&pool, &cfg).unwrap();
        let last = r.final_loss().unwrap();
        assert!(last.real < 0.1, "final real loss {}", last.real);
        assert!(r.curve[0].real > last.real);
    }

    #[test]
    fn saturated_candidate_set_is_an_error() {
        let mut pool = TrainingPool::new(vec![0.5]);
        pool.insert(0, 0, 0);
        pool.insert(0, 0, 1);
        let mut m = CausalXModel::new(small_cfg(), ids("u", 1), ids("i", 1), 2, 0).unwrap();
        assert!(matches!(
            m.train(&pool, &TrainConfig::default()),
            Err(ModelError::CandidateSetTooSmall(_))
        ));
        let mut m = CausalXModel::new(small_cfg(), ids("u", 1), ids("i", 1), 2, 0).unwrap();
        assert!(matches!(
            m.train(&TrainingPool::new(vec![0.5]), &TrainConfig::default()),
            Err(ModelError::EmptyTrainingSet)
        ));
    }
}
