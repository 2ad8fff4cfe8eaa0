//! Seeded fixtures for the hot-path benchmarks.

use causalx_core::explain::{Group, Representative};
use causalx_core::model::LabeledSample;
use causalx_core::{CandidateSet, CausalXModel, Dense, ModelConfig, ScoreParts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points in `dim` dimensions drawn around `clusters` uniform centers.
pub fn clustered_points(n: usize, dim: usize, clusters: usize, seed: u64) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            centers[i % clusters]
                .iter()
                .map(|c| c + rng.random_range(-0.5..0.5))
                .collect()
        })
        .collect();
    Dense::from_rows(&rows).expect("rows share a width")
}

pub fn candidate_set(g: usize) -> CandidateSet {
    CandidateSet {
        reps: (0..g)
            .map(|e| Representative {
                ordinal: e,
                raw_id: e,
                text: format!("reason {e}"),
                group: Group::Cluster(e),
            })
            .collect(),
    }
}

/// Random head outputs for `q` candidates and `g` explanations.
pub fn score_parts(q: usize, g: usize, seed: u64) -> ScoreParts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScoreParts {
        user: "u0".into(),
        items: (0..q).map(|i| format!("i{i}")).collect(),
        real: (0..q).map(|_| (0..g).map(|_| rng.random()).collect()).collect(),
        conter: (0..q).map(|_| rng.random()).collect(),
    }
}

/// A default-shaped model over `users` x `items` with `g` explanations.
pub fn model(users: usize, items: usize, g: usize) -> CausalXModel {
    CausalXModel::new(
        ModelConfig::default(),
        (0..users).map(|u| format!("u{u}")).collect(),
        (0..items).map(|i| format!("i{i}")).collect(),
        g,
        7,
    )
    .expect("valid model")
}

/// A labeled batch over the model's row indices.
pub fn batch(model: &CausalXModel, size: usize, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.vocabulary();
    (0..size)
        .map(|_| LabeledSample {
            user: rng.random_range(0..v.users.len()),
            item: rng.random_range(0..v.items.len()),
            popularity: rng.random_range(0.0..=1.0),
            expl: rng.random_range(0..model.num_explanations()),
            label: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
        })
        .collect()
}
