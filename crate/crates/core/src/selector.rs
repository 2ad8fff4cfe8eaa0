//! Debiased explanation selection over a user's candidate items.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Episode, InteractionDataset, PopularityTable};
use crate::eval::{trajectory, EvalError, Trajectory};
use crate::explain::CandidateSet;
use crate::llm::{Gateway, LlmError};
use crate::model::{debias, CausalXModel, ModelError};
use crate::recommender::{recommend, RankedResult, RecommendInput};

/// Explanations handed to the recommender by default.
pub const DEFAULT_TOP_N: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("no candidate items")]
    NoCandidates,
    #[error("cannot select {n} of {g} explanations")]
    InvalidTopN { n: usize, g: usize },
    #[error("beta must be >= 0, got {0}")]
    NegativeBeta(f32),
    #[error("override explanation list is empty")]
    EmptyOverride,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The two head outputs for every `(candidate, explanation)` pair. Debiased
/// scores for any β are derived without re-running the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParts {
    pub user: String,
    pub items: Vec<String>,
    /// `real[q][g]`
    pub real: Vec<Vec<f32>>,
    /// `conter[q]`; depends only on the candidate's popularity.
    pub conter: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedExplanation {
    pub ordinal: usize,
    pub text: String,
    /// `max_q ŝ_debias(u, c_q, e)`
    pub score: f32,
    /// Candidate index attaining the max (first on ties).
    pub best_item: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub user: String,
    pub beta: f32,
    pub items: Vec<String>,
    pub top: Vec<SelectedExplanation>,
    /// `matrix[q][g] = ŝ_debias(u, c_q, e_g)`
    pub matrix: Vec<Vec<f32>>,
}

impl SelectionResult {
    pub fn ordinals(&self) -> Vec<usize> {
        self.top.iter().map(|s| s.ordinal).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.top.iter().map(|s| s.text.clone()).collect()
    }

    /// `max_g matrix[q][g]` per candidate.
    pub fn item_scores(&self) -> Vec<f32> {
        self.matrix
            .iter()
            .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect()
    }

    /// CSV with one row per candidate and one column per explanation.
    pub fn matrix_csv(&self) -> String {
        let g = self.matrix.first().map_or(0, Vec::len);
        let mut out = String::from("item");
        for e in 0..g {
            out.push_str(&format!(",e{e}"));
        }
        out.push('\n');
        for (item, row) in self.items.iter().zip(&self.matrix) {
            out.push_str(item);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

impl ScoreParts {
    pub fn compute(
        model: &CausalXModel,
        user: &str,
        items: &[String],
        popularity: &PopularityTable,
    ) -> Result<Self, SelectError> {
        if items.is_empty() {
            return Err(SelectError::NoCandidates);
        }
        let g = model.num_explanations();
        let u = model.user_row(user)?;
        let rows: Vec<Result<(Vec<f32>, f32), ModelError>> = items
            .par_iter()
            .map(|item| {
                let n = popularity.score_of(item);
                let ctx = model.item_context_rows(u, model.item_row(item)?, n)?;
                let real = (0..g)
                    .map(|e| model.real_score_in(&ctx, e))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((real, model.conter_score(n)?))
            })
            .collect();
        let mut real = Vec::with_capacity(items.len());
        let mut conter = Vec::with_capacity(items.len());
        for r in rows {
            let (a, b) = r?;
            real.push(a);
            conter.push(b);
        }
        Ok(Self {
            user: user.to_string(),
            items: items.to_vec(),
            real,
            conter,
        })
    }

    pub fn num_explanations(&self) -> usize {
        self.real.first().map_or(0, Vec::len)
    }

    pub fn debiased(&self, beta: f32) -> Vec<Vec<f32>> {
        self.real
            .iter()
            .zip(&self.conter)
            .map(|(row, &c)| {
                if beta == 0.0 {
                    row.clone()
                } else {
                    row.iter().map(|&r| debias(r, c, beta)).collect()
                }
            })
            .collect()
    }

    /// Top-`n` explanations by `max_q` debiased score; ties go to the lower
    /// ordinal.
    pub fn select(&self, beta: f32, n: usize, candidates: &CandidateSet) -> Result<SelectionResult, SelectError> {
        if !(beta >= 0.0) {
            return Err(SelectError::NegativeBeta(beta));
        }
        let g = self.num_explanations();
        if n == 0 || n > g {
            return Err(SelectError::InvalidTopN { n, g });
        }
        let matrix = self.debiased(beta);
        let mut best: Vec<(f32, usize)> = vec![(f32::NEG_INFINITY, 0); g];
        for (q, row) in matrix.iter().enumerate() {
            for (e, &s) in row.iter().enumerate() {
                if s > best[e].0 {
                    best[e] = (s, q);
                }
            }
        }
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| best[b].0.total_cmp(&best[a].0).then(a.cmp(&b)));
        let top = order[..n]
            .iter()
            .map(|&e| SelectedExplanation {
                ordinal: e,
                text: candidates.text(e).unwrap_or_default().to_string(),
                score: best[e].0,
                best_item: best[e].1,
            })
            .collect();
        Ok(SelectionResult {
            user: self.user.clone(),
            beta,
            items: self.items.clone(),
            top,
            matrix,
        })
    }
}

/// Scores every `(candidate, explanation)` pair and selects the top `n`.
pub fn select(
    model: &CausalXModel,
    user: &str,
    items: &[String],
    popularity: &PopularityTable,
    candidates: &CandidateSet,
    beta: f32,
    n: usize,
) -> Result<SelectionResult, SelectError> {
    ScoreParts::compute(model, user, items, popularity)?.select(beta, n, candidates)
}

/// Seeded uniform choice of `n` distinct explanations for `user`,
/// independent of the model (the random-explanation ablation).
pub fn random_selection(candidates: &CandidateSet, user: &str, n: usize, seed: u64) -> Vec<usize> {
    let mut h = seed ^ 0x51_7cc1_b727_220a;
    for b in user.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let g = candidates.len();
    sample(&mut rng, g, n.min(g)).into_vec()
}

/// Outcome of ranking with user-supplied explanations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub original: RankedResult,
    pub modified: RankedResult,
    pub trajectory: Trajectory,
}

/// Ranks `episode` twice: once with the selected explanations and once with
/// `overrides` fed straight to the recommender.
#[allow(clippy::too_many_arguments)]
pub fn what_if(
    model: &CausalXModel,
    ds: &InteractionDataset,
    gateway: &Gateway,
    popularity: &PopularityTable,
    candidates: &CandidateSet,
    episode: &Episode,
    beta: f32,
    n: usize,
    overrides: &[String],
) -> Result<WhatIf, SelectError> {
    if overrides.is_empty() {
        return Err(SelectError::EmptyOverride);
    }
    let sel = select(model, &episode.user, &episode.candidates, popularity, candidates, beta, n)?;
    let fallback_scores = sel.item_scores();
    let original = recommend(
        ds,
        gateway,
        &RecommendInput {
            episode,
            explanations: sel.texts(),
            fallback_scores: fallback_scores.clone(),
        },
    )?;
    let modified = recommend(
        ds,
        gateway,
        &RecommendInput {
            episode,
            explanations: overrides.to_vec(),
            fallback_scores,
        },
    )?;
    let trajectory = trajectory(std::slice::from_ref(&original), std::slice::from_ref(&modified))?;
    Ok(WhatIf {
        original,
        modified,
        trajectory,
    })
}
