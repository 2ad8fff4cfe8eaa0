//! Explanation-conditioned ranking through the chat model, with a
//! score-ordered fallback that always yields a full permutation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Episode, InteractionDataset};
use crate::explain::{history_text, profile_text};
use crate::llm::text::parse_list;
use crate::llm::{render, render_item, render_list, Gateway, LlmError, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmMatched,
    FallbackScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub user: String,
    /// Candidates in episode order.
    pub candidates: Vec<String>,
    pub positives: Vec<String>,
    pub ranking: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub explanations: Vec<String>,
    pub gateway_failed: bool,
}

impl RankedResult {
    /// Whether `ranking` is a duplicate-free permutation of `candidates`.
    pub fn is_permutation(&self) -> bool {
        let mut a = self.ranking.clone();
        let mut b = self.candidates.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b && self.provenance.len() == self.ranking.len() && a.windows(2).all(|w| w[0] != w[1])
    }

    /// 1-based rank of `item`.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.ranking.iter().position(|x| x == item).map(|p| p + 1)
    }
}

/// Casefolded, punctuation to spaces, articles dropped, whitespace collapsed.
pub fn normalize_title(s: &str) -> String {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Display titles for `items`; titles that collide after normalization carry
/// their id.
pub fn display_titles(ds: &InteractionDataset, items: &[String]) -> Vec<String> {
    let mut count: HashMap<String, usize> = HashMap::new();
    for it in items {
        *count.entry(normalize_title(ds.title(it))).or_default() += 1;
    }
    items
        .iter()
        .map(|it| {
            let t = ds.title(it);
            if count[&normalize_title(t)] > 1 || normalize_title(t).is_empty() {
                format!("{t} [{it}]")
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// Candidate line shown to the model: display title plus attributes.
pub fn candidate_line(ds: &InteractionDataset, item: &str, display: &str) -> String {
    let attrs = ds.item_meta(item).map(|m| m.attrs.clone()).unwrap_or_default();
    render_item(display, &attrs, None)
}

pub fn recommend_prompt(
    ds: &InteractionDataset,
    episode: &Episode,
    explanations: &[String],
    lines: &[String],
) -> Result<String, LlmError> {
    let history: Vec<&str> = episode.history.iter().map(|i| ds.title(i)).collect();
    render(
        TemplateId::Recommend,
        &BTreeMap::from([
            ("user profile", profile_text(ds, &episode.user)),
            ("history interactions", history_text(&history)),
            ("explanations", render_list(explanations)),
            ("candidate movies", render_list(lines)),
        ]),
    )
}

fn contains_at_boundary(hay: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {hay} ").contains(&format!(" {needle} "))
}

/// Maps one response line to a candidate index. Exact match on the whole
/// line, then on the text before a trailing parenthetical, then the longest
/// title contained at token boundaries when it is unique.
fn match_line(line: &str, norm_titles: &[String]) -> Option<usize> {
    let whole = normalize_title(line);
    if let Some(k) = norm_titles.iter().position(|t| *t == whole) {
        return Some(k);
    }
    if let Some(open) = line.find('(') {
        let head = normalize_title(&line[..open]);
        if let Some(k) = norm_titles.iter().position(|t| *t == head) {
            return Some(k);
        }
    }
    let hits: Vec<usize> = (0..norm_titles.len())
        .filter(|&k| contains_at_boundary(&whole, &norm_titles[k]))
        .collect();
    let longest = hits.iter().map(|&k| norm_titles[k].len()).max()?;
    let top: Vec<usize> = hits.into_iter().filter(|&k| norm_titles[k].len() == longest).collect();
    (top.len() == 1).then(|| top[0])
}

/// Parses a ranked list against `titles`; the first mention of a candidate
/// wins. Unmatched candidates follow in descending `fallback` score, ties
/// in candidate order. Returns candidate indices.
pub fn parse_ranking(text: &str, titles: &[String], fallback: &[f32]) -> (Vec<usize>, Vec<Provenance>) {
    let norm: Vec<String> = titles.iter().map(|t| normalize_title(t)).collect();
    let mut lines = parse_list(text);
    if lines.is_empty() {
        lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    }
    let mut placed = vec![false; titles.len()];
    let mut order = Vec::with_capacity(titles.len());
    let mut prov = Vec::with_capacity(titles.len());
    for line in &lines {
        if let Some(k) = match_line(line, &norm) {
            if !placed[k] {
                placed[k] = true;
                order.push(k);
                prov.push(Provenance::LlmMatched);
            }
        }
    }
    for k in fallback_order(fallback) {
        if !placed[k] {
            placed[k] = true;
            order.push(k);
            prov.push(Provenance::FallbackScore);
        }
    }
    (order, prov)
}

/// Indices by descending score, ties by index.
pub fn fallback_order(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// One recommendation request.
#[derive(Debug, Clone)]
pub struct RecommendInput<'a> {
    pub episode: &'a Episode,
    pub explanations: Vec<String>,
    /// Per candidate (episode order): used to complete partial rankings and
    /// as the whole ranking when the gateway fails.
    pub fallback_scores: Vec<f32>,
}

/// Ranks every input; prompts go out through the gateway as one batch.
pub fn recommend_batch(
    ds: &InteractionDataset,
    gateway: &Gateway,
    inputs: &[RecommendInput<'_>],
) -> Result<Vec<RankedResult>, LlmError> {
    let mut prepared = Vec::with_capacity(inputs.len());
    let mut reqs = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let titles = display_titles(ds, &inp.episode.candidates);
        let lines: Vec<String> = inp
            .episode
            .candidates
            .iter()
            .zip(&titles)
            .map(|(it, t)| candidate_line(ds, it, t))
            .collect();
        let prompt = recommend_prompt(ds, inp.episode, &inp.explanations, &lines)?;
        reqs.push(gateway.request(TemplateId::Recommend, &prompt));
        prepared.push(titles);
    }
    let responses = gateway.chat_many(&reqs);
    Ok(inputs
        .iter()
        .zip(prepared)
        .zip(responses)
        .map(|((inp, titles), resp)| {
            let ep = inp.episode;
            let (order, provenance, failed) = match resp {
                Ok(text) => {
                    let (o, p) = parse_ranking(&text, &titles, &inp.fallback_scores);
                    (o, p, false)
                }
                Err(e) => {
                    log::warn!("user {}: recommendation failed, using score order: {e}", ep.user);
                    let o = fallback_order(&inp.fallback_scores);
                    let p = vec![Provenance::FallbackScore; o.len()];
                    (o, p, true)
                }
            };
            let result = RankedResult {
                user: ep.user.clone(),
                candidates: ep.candidates.clone(),
                positives: ep.positives.clone(),
                ranking: order.iter().map(|&k| ep.candidates[k].clone()).collect(),
                provenance,
                explanations: inp.explanations.clone(),
                gateway_failed: failed,
            };
            assert!(result.is_permutation(), "ranking for {} is not a permutation", ep.user);
            result
        })
        .collect())
}

pub fn recommend(
    ds: &InteractionDataset,
    gateway: &Gateway,
    input: &RecommendInput<'_>,
) -> Result<RankedResult, LlmError> {
    Ok(recommend_batch(ds, gateway, std::slice::from_ref(input))?.remove(0))
}
