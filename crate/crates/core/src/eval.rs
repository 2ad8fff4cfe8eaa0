//! Offline ranking metrics, popularity strata, and ranking trajectories.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_head_tail, CorpusError, HEAD_FRACTION, MIN_SPLIT_POPULATION, TAIL_FRACTION};
use crate::recommender::RankedResult;

/// Cut-offs reported everywhere.
pub const KS: [usize; 2] = [1, 2];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("K = {k} exceeds ranking length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("result sets cover different episodes: {0}")]
    EpisodeMismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub hit: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Hit, recall and NDCG at `k` with binary gains and `1/log2(rank+1)`
/// discounts.
pub fn metrics_at_k<S: AsRef<str>>(ranking: &[S], positives: &[S], k: usize) -> Result<AtK, EvalError> {
    if k > ranking.len() || k == 0 {
        return Err(EvalError::KTooLarge { k, len: ranking.len() });
    }
    let pos: HashSet<&str> = positives.iter().map(AsRef::as_ref).collect();
    if pos.is_empty() {
        return Ok(AtK::default());
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranking[..k].iter().enumerate() {
        if pos.contains(item.as_ref()) {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..pos.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(AtK {
        hit: if hits > 0 { 1.0 } else { 0.0 },
        recall: hits as f64 / pos.len() as f64,
        ndcg: dcg / ideal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stratum: Stratum,
    pub episodes: usize,
    /// Keyed by K.
    pub at: BTreeMap<usize, AtK>,
}

impl MetricReport {
    pub fn get(&self, k: usize) -> AtK {
        self.at.get(&k).copied().unwrap_or_default()
    }

    /// `true` when no episode contributed.
    pub fn is_empty(&self) -> bool {
        self.episodes == 0
    }
}

/// Averages metrics over results, counting only positives accepted by
/// `keep`; episodes without such a positive are excluded.
pub fn report_where(
    results: &[RankedResult],
    stratum: Stratum,
    keep: impl Fn(&str) -> bool,
) -> Result<MetricReport, EvalError> {
    let mut sums: BTreeMap<usize, AtK> = KS.iter().map(|&k| (k, AtK::default())).collect();
    let mut episodes = 0;
    for r in results {
        let pos: Vec<&str> = r.positives.iter().map(String::as_str).filter(|p| keep(p)).collect();
        if pos.is_empty() {
            continue;
        }
        episodes += 1;
        for &k in &KS {
            let m = metrics_at_k(&r.ranking.iter().map(String::as_str).collect::<Vec<_>>(), &pos, k)?;
            let s = sums.get_mut(&k).expect("k present");
            s.hit += m.hit;
            s.recall += m.recall;
            s.ndcg += m.ndcg;
        }
    }
    if episodes > 0 {
        for s in sums.values_mut() {
            s.hit /= episodes as f64;
            s.recall /= episodes as f64;
            s.ndcg /= episodes as f64;
        }
    }
    Ok(MetricReport {
        stratum,
        episodes,
        at: sums,
    })
}

pub fn overall_report(results: &[RankedResult]) -> Result<MetricReport, EvalError> {
    report_where(results, Stratum::All, |_| true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrataSource {
    /// Training interaction counts (fixed across runs).
    InteractionFreq,
    /// How often each item lands in the top 2 of the given results.
    RecommendationFreq,
}

/// Top-2 appearances per item over `results`; every candidate is present.
pub fn recommendation_frequencies(results: &[RankedResult]) -> BTreeMap<String, u64> {
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for r in results {
        for c in &r.candidates {
            freq.entry(c.clone()).or_insert(0);
        }
        for item in r.ranking.iter().take(2) {
            *freq.entry(item.clone()).or_insert(0) += 1;
        }
    }
    freq
}

/// All / head / tail reports. `interaction_freq` is used for
/// [`StrataSource::InteractionFreq`].
pub fn stratified_report(
    results: &[RankedResult],
    interaction_freq: &BTreeMap<String, u64>,
    source: StrataSource,
) -> Result<Vec<MetricReport>, EvalError> {
    let freq = match source {
        StrataSource::InteractionFreq => {
            // Items never seen in training count as zero-frequency tail items.
            let mut f = interaction_freq.clone();
            for r in results {
                for c in &r.candidates {
                    f.entry(c.clone()).or_insert(0);
                }
            }
            f
        }
        StrataSource::RecommendationFreq => recommendation_frequencies(results),
    };
    if freq.len() < MIN_SPLIT_POPULATION {
        return Err(CorpusError::PopulationTooSmall(freq.len()).into());
    }
    let (head, tail) = split_head_tail(&freq, HEAD_FRACTION, TAIL_FRACTION)?;
    Ok(vec![
        overall_report(results)?,
        report_where(results, Stratum::Head, |p| head.contains(p))?,
        report_where(results, Stratum::Tail, |p| tail.contains(p))?,
    ])
}

/// Aligned text table, one row per report.
pub fn format_reports(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "n", "Hit@1", "Hit@2", "Recall@2", "NDCG@1", "NDCG@2"
    );
    for (name, r) in rows {
        let label = format!("{name}/{}", match r.stratum {
            Stratum::All => "all",
            Stratum::Head => "head",
            Stratum::Tail => "tail",
        });
        if r.is_empty() {
            let _ = writeln!(out, "{label:<24} {:>6} (n=0)", 0);
            continue;
        }
        let (a, b) = (r.get(1), r.get(2));
        let _ = writeln!(
            out,
            "{label:<24} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.episodes, a.hit, b.hit, b.recall, a.ndcg, b.ndcg
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub episode: String,
    pub item: String,
    pub original_rank: usize,
    pub modified_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub mean_displacement: f64,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,item,orig_rank,mod_rank\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.episode, p.item, p.original_rank, p.modified_rank);
        }
        out
    }
}

/// Pairs every candidate's rank in `original` with its rank in `modified`.
/// Episodes are matched by user and must cover the same candidates.
pub fn trajectory(original: &[RankedResult], modified: &[RankedResult]) -> Result<Trajectory, EvalError> {
    let by_user: BTreeMap<&str, &RankedResult> = modified.iter().map(|r| (r.user.as_str(), r)).collect();
    if original.len() != modified.len() || by_user.len() != modified.len() {
        return Err(EvalError::EpisodeMismatch(format!(
            "{} original vs {} modified episodes",
            original.len(),
            modified.len()
        )));
    }
    let mut points = Vec::new();
    for o in original {
        let m = by_user
            .get(o.user.as_str())
            .ok_or_else(|| EvalError::EpisodeMismatch(format!("user {} missing", o.user)))?;
        let a: BTreeSet<&String> = o.candidates.iter().collect();
        let b: BTreeSet<&String> = m.candidates.iter().collect();
        if a != b {
            return Err(EvalError::EpisodeMismatch(format!("user {}: candidate sets differ", o.user)));
        }
        for item in &o.candidates {
            points.push(TrajectoryPoint {
                episode: o.user.clone(),
                item: item.clone(),
                original_rank: o.rank_of(item).expect("permutation"),
                modified_rank: m.rank_of(item).expect("permutation"),
            });
        }
    }
    let mean_displacement = if points.is_empty() {
        0.0
    } else {
        points
            .iter()
            .map(|p| p.original_rank.abs_diff(p.modified_rank) as f64)
            .sum::<f64>()
            / points.len() as f64
    };
    Ok(Trajectory {
        points,
        mean_displacement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::Provenance;

    fn result(user: &str, ranking: Vec<String>, positives: Vec<String>) -> RankedResult {
        RankedResult {
            user: user.into(),
            candidates: ranking.clone(),
            positives,
            provenance: vec![Provenance::LlmMatched; ranking.len()],
            ranking,
            explanations: vec![],
            gateway_failed: false,
        }
    }

    fn items(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("i{k:02}")).collect()
    }

    #[test]
    fn hand_computed_cases() {
        let r = items(20);
        let m = metrics_at_k(&r, &[r[0].clone(), r[1].clone()], 2).unwrap();
        assert_eq!((m.hit, m.recall, m.ndcg), (1.0, 1.0, 1.0));
        let m = metrics_at_k(&r, &[r[0].clone(), r[2].clone()], 2).unwrap();
        assert_eq!((m.hit, m.recall), (1.0, 0.5));
        assert!((m.ndcg - 1.0 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((m.ndcg - 0.6131).abs() < 1e-4);
        let m = metrics_at_k(&r, &[r[5].clone(), r[9].clone()], 2).unwrap();
        assert_eq!((m.hit, m.recall, m.ndcg), (0.0, 0.0, 0.0));
        assert!(metrics_at_k(&r, &[r[0].clone()], 21).is_err());
    }

    #[test]
    fn hit_at_one_equals_ndcg_at_one() {
        let r = items(20);
        for p in 0..20 {
            let m = metrics_at_k(&r, &[r[p].clone(), r[(p + 7) % 20].clone()], 1).unwrap();
            assert_eq!(m.hit, m.ndcg);
        }
    }

    #[test]
    fn vacuous_tail_stratum() {
        let it = items(20);
        let mut freq = BTreeMap::new();
        for (k, i) in it.iter().enumerate() {
            freq.insert(i.clone(), 100 - k as u64);
        }
        // Positives i00 and i01 are head items.
        let res = vec![result("u", it.clone(), vec![it[0].clone(), it[1].clone()])];
        let reps = stratified_report(&res, &freq, StrataSource::InteractionFreq).unwrap();
        assert_eq!(reps[2].stratum, Stratum::Tail);
        assert!(reps[2].is_empty());
        assert_eq!(reps[1].episodes, 1);
        assert!(format_reports(&[("full".into(), reps[2].clone())]).contains("n=0"));
    }

    #[test]
    fn trajectory_identity_and_reversal() {
        let it = items(20);
        let orig = vec![result("u", it.clone(), vec![])];
        assert_eq!(trajectory(&orig, &orig).unwrap().mean_displacement, 0.0);
        let mut rev = it.clone();
        rev.reverse();
        let mut m = result("u", rev, vec![]);
        m.candidates = it.clone();
        let t = trajectory(&orig, &[m]).unwrap();
        assert!((t.mean_displacement - 10.0).abs() < 1e-12);
        assert!(t.to_csv().starts_with("episode,item,orig_rank,mod_rank\nu,i00,1,20\n"));
        assert!(trajectory(&orig, &[result("v", it, vec![])]).is_err());
    }
}
