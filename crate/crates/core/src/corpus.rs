//! Interaction data: loading, popularity statistics and evaluation episodes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const HISTORY_LEN: usize = 10;
pub const NUM_CANDIDATES: usize = 20;
pub const NUM_POSITIVES: usize = 2;
pub const NUM_NEGATIVES: usize = NUM_CANDIDATES - NUM_POSITIVES;
pub const HEAD_FRACTION: f64 = 0.15;
pub const TAIL_FRACTION: f64 = 0.50;
/// Smallest item population for which head and tail are non-empty and disjoint.
pub const MIN_SPLIT_POPULATION: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("empty dataset")]
    Empty,
    #[error("population too small to split ({0} items, need at least {MIN_SPLIT_POPULATION})")]
    PopulationTooSmall(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

/// One `(user, item, feedback)` observation.
///
/// Feedback is kept as opaque text: numeric ratings are rendered with their
/// JSON spelling and it only ever reaches prompts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub feedback: Option<String>,
    pub ts: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub title: Option<String>,
    pub attrs: BTreeMap<String, String>,
}

/// Wire row for both JSONL and CSV input.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    #[serde(default)]
    pub feedback: Option<serde_json::Value>,
    #[serde(default)]
    pub ts: Option<i64>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub attrs: Option<BTreeMap<String, serde_json::Value>>,
    /// Optional free-text user profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct CsvRecord {
    user: String,
    item: String,
    #[serde(default)]
    feedback: Option<String>,
    #[serde(default)]
    ts: Option<i64>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    attrs: Option<String>,
    #[serde(default)]
    profile: Option<String>,
}

fn value_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    interactions: Vec<Interaction>,
    /// user -> interaction indices in temporal (else file) order.
    user_index: BTreeMap<String, Vec<usize>>,
    /// item -> interaction indices in file order.
    item_index: BTreeMap<String, Vec<usize>>,
    item_meta: BTreeMap<String, ItemMeta>,
    user_profiles: BTreeMap<String, String>,
}

impl InteractionDataset {
    /// Builds the indices; exact duplicate rows are dropped.
    pub fn new(
        rows: Vec<Interaction>,
        item_meta: BTreeMap<String, ItemMeta>,
        user_profiles: BTreeMap<String, String>,
    ) -> Self {
        let mut seen = HashSet::new();
        let interactions: Vec<Interaction> =
            rows.into_iter().filter(|r| seen.insert(r.clone())).collect();
        let mut user_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut item_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in interactions.iter().enumerate() {
            user_index.entry(r.user.clone()).or_default().push(i);
            item_index.entry(r.item.clone()).or_default().push(i);
        }
        for idx in user_index.values_mut() {
            if idx.iter().all(|&i| interactions[i].ts.is_some()) {
                // stable: equal timestamps keep file order
                idx.sort_by_key(|&i| interactions[i].ts);
            }
        }
        Self {
            interactions,
            user_index,
            item_index,
            item_meta,
            user_profiles,
        }
    }

    pub fn from_records(records: Vec<InteractionRecord>) -> Self {
        let mut rows = Vec::with_capacity(records.len());
        let mut meta: BTreeMap<String, ItemMeta> = BTreeMap::new();
        let mut profiles = BTreeMap::new();
        for r in records {
            let m = meta.entry(r.item.clone()).or_default();
            if let Some(t) = r.title {
                m.title.get_or_insert(t);
            }
            for (k, v) in r.attrs.unwrap_or_default() {
                if let Some(text) = value_text(&v) {
                    m.attrs.entry(k).or_insert(text);
                }
            }
            if let Some(p) = r.profile {
                profiles.entry(r.user.clone()).or_insert(p);
            }
            rows.push(Interaction {
                user: r.user,
                item: r.item,
                feedback: r.feedback.as_ref().and_then(value_text),
                ts: r.ts,
            });
        }
        Self::new(rows, meta, profiles)
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_index.len().max(self.item_meta.len())
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    /// Every known item id, including catalogue items without interactions.
    pub fn items(&self) -> Vec<&str> {
        let mut all: BTreeSet<&str> = self.item_index.keys().map(String::as_str).collect();
        all.extend(self.item_meta.keys().map(String::as_str));
        all.into_iter().collect()
    }

    /// The user's interactions in temporal order.
    pub fn user_interactions(&self, user: &str) -> Vec<&Interaction> {
        self.user_index
            .get(user)
            .map(|idx| idx.iter().map(|&i| &self.interactions[i]).collect())
            .unwrap_or_default()
    }

    pub fn item_interactions(&self, item: &str) -> &[usize] {
        self.item_index.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn item_meta(&self, item: &str) -> Option<&ItemMeta> {
        self.item_meta.get(item)
    }

    pub fn all_item_meta(&self) -> &BTreeMap<String, ItemMeta> {
        &self.item_meta
    }

    pub fn user_profile(&self, user: &str) -> Option<&str> {
        self.user_profiles.get(user).map(String::as_str)
    }

    pub fn user_profiles(&self) -> &BTreeMap<String, String> {
        &self.user_profiles
    }

    /// Display title, falling back to the id.
    pub fn title<'a>(&'a self, item: &'a str) -> &'a str {
        self.item_meta
            .get(item)
            .and_then(|m| m.title.as_deref())
            .unwrap_or(item)
    }

    /// Interaction counts per item (items without interactions are absent).
    pub fn item_frequencies(&self) -> BTreeMap<String, u64> {
        self.item_index
            .iter()
            .map(|(k, v)| (k.clone(), v.len() as u64))
            .collect()
    }

    /// Copy without the given `(user, item)` pairs, keeping catalogue metadata.
    pub fn without_pairs(&self, held_out: &HashSet<(String, String)>) -> Self {
        let rows = self
            .interactions
            .iter()
            .filter(|r| !held_out.contains(&(r.user.clone(), r.item.clone())))
            .cloned()
            .collect();
        Self::new(rows, self.item_meta.clone(), self.user_profiles.clone())
    }

    pub fn to_records(&self) -> Vec<InteractionRecord> {
        let mut titled = HashSet::new();
        self.interactions
            .iter()
            .map(|r| {
                let first = titled.insert(r.item.clone());
                let meta = self.item_meta.get(&r.item).filter(|_| first);
                InteractionRecord {
                    user: r.user.clone(),
                    item: r.item.clone(),
                    feedback: r.feedback.clone().map(serde_json::Value::String),
                    ts: r.ts,
                    title: meta.and_then(|m| m.title.clone()),
                    attrs: meta.filter(|m| !m.attrs.is_empty()).map(|m| {
                        m.attrs
                            .iter()
                            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                            .collect()
                    }),
                    profile: None,
                }
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        let mut profiled = HashSet::new();
        for mut rec in self.to_records() {
            if profiled.insert(rec.user.clone()) {
                rec.profile = self.user_profiles.get(&rec.user).cloned();
            }
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Reads an interaction file in the declared format.
pub fn load_interactions(path: &Path, format: Format) -> Result<InteractionDataset, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, format)
}

pub fn parse_interactions(text: &str, format: Format) -> Result<InteractionDataset, CorpusError> {
    let records = match format {
        Format::Jsonl => parse_jsonl(text)?,
        Format::Csv => parse_csv(text)?,
    };
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(InteractionDataset::from_records(records))
}

fn check_ids(r: &InteractionRecord, line: usize) -> Result<(), CorpusError> {
    if r.user.trim().is_empty() || r.item.trim().is_empty() {
        return Err(CorpusError::Malformed {
            line,
            msg: "user and item must be non-empty".into(),
        });
    }
    Ok(())
}

fn parse_jsonl(text: &str) -> Result<Vec<InteractionRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?;
        check_ids(&rec, i + 1)?;
        out.push(rec);
    }
    Ok(out)
}

fn parse_csv(text: &str) -> Result<Vec<InteractionRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRecord>() {
        let row = row.map_err(|e| CorpusError::Malformed {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = out.len() + 2;
        let empty_none = |s: Option<String>| s.filter(|v| !v.is_empty());
        let attrs = match empty_none(row.attrs) {
            None => None,
            Some(raw) => Some(serde_json::from_str(&raw).map_err(|e| CorpusError::Malformed {
                line,
                msg: format!("attrs must be a JSON object: {e}"),
            })?),
        };
        let rec = InteractionRecord {
            user: row.user,
            item: row.item,
            feedback: empty_none(row.feedback).map(serde_json::Value::String),
            ts: row.ts,
            title: empty_none(row.title),
            attrs,
            profile: empty_none(row.profile),
        };
        check_ids(&rec, line)?;
        out.push(rec);
    }
    Ok(out)
}

/// Logarithm used for popularity normalization. Min-max scaling cancels the
/// base, so the choice only documents a convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    Natural,
    Two,
}

impl LogBase {
    fn apply(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// Min-max normalized log frequency; all scores are 0.5 when every item has
/// the same frequency.
pub fn popularity_scores(freq: &BTreeMap<String, u64>, base: LogBase) -> BTreeMap<String, f64> {
    let logs: Vec<(String, f64)> = freq
        .iter()
        .map(|(k, &f)| (k.clone(), base.apply(f.max(1) as f64)))
        .collect();
    let min = logs.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let max = logs.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    logs.into_iter()
        .map(|(k, v)| {
            let s = if max > min { (v - min) / (max - min) } else { 0.5 };
            (k, s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub freq: BTreeMap<String, u64>,
    pub score: BTreeMap<String, f64>,
    pub head: BTreeSet<String>,
    pub tail: BTreeSet<String>,
}

impl PopularityTable {
    /// Score of an item; items without interactions get the minimum, 0.
    pub fn score_of(&self, item: &str) -> f64 {
        self.score.get(item).copied().unwrap_or(0.0)
    }
}

/// Popularity from interaction counts. Head/tail sets are left empty when the
/// population is too small to split.
pub fn compute_popularity(ds: &InteractionDataset) -> PopularityTable {
    let freq = ds.item_frequencies();
    let score = popularity_scores(&freq, LogBase::Natural);
    let (head, tail) = match split_head_tail(&freq, HEAD_FRACTION, TAIL_FRACTION) {
        Ok(split) => split,
        Err(e) => {
            log::warn!("head/tail split skipped: {e}");
            (BTreeSet::new(), BTreeSet::new())
        }
    };
    PopularityTable {
        freq,
        score,
        head,
        tail,
    }
}

/// Head = first `ceil(head_frac * n)` items by count descending (ties by id
/// ascending), tail = last `floor(tail_frac * n)`.
pub fn split_head_tail(
    freq: &BTreeMap<String, u64>,
    head_frac: f64,
    tail_frac: f64,
) -> Result<(BTreeSet<String>, BTreeSet<String>), CorpusError> {
    let n = freq.len();
    if n < MIN_SPLIT_POPULATION {
        return Err(CorpusError::PopulationTooSmall(n));
    }
    let mut order: Vec<(&String, u64)> = freq.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    // Nudge away from float error so that 0.15 * 20 stays 3.
    let n_head = ((head_frac * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_tail = ((tail_frac * n as f64) + 1e-9).floor().max(0.0) as usize;
    let n_head = n_head.min(n);
    let n_tail = n_tail.min(n - n_head);
    let head = order[..n_head].iter().map(|(k, _)| (*k).clone()).collect();
    let tail = order[n - n_tail..].iter().map(|(k, _)| (*k).clone()).collect();
    Ok((head, tail))
}

/// One evaluation unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub user: String,
    pub history: Vec<String>,
    pub candidates: Vec<String>,
    pub positives: Vec<String>,
}

impl Episode {
    pub fn is_positive(&self, item: &str) -> bool {
        self.positives.iter().any(|p| p == item)
    }
}

/// Per-user item sequence with repeats collapsed onto their last occurrence.
fn distinct_sequence(ds: &InteractionDataset, user: &str) -> Vec<String> {
    let rows = ds.user_interactions(user);
    let mut last = BTreeMap::new();
    for (pos, r) in rows.iter().enumerate() {
        last.insert(r.item.as_str(), pos);
    }
    rows.iter()
        .enumerate()
        .filter(|(pos, r)| last[r.item.as_str()] == *pos)
        .map(|(_, r)| r.item.clone())
        .collect()
}

/// Temporal leave-last-two-out episodes with 18 sampled negatives each.
///
/// Users with fewer than three distinct items, or too few unseen items to
/// draw negatives from, are skipped.
pub fn build_episodes(ds: &InteractionDataset, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalogue = ds.items();
    let mut out = Vec::new();
    for user in ds.users() {
        let seq = distinct_sequence(ds, user);
        if seq.len() < NUM_POSITIVES + 1 {
            log::info!("skipping user {user}: {} distinct interactions", seq.len());
            continue;
        }
        let seen: HashSet<&str> = ds.user_interactions(user).iter().map(|r| r.item.as_str()).collect();
        let pool: Vec<&str> = catalogue.iter().copied().filter(|i| !seen.contains(i)).collect();
        if pool.len() < NUM_NEGATIVES {
            log::info!("skipping user {user}: only {} unseen items", pool.len());
            continue;
        }
        let split = seq.len() - NUM_POSITIVES;
        let positives = seq[split..].to_vec();
        let history = seq[split.saturating_sub(HISTORY_LEN)..split].to_vec();
        let mut candidates: Vec<String> = pool
            .choose_multiple(&mut rng, NUM_NEGATIVES)
            .map(|s| s.to_string())
            .collect();
        candidates.extend(positives.iter().cloned());
        candidates.shuffle(&mut rng);
        out.push(Episode {
            user: user.to_string(),
            history,
            candidates,
            positives,
        });
    }
    out
}

/// The dataset with every episode's held-out positives removed.
pub fn training_split(ds: &InteractionDataset, episodes: &[Episode]) -> InteractionDataset {
    let held: HashSet<(String, String)> = episodes
        .iter()
        .flat_map(|e| e.positives.iter().map(move |p| (e.user.clone(), p.clone())))
        .collect();
    ds.without_pairs(&held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn jsonl(rows: &[(&str, &str, i64)]) -> String {
        rows.iter()
            .map(|(u, i, t)| format!(r#"{{"user":"{u}","item":"{i}","feedback":null,"ts":{t}}}"#))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn loads_small_jsonl() {
        let ds = parse_interactions(&jsonl(&[("u1", "a", 1), ("u1", "b", 2), ("u2", "c", 3)]), Format::Jsonl)
            .unwrap();
        assert_eq!((ds.len(), ds.num_users(), ds.num_items()), (3, 2, 3));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_interactions("", Format::Jsonl), Err(CorpusError::Empty)));
        assert!(matches!(
            parse_interactions("user,item,feedback,ts,title,attrs\n", Format::Csv),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn exact_duplicates_are_dropped() {
        let row = r#"{"user":"u","item":"i","feedback":5,"ts":7}"#;
        let ds = parse_interactions(&format!("{row}\n{row}\n"), Format::Jsonl).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.interactions()[0].feedback.as_deref(), Some("5"));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let text = format!("{}\n{{not json}}\n", jsonl(&[("u", "i", 1)]));
        match parse_interactions(&text, Format::Jsonl) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = r#"{"user":"","item":"i"}"#;
        assert!(matches!(
            parse_interactions(text, Format::Jsonl),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn csv_with_attrs() {
        let text = "user,item,feedback,ts,title,attrs\n\
                    u1,m1,great,10,Heat,\"{\"\"genre\"\":\"\"crime\"\"}\"\n\
                    u1,m2,,5,Alien,\n";
        let ds = parse_interactions(text, Format::Csv).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.title("m1"), "Heat");
        assert_eq!(ds.item_meta("m1").unwrap().attrs["genre"], "crime");
        let order: Vec<_> = ds.user_interactions("u1").iter().map(|r| r.item.as_str()).collect();
        assert_eq!(order, ["m2", "m1"]);
    }

    fn freq(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn popularity_examples() {
        let s = popularity_scores(&freq(&[("A", 1), ("B", 10), ("C", 100)]), LogBase::Natural);
        assert_eq!(s["A"], 0.0);
        assert!((s["B"] - 0.5).abs() < 1e-12);
        assert_eq!(s["C"], 1.0);

        let s = popularity_scores(&freq(&[("A", 4), ("B", 4)]), LogBase::Natural);
        assert!(s.values().all(|&v| v == 0.5));

        // (ln 5 - ln 2) / (ln 9 - ln 2)
        let s = popularity_scores(&freq(&[("A", 2), ("B", 5), ("C", 9)]), LogBase::Natural);
        let oracle = (5f64.ln() - 2f64.ln()) / (9f64.ln() - 2f64.ln());
        assert!((s["B"] - oracle).abs() < 1e-12);
        assert!((s["B"] - 0.6092).abs() < 1e-4);
    }

    #[test]
    fn head_tail_sizes() {
        let f: BTreeMap<String, u64> = (0..20).map(|i| (format!("i{i:02}"), 100 - i)).collect();
        let (h, t) = split_head_tail(&f, HEAD_FRACTION, TAIL_FRACTION).unwrap();
        assert_eq!((h.len(), t.len()), (3, 10));

        let f: BTreeMap<String, u64> = (0..7).map(|i| (format!("i{i}"), 10 - i)).collect();
        let (h, t) = split_head_tail(&f, HEAD_FRACTION, TAIL_FRACTION).unwrap();
        assert_eq!((h.len(), t.len()), (2, 3));
        assert!(h.is_disjoint(&t));

        let f: BTreeMap<String, u64> = (0..6).map(|i| (format!("i{i}"), 1)).collect();
        assert!(matches!(
            split_head_tail(&f, HEAD_FRACTION, TAIL_FRACTION),
            Err(CorpusError::PopulationTooSmall(6))
        ));
    }

    #[test]
    fn head_boundary_tie_prefers_lower_id() {
        // 7 items -> head of 2; "b" and "c" tie for the second slot.
        let f = freq(&[("a", 9), ("c", 5), ("b", 5), ("d", 1), ("e", 1), ("f", 1), ("g", 1)]);
        let (h, _) = split_head_tail(&f, HEAD_FRACTION, TAIL_FRACTION).unwrap();
        assert_eq!(h, ["a", "b"].iter().map(|s| s.to_string()).collect());
    }

    fn dataset_with(user_items: usize, catalogue: usize) -> InteractionDataset {
        let mut rows = Vec::new();
        for t in 0..user_items {
            rows.push(Interaction { user: "u".into(), item: format!("i{t:03}"), feedback: None, ts: Some(t as i64) });
        }
        for t in 0..catalogue {
            rows.push(Interaction { user: "other".into(), item: format!("x{t:03}"), feedback: None, ts: Some(t as i64) });
        }
        InteractionDataset::new(rows, BTreeMap::new(), BTreeMap::new())
    }

    #[test]
    fn episode_windowing() {
        let ds = dataset_with(15, 40);
        let eps = build_episodes(&ds, 3);
        let e = eps.iter().find(|e| e.user == "u").unwrap();
        let expect_hist: Vec<String> = (3..13).map(|t| format!("i{t:03}")).collect();
        assert_eq!(e.history, expect_hist);
        assert_eq!(e.positives, vec!["i013".to_string(), "i014".to_string()]);
        assert_eq!(e.candidates.len(), NUM_CANDIDATES);
        assert!(e.positives.iter().all(|p| e.candidates.contains(p)));
        assert!(e.candidates.iter().all(|c| !e.history.contains(c)));
        let uniq: HashSet<_> = e.candidates.iter().collect();
        assert_eq!(uniq.len(), NUM_CANDIDATES);
    }

    #[test]
    fn short_users_are_skipped() {
        let ds = dataset_with(2, 40);
        assert!(build_episodes(&ds, 1).iter().all(|e| e.user != "u"));
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let ds = dataset_with(12, 60);
        let a = serde_json::to_vec(&build_episodes(&ds, 11)).unwrap();
        let b = serde_json::to_vec(&build_episodes(&ds, 11)).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&build_episodes(&ds, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn training_split_removes_positives() {
        let ds = dataset_with(12, 60);
        let eps = build_episodes(&ds, 1);
        let train = training_split(&ds, &eps);
        assert_eq!(train.len(), ds.len() - 2 * eps.len());
        assert!(train.user_interactions("u").iter().all(|r| r.item != "i011"));
    }

    proptest! {
        #[test]
        fn popularity_range_and_monotonicity(counts in prop::collection::vec(1u64..10_000, 1..60)) {
            let f: BTreeMap<String, u64> =
                counts.iter().enumerate().map(|(i, c)| (format!("i{i}"), *c)).collect();
            let s = popularity_scores(&f, LogBase::Natural);
            let s2 = popularity_scores(&f, LogBase::Two);
            for (k, &fa) in &f {
                prop_assert!((0.0..=1.0).contains(&s[k]));
                prop_assert!((s[k] - s2[k]).abs() < 1e-6);
                for (k2, &fb) in &f {
                    if fa >= fb {
                        prop_assert!(s[k] >= s[k2]);
                    }
                }
            }
        }

        #[test]
        fn head_tail_disjoint(counts in prop::collection::vec(1u64..50, 7..80)) {
            let f: BTreeMap<String, u64> =
                counts.iter().enumerate().map(|(i, c)| (format!("i{i}"), *c)).collect();
            let (h, t) = split_head_tail(&f, HEAD_FRACTION, TAIL_FRACTION).unwrap();
            prop_assert!(h.is_disjoint(&t));
            prop_assert!(h.len() + t.len() <= f.len());
            prop_assert!(!h.is_empty() && !t.is_empty());
        }
    }
}
