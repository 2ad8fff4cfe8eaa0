//! Deterministic offline stand-ins for the chat model and the embedder.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::text::{content_tokens, raw_tokens};
use super::{ChatBackend, ChatRequest, Embedder, LlmError};

const ITEM_START: &str = "might have selected ";
const ITEM_END: &str = " as their next movie to watch.";
const EXPL_START: &str = "listed as ";
const CANDIDATES_START: &str = ".\nPlease rank the candidate movies listed below ";
const CANDIDATES_END: &str = ". Please start with the most recommended.";

const REVIEW_PREFIXES: &[&str] = &["The user", "This viewer", "They clearly"];
const ATTR_PREFIXES: &[&str] = &["Interested in", "Drawn to", "Has a taste for"];

fn fnv(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for p in parts {
        for &b in *p {
            h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
        }
        h = (h ^ 0xff).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// A pure function of `(prompt, seed)` that understands the two templates.
///
/// * explanation prompts: one reason per review sentence of the interacted
///   item, or one per attribute value when there is no review;
/// * ranking prompts: candidates by descending count of content tokens
///   shared with the explanations block, ties in prompt order.
#[derive(Debug, Clone, Copy)]
pub struct MockLlm {
    seed: u64,
}

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn respond(&self, prompt: &str) -> String {
        if let Some(item) = between(prompt, ITEM_START, ITEM_END) {
            self.explain(prompt, item)
        } else if let Some((expl, cands)) = ranking_blocks(prompt) {
            rank_by_overlap(expl, cands)
        } else {
            "I am not sure how to help with that.".to_string()
        }
    }

    fn explain(&self, prompt: &str, item: &str) -> String {
        let (_, fields) = split_item(item);
        let review = fields.iter().find(|(k, _)| *k == "review").map(|(_, v)| *v);
        let mut reasons = Vec::new();
        match review {
            Some(r) => {
                for (k, sentence) in r
                    .split(['.', '!', '?'])
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .enumerate()
                {
                    let h = fnv(self.seed, &[prompt.as_bytes(), &k.to_le_bytes()]);
                    let prefix = REVIEW_PREFIXES[(h % REVIEW_PREFIXES.len() as u64) as usize];
                    reasons.push(format!("{prefix} {}", lower_first(sentence)));
                }
            }
            None => {
                for (k, (_, v)) in fields.iter().enumerate() {
                    let h = fnv(self.seed, &[prompt.as_bytes(), &k.to_le_bytes()]);
                    let prefix = ATTR_PREFIXES[(h % ATTR_PREFIXES.len() as u64) as usize];
                    reasons.push(format!("{prefix} {v}"));
                }
            }
        }
        if reasons.is_empty() {
            reasons.push("Enjoys films similar to their viewing history".to_string());
        }
        numbered(&reasons)
    }
}

impl ChatBackend for MockLlm {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        Ok(self.respond(req.prompt()))
    }

    fn is_network(&self) -> bool {
        false
    }
}

/// Fails every request; exercises fallback paths.
#[derive(Debug, Clone, Copy, Default)]
pub struct FailingBackend;

impl ChatBackend for FailingBackend {
    fn complete(&self, _req: &ChatRequest) -> Result<String, LlmError> {
        Err(LlmError::Exhausted {
            attempts: 1,
            status: None,
            last: "backend disabled".into(),
        })
    }

    fn is_network(&self) -> bool {
        false
    }
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn between<'a>(s: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let a = s.find(start)? + start.len();
    let b = a + s[a..].find(end)?;
    Some(&s[a..b])
}

fn ranking_blocks(prompt: &str) -> Option<(&str, &str)> {
    let a = prompt.find(EXPL_START)? + EXPL_START.len();
    let mid = a + prompt[a..].find(CANDIDATES_START)?;
    let c = mid + CANDIDATES_START.len();
    let end = c + prompt[c..].rfind(CANDIDATES_END)?;
    Some((&prompt[a..mid], &prompt[c..end]))
}

/// `Title (k: v; ...)` into the title and its `(k, v)` fields.
fn split_item(item: &str) -> (&str, Vec<(&str, &str)>) {
    let item = item.trim();
    if let (Some(open), true) = (item.find(" ("), item.ends_with(')')) {
        let inner = &item[open + 2..item.len() - 1];
        let fields = inner
            .split("; ")
            .filter_map(|kv| kv.split_once(": "))
            .map(|(k, v)| (k.trim(), v.trim()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        (&item[..open], fields)
    } else {
        (item, Vec::new())
    }
}

fn rank_by_overlap(explanations: &str, candidates: &str) -> String {
    let vocab: BTreeSet<String> = content_tokens(explanations).into_iter().collect();
    let mut lines: Vec<(usize, usize, &str)> = candidates
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(pos, l)| {
            let toks: BTreeSet<String> = content_tokens(l).into_iter().collect();
            (toks.intersection(&vocab).count(), pos, l)
        })
        .collect();
    lines.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let ordered: Vec<String> = lines.into_iter().map(|(_, _, l)| l.to_string()).collect();
    numbered(&ordered)
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(k, s)| format!("{}. {s}", k + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Seeded bag-of-tokens random projection: each content token maps to a
/// fixed Gaussian vector; a text is the L2-normalized sum of its tokens.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv(self.seed, &[token.as_bytes()]));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut toks = content_tokens(text);
        if toks.is_empty() {
            toks = raw_tokens(text);
        }
        if toks.is_empty() {
            toks.push(String::new());
        }
        let mut v = vec![0.0f32; self.dim];
        for t in toks {
            for (a, b) in v.iter_mut().zip(self.token_vector(&t)) {
                *a += b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, LlmError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::template::{render, render_item, render_list, TemplateId, EXPLAIN_GEN_BODY, RECOMMEND_BODY};
    use crate::llm::text::parse_list;
    use std::collections::BTreeMap;

    #[test]
    fn markers_come_from_the_templates() {
        assert!(EXPLAIN_GEN_BODY.contains(ITEM_START) && EXPLAIN_GEN_BODY.contains(ITEM_END));
        assert!(RECOMMEND_BODY.contains(EXPL_START));
        assert!(RECOMMEND_BODY.contains(CANDIDATES_START) && RECOMMEND_BODY.ends_with(CANDIDATES_END));
    }

    fn rec_prompt(expl: &[&str], cands: &[&str]) -> String {
        render(
            TemplateId::Recommend,
            &BTreeMap::from([
                ("user profile", "unknown profile".to_string()),
                ("history interactions", render_list(&["Heat"])),
                ("explanations", render_list(expl)),
                ("candidate movies", render_list(cands)),
            ]),
        )
        .unwrap()
    }

    #[test]
    fn ranking_by_overlap() {
        let cands = ["Alpha (genre: space opera)", "Beta (genre: noir crime detective)", "Gamma (genre: romance)"];
        let out = MockLlm::new(0).respond(&rec_prompt(&["Loves noir crime detective stories"], &cands));
        assert_eq!(parse_list(&out)[0], cands[1]);
        // Empty block: prompt order.
        let out = MockLlm::new(0).respond(&rec_prompt(&[], &cands));
        assert_eq!(parse_list(&out), cands);
    }

    #[test]
    fn explanation_reasons() {
        let mk = |item: String| {
            render(
                TemplateId::ExplainGen,
                &BTreeMap::from([
                    ("user profile", "unknown profile".to_string()),
                    ("history interactions", "Heat".to_string()),
                    ("interacted item", item),
                ]),
            )
            .unwrap()
        };
        let attrs: BTreeMap<String, String> = [("a", "jazz"), ("b", "vinyl"), ("c", "trumpets")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let m = MockLlm::new(3);
        let out = m.respond(&mk(render_item("Blue", &attrs, None)));
        let reasons = parse_list(&out);
        assert_eq!(reasons.len(), 3);
        assert!(reasons[0].ends_with("jazz") && reasons[2].ends_with("trumpets"));
        assert_eq!(out, m.respond(&mk(render_item("Blue", &attrs, None))));

        let out = m.respond(&mk(render_item("Blue", &attrs, Some("Loved the noir mood. Great score"))));
        let reasons = parse_list(&out);
        assert_eq!(reasons.len(), 2);
        assert!(reasons[0].ends_with("loved the noir mood"));
        assert!(!out.contains("Blue"));
    }

    #[test]
    fn embedder_is_normalized_and_deterministic() {
        let e = MockEmbedder::new(16, 1);
        let a = e.embed_one("noir crime detective");
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(a, MockEmbedder::new(16, 1).embed_one("noir crime detective"));
        assert_eq!(a, e.embed_one("The noir, crime and detective"));
        assert_ne!(a, MockEmbedder::new(16, 2).embed_one("noir crime detective"));
    }
}
