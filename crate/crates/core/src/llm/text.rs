//! Small text utilities shared by the mock backends and response parsing.

/// Function words ignored by token-overlap scoring and the mock embedder.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "in", "is", "it", "its",
    "of", "on", "or", "that", "the", "their", "they", "this", "to", "was", "were", "with",
];

/// Lowercased alphanumeric runs.
pub fn raw_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// [`raw_tokens`] without stopwords.
pub fn content_tokens(text: &str) -> Vec<String> {
    raw_tokens(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Items of a numbered (`1.`, `2)`) or bulleted (`-`, `*`, `•`) list, in
/// order. Lines that are not list items are ignored.
pub fn parse_list(text: &str) -> Vec<String> {
    text.lines().filter_map(list_item).collect()
}

fn list_item(line: &str) -> Option<String> {
    let line = line.trim();
    let rest = if let Some(r) = line.strip_prefix(['-', '*', '•']) {
        r
    } else {
        let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits == 0 {
            return None;
        }
        line[digits..].strip_prefix(['.', ')'])?
    };
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let item = rest.trim().trim_matches('*').trim();
    (!item.is_empty()).then(|| item.to_string())
}
