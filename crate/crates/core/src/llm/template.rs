//! The two prompt bodies and their placeholder substitution.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::LlmError;

pub const EXPLAIN_GEN_BODY: &str = "The user with the profile {user profile} has previously watched the movie:\n\
{history interactions}\n\
Please analyze the user's viewing history and provide reasons for why they might have selected {interacted item} as their next movie to watch.\n\
Please list the reasons in a format that prevents data leakage, for example, do not reveal the movie name.";

pub const RECOMMEND_BODY: &str = "Based on the user profile {user profile}, user's previous viewing of the movies {history interactions}, and the reasons for potentially choosing to watch, listed as {explanations}.\n\
Please rank the candidate movies listed below {candidate movies}. Please start with the most recommended.";

/// Rendered when a user has no profile metadata.
pub const UNKNOWN_PROFILE: &str = "unknown profile";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ExplainGen,
    Recommend,
}

impl TemplateId {
    pub fn body(self) -> &'static str {
        match self {
            TemplateId::ExplainGen => EXPLAIN_GEN_BODY,
            TemplateId::Recommend => RECOMMEND_BODY,
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for seg in Segments::new(self.body()) {
            if let Segment::Field(name) = seg {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::ExplainGen => "explain_gen",
            TemplateId::Recommend => "recommend",
        })
    }
}

enum Segment<'a> {
    Text(&'a str),
    Field(&'a str),
}

struct Segments<'a> {
    rest: &'a str,
}

impl<'a> Segments<'a> {
    fn new(body: &'a str) -> Self {
        Self { rest: body }
    }
}

impl<'a> Iterator for Segments<'a> {
    type Item = Segment<'a>;

    fn next(&mut self) -> Option<Segment<'a>> {
        if self.rest.is_empty() {
            return None;
        }
        match self.rest.find('{') {
            Some(0) => {
                let end = self.rest.find('}').expect("template placeholders are closed");
                let name = &self.rest[1..end];
                self.rest = &self.rest[end + 1..];
                Some(Segment::Field(name))
            }
            Some(k) => {
                let text = &self.rest[..k];
                self.rest = &self.rest[k..];
                Some(Segment::Text(text))
            }
            None => {
                let text = self.rest;
                self.rest = "";
                Some(Segment::Text(text))
            }
        }
    }
}

/// Substitutes every placeholder of `id` from `fields`. Every placeholder
/// must be supplied and no unknown field may be passed.
pub fn render(id: TemplateId, fields: &BTreeMap<&str, String>) -> Result<String, LlmError> {
    let names = id.placeholders();
    if let Some(unknown) = fields.keys().find(|k| !names.contains(k)) {
        return Err(LlmError::UnknownField {
            template: id,
            field: unknown.to_string(),
        });
    }
    let mut out = String::with_capacity(id.body().len() + fields.values().map(String::len).sum::<usize>());
    for seg in Segments::new(id.body()) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Field(name) => {
                let value = fields.get(name).ok_or_else(|| LlmError::MissingField {
                    template: id,
                    field: name.to_string(),
                })?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

/// Lists are rendered one entry per line.
pub fn render_list<S: AsRef<str>>(entries: &[S]) -> String {
    entries
        .iter()
        .map(|s| s.as_ref())
        .collect::<Vec<_>>()
        .join("\n")
}

/// `Title (key: value; ...; review: feedback)`, or just the title when there
/// is nothing to add.
pub fn render_item(title: &str, attrs: &BTreeMap<String, String>, review: Option<&str>) -> String {
    let mut parts: Vec<String> = attrs
        .iter()
        .filter(|(_, v)| !v.trim().is_empty())
        .map(|(k, v)| format!("{k}: {}", v.trim()))
        .collect();
    if let Some(r) = review.map(str::trim).filter(|r| !r.is_empty()) {
        parts.push(format!("review: {r}"));
    }
    if parts.is_empty() {
        title.to_string()
    } else {
        format!("{title} ({})", parts.join("; "))
    }
}
