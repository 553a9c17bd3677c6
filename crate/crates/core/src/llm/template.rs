//! Prompt templates and rendering.
//!
//! Templates are plain text with `{{slot}}` placeholders and optional
//! sections `{{#slot}}...{{/slot}}` that disappear when the slot is absent or
//! empty. Rendering is a single pass over the parsed template, so slot values
//! are never re-scanned for placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: missing mandatory slot {slot:?}")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("template {template}: prompt needs ~{tokens} tokens, budget is {budget}")]
    Oversize {
        template: TemplateId,
        tokens: usize,
        budget: usize,
    },
    #[error("malformed template: {0}")]
    Syntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TemplateId {
    Rec,
    Ep,
    Ip,
    Cf,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [TemplateId::Rec, TemplateId::Ep, TemplateId::Ip, TemplateId::Cf];

    pub fn source(self) -> &'static str {
        match self {
            TemplateId::Rec => include_str!("../../templates/rec.txt"),
            TemplateId::Ep => include_str!("../../templates/ep.txt"),
            TemplateId::Ip => include_str!("../../templates/ip.txt"),
            TemplateId::Cf => include_str!("../../templates/cf.txt"),
        }
    }

    pub fn mandatory_slots(self) -> &'static [&'static str] {
        match self {
            TemplateId::Rec => &["history", "num_candidates", "candidates"],
            TemplateId::Ep | TemplateId::Ip => &["history", "candidates", "prediction"],
            TemplateId::Cf => &["cf_items"],
        }
    }

    /// SHA-256 of the stored template text.
    pub fn hash(self) -> String {
        sha256_hex(self.source().as_bytes())
    }

    fn parsed(self) -> &'static [Segment] {
        static PARSED: OnceLock<Vec<Vec<Segment>>> = OnceLock::new();
        let all = PARSED.get_or_init(|| {
            TemplateId::ALL
                .iter()
                .map(|t| parse_template(t.source()).expect("bundled templates are well formed"))
                .collect()
        });
        &all[self as usize]
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::Rec => "REC",
            TemplateId::Ep => "EP",
            TemplateId::Ip => "IP",
            TemplateId::Cf => "CF",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(String),
    Section(String, Vec<Segment>),
}

fn parse_template(src: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut stack: Vec<(String, Vec<Segment>)> = vec![(String::new(), Vec::new())];
    let mut rest = src;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            stack.last_mut().unwrap().1.push(Segment::Text(rest[..start].to_string()));
        }
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| TemplateError::Syntax("unterminated placeholder".into()))?;
        let tag = &after[..end];
        if let Some(name) = tag.strip_prefix('#') {
            stack.push((name.to_string(), Vec::new()));
        } else if let Some(name) = tag.strip_prefix('/') {
            let (open, body) = stack.pop().unwrap();
            if open != name || stack.is_empty() {
                return Err(TemplateError::Syntax(format!("unbalanced section {name:?}")));
            }
            stack.last_mut().unwrap().1.push(Segment::Section(open, body));
        } else {
            stack.last_mut().unwrap().1.push(Segment::Slot(tag.to_string()));
        }
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        stack.last_mut().unwrap().1.push(Segment::Text(rest.to_string()));
    }
    if stack.len() != 1 {
        return Err(TemplateError::Syntax("unclosed section".into()));
    }
    Ok(stack.pop().unwrap().1)
}

fn present<'a>(slots: &'a BTreeMap<String, String>, name: &str) -> Option<&'a str> {
    slots.get(name).map(String::as_str).filter(|v| !v.is_empty())
}

fn emit(segments: &[Segment], slots: &BTreeMap<String, String>, out: &mut String) {
    for seg in segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot(name) => out.push_str(present(slots, name).unwrap_or("")),
            Segment::Section(name, body) => {
                if present(slots, name).is_some() {
                    emit(body, slots, out);
                }
            }
        }
    }
}

/// A fully rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub template_id: TemplateId,
    pub rendered_text: String,
    pub slot_values: BTreeMap<String, String>,
    pub token_estimate: usize,
    pub template_hash: String,
    /// Oldest history events removed to fit the token budget.
    pub truncated_history: usize,
}

/// Rough token count: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Substitutes raw slot strings into the template.
pub fn render_raw(template: TemplateId, slots: &BTreeMap<String, String>) -> Result<PromptInstance, TemplateError> {
    for slot in template.mandatory_slots() {
        if present(slots, slot).is_none() {
            return Err(TemplateError::MissingSlot {
                template,
                slot: slot.to_string(),
            });
        }
    }
    let mut out = String::new();
    emit(template.parsed(), slots, &mut out);
    Ok(PromptInstance {
        template_id: template,
        token_estimate: estimate_tokens(&out),
        rendered_text: out,
        slot_values: slots.iter().filter(|(_, v)| !v.is_empty()).map(|(k, v)| (k.clone(), v.clone())).collect(),
        template_hash: template.hash(),
        truncated_history: 0,
    })
}

/// Structured prompt content. Item texts are already in the perspective's
/// representation; list markers are added here.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSlots {
    /// Oldest first.
    pub history: Vec<String>,
    /// In presentation order; rendered with their 1-based bracket index.
    pub candidates: Vec<String>,
    pub prediction: Vec<String>,
    pub target: Option<String>,
    pub reflection: Option<String>,
    pub demos: Vec<String>,
}

fn lines(items: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from("\n");
    for line in items {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

pub fn history_block(history: &[String]) -> String {
    if history.is_empty() {
        return String::new();
    }
    lines(history.iter().map(|h| format!("- {h}")))
}

pub fn candidate_block(candidates: &[String]) -> String {
    if candidates.is_empty() {
        return String::new();
    }
    lines(candidates.iter().enumerate().map(|(i, c)| format!("[{}] {c}", i + 1)))
}

/// A ranked list in the same numbered format the response parser accepts.
pub fn numbered_block(items: &[String]) -> String {
    if items.is_empty() {
        return " (empty)".to_string();
    }
    lines(items.iter().enumerate().map(|(i, c)| format!("{}. {c}", i + 1)))
}

pub fn demo_block(demos: &[String]) -> String {
    if demos.is_empty() {
        return String::new();
    }
    lines(demos.iter().enumerate().map(|(i, d)| format!("[Demonstration {}] {d}", i + 1)))
}

impl PromptSlots {
    pub fn to_slot_map(&self, template: TemplateId) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match template {
            TemplateId::Rec => {
                m.insert("history".into(), history_block(&self.history));
                m.insert(
                    "num_candidates".into(),
                    if self.candidates.is_empty() {
                        String::new()
                    } else {
                        self.candidates.len().to_string()
                    },
                );
                m.insert("candidates".into(), candidate_block(&self.candidates));
                m.insert("reflection".into(), self.reflection.clone().unwrap_or_default());
            }
            TemplateId::Ep | TemplateId::Ip => {
                m.insert("history".into(), history_block(&self.history));
                m.insert("candidates".into(), candidate_block(&self.candidates));
                m.insert("prediction".into(), numbered_block(&self.prediction));
                m.insert("target".into(), self.target.clone().unwrap_or_default());
                m.insert("demos".into(), demo_block(&self.demos));
            }
            TemplateId::Cf => {
                let mut s = String::new();
                if !self.history.is_empty() {
                    s.push_str("\nHistory:");
                    s.push_str(&history_block(&self.history));
                    s.push_str("Candidates:");
                    s.push_str(&candidate_block(&self.candidates));
                    s.push_str("Past recommendation attempts:");
                    s.push_str(&numbered_block(&self.prediction));
                    if let Some(t) = &self.target {
                        s.push_str("User new interaction:\n");
                        s.push_str(t);
                        s.push('\n');
                    }
                }
                m.insert("cf_items".into(), s);
                m.insert("demos".into(), demo_block(&self.demos));
            }
        }
        m
    }
}

/// Renders structured slots, dropping the oldest history events first until
/// the prompt fits `token_budget`. Candidates are never dropped.
pub fn render(template: TemplateId, slots: &PromptSlots, token_budget: Option<usize>) -> Result<PromptInstance, TemplateError> {
    let mut working = slots.clone();
    let mut dropped = 0;
    loop {
        let mut prompt = render_raw(template, &working.to_slot_map(template))?;
        match token_budget {
            Some(budget) if prompt.token_estimate > budget => {
                if working.history.len() <= 1 {
                    return Err(TemplateError::Oversize {
                        template,
                        tokens: prompt.token_estimate,
                        budget,
                    });
                }
                working.history.remove(0);
                dropped += 1;
            }
            _ => {
                prompt.truncated_history = dropped;
                return Ok(prompt);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec_slots() -> PromptSlots {
        PromptSlots {
            history: vec!["A".into(), "B".into()],
            candidates: vec!["X".into(), "Y".into()],
            ..Default::default()
        }
    }

    #[test]
    fn bundled_templates_parse_and_have_mandatory_slots() {
        for t in TemplateId::ALL {
            let segs = t.parsed();
            assert!(!segs.is_empty());
            for slot in t.mandatory_slots() {
                assert!(t.source().contains(&format!("{{{{{slot}}}}}")), "{t} lacks {slot}");
            }
        }
    }

    #[test]
    fn rec_without_reflection_elides_the_sentence() {
        let p = render(TemplateId::Rec, &rec_slots(), None).unwrap();
        assert!(!p.rendered_text.contains("Reflections on the past"));
        assert!(p.rendered_text.contains("There are now 2 candidate items"));
        assert!(p.rendered_text.contains("[1] X\n[2] Y\n"));

        let mut with = rec_slots();
        with.reflection = Some("Prefers sequels".into());
        let p = render(TemplateId::Rec, &with, None).unwrap();
        assert!(p
            .rendered_text
            .contains("Reflections on the past recommendation attempt for this user (if any): Prefers sequels. There are now"));
    }

    #[test]
    fn empty_and_absent_optional_slots_render_identically() {
        let mut empty = rec_slots();
        empty.reflection = Some(String::new());
        assert_eq!(
            render(TemplateId::Rec, &empty, None).unwrap().rendered_text,
            render(TemplateId::Rec, &rec_slots(), None).unwrap().rendered_text
        );
    }

    #[test]
    fn ep_history_titles_appear_verbatim() {
        let slots = PromptSlots {
            history: vec!["Street Fighter 5 — fighting game".into(), "Stardew Valley — farming".into()],
            candidates: vec!["X — x".into()],
            prediction: vec!["X — x".into()],
            target: Some("Y — y".into()),
            ..Default::default()
        };
        let p = render(TemplateId::Ep, &slots, None).unwrap();
        assert!(p.rendered_text.contains("Street Fighter 5 — fighting game"));
        assert!(p.rendered_text.contains("Stardew Valley — farming"));
        assert!(!p.rendered_text.contains("demonstrations"));
        assert!(p.rendered_text.ends_with("Your reflection:"));
    }

    #[test]
    fn placeholder_text_in_slot_is_not_substituted_again() {
        let mut slots = rec_slots();
        slots.history = vec!["{{candidates}}".into(), "{{#reflection}}x{{/reflection}}".into()];
        let p = render(TemplateId::Rec, &slots, None).unwrap();
        assert_eq!(p.rendered_text.matches("{{candidates}}").count(), 1);
        assert!(p.rendered_text.contains("- {{#reflection}}x{{/reflection}}\n"));
        assert_eq!(p.rendered_text.matches("[1] X").count(), 1);
    }

    #[test]
    fn missing_mandatory_slot() {
        let slots = PromptSlots {
            candidates: vec!["X".into()],
            ..Default::default()
        };
        assert_eq!(
            render(TemplateId::Rec, &slots, None).unwrap_err(),
            TemplateError::MissingSlot {
                template: TemplateId::Rec,
                slot: "history".into()
            }
        );
    }

    #[test]
    fn overflow_drops_oldest_history_first() {
        let mut slots = rec_slots();
        slots.history = (0..40).map(|i| format!("History item number {i:02} with a long title")).collect();
        let full = render(TemplateId::Rec, &slots, None).unwrap();
        let budget = full.token_estimate - 30;
        let p = render(TemplateId::Rec, &slots, Some(budget)).unwrap();
        assert!(p.token_estimate <= budget);
        assert!(p.truncated_history > 0);
        assert!(!p.rendered_text.contains("number 00"));
        assert!(p.rendered_text.contains("number 39"));
        assert!(p.rendered_text.contains("[2] Y"));
        assert!(matches!(
            render(TemplateId::Rec, &slots, Some(10)),
            Err(TemplateError::Oversize { .. })
        ));
    }

    #[test]
    fn unbalanced_templates_are_rejected() {
        assert!(parse_template("a {{#x}} b").is_err());
        assert!(parse_template("a {{#x}} b {{/y}}").is_err());
        assert!(parse_template("a {{x").is_err());
    }
}
