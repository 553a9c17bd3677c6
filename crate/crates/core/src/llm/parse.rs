//! Maps free-form ranking responses back onto the candidate set.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Phase;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub matched: usize,
    pub dropped_lines: usize,
    pub deduped: usize,
}

/// An LLM ranking restricted to the candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub phase: Phase,
    pub item_ids: Vec<String>,
    pub raw_response: String,
    pub parse_report: ParseReport,
}

/// A candidate as shown in the prompt: presentation position is its index in
/// the slice, rendered 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateRef {
    pub item_id: String,
    pub title: String,
}

/// Lowercase, punctuation stripped, whitespace collapsed.
pub fn normalize_title(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips a leading "1.", "1)", "-", "*" or "•" marker. Returns the remainder
/// and whether a marker was present.
fn strip_list_marker(line: &str) -> (&str, bool) {
    let t = line.trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        for sep in ['.', ')', ':'] {
            if let Some(r) = rest.strip_prefix(sep) {
                return (r.trim_start(), true);
            }
        }
        return (t, false);
    }
    for bullet in ['-', '*', '•', '+'] {
        if let Some(r) = t.strip_prefix(bullet) {
            if r.starts_with(char::is_whitespace) {
                return (r.trim_start(), true);
            }
        }
    }
    (t, false)
}

/// Splits a leading "[17]" index off.
fn strip_bracket_index(text: &str) -> (Option<usize>, &str) {
    if let Some(rest) = text.strip_prefix('[') {
        if let Some(end) = rest.find(']') {
            if let Ok(n) = rest[..end].trim().parse::<usize>() {
                return (Some(n), rest[end + 1..].trim_start());
            }
        }
    }
    (None, text)
}

fn unwrap_decoration(text: &str) -> &str {
    text.trim()
        .trim_matches(|c| c == '*' || c == '"' || c == '\'' || c == '`')
        .trim()
}

/// Numbered or bulleted lines are matched to candidates by exact title, then
/// by normalized title, then by bracket index. Unmatched lines are dropped and
/// repeated items keep their first position. When the response has no list
/// markers at all, every non-empty line is treated as an entry.
pub fn parse_ranking(raw_response: &str, user_id: &str, phase: Phase, candidates: &[CandidateRef]) -> RankedList {
    let mut exact: HashMap<&str, usize> = HashMap::new();
    let mut normalized: HashMap<String, usize> = HashMap::new();
    for (i, c) in candidates.iter().enumerate() {
        exact.entry(c.title.as_str()).or_insert(i);
        normalized.entry(normalize_title(&c.title)).or_insert(i);
    }

    let entries: Vec<(&str, bool)> = raw_response
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(strip_list_marker)
        .collect();
    let any_marked = entries.iter().any(|(_, marked)| *marked);

    let mut report = ParseReport::default();
    let mut seen = HashSet::new();
    let mut item_ids = Vec::new();
    for (text, marked) in entries {
        if any_marked && !marked {
            continue;
        }
        let (index, rest) = strip_bracket_index(unwrap_decoration(text));
        let rest = unwrap_decoration(rest);
        let hit = exact
            .get(rest)
            .copied()
            .or_else(|| normalized.get(&normalize_title(rest)).copied())
            .or_else(|| index.filter(|&n| n >= 1 && n <= candidates.len()).map(|n| n - 1));
        match hit {
            Some(pos) => {
                report.matched += 1;
                if seen.insert(pos) {
                    item_ids.push(candidates[pos].item_id.clone());
                } else {
                    report.deduped += 1;
                }
            }
            None => report.dropped_lines += 1,
        }
    }
    RankedList {
        user_id: user_id.to_string(),
        phase,
        item_ids,
        raw_response: raw_response.to_string(),
        parse_report: report,
    }
}
