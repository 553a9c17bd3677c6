//! Scenario-driven stand-in for both LLMs.
//!
//! Each scenario fixes a hidden ranking rule for the recommendation prompt and
//! a rule for which reflections actually help. Reflection texts carry a
//! machine-readable marker so the recommendation side can tell what it was
//! given; everything is a pure function of (seed, prompt, user).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, LlmBackend, LlmError, TemplateId};
use crate::corpus::{Corpus, Phase, Split};
use crate::hashing::{sha256_hex, unit_hash};

pub const MARKER_PREFIX: &str = "[[mock-reflection";

/// Per-scenario knobs. Ranks are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScenario {
    pub id: String,
    /// Which perspectives (0 EP, 1 IP, 2 CF) help users of each group.
    /// Groups beyond the table get no helpful perspective.
    pub helpful_by_group: Vec<Vec<u8>>,
    /// Probability that a reflection from a helpful perspective is genuine.
    pub genuine_prob: f64,
    /// Same, when every demonstration in the prompt was genuine. With a
    /// mix, the probability interpolates linearly in the genuine share.
    pub demo_genuine_prob: f64,
    /// Probability that a non-helpful reflection happens to fix the
    /// validation target without generalizing to test.
    pub overfit_prob: f64,
    /// Target rank reached under a genuine reflection.
    pub genuine_rank: usize,
    /// Rank reached by an overfit reflection on the validation target.
    pub overfit_rank: usize,
    /// Extra ranks the target loses when two or more reflections are pasted
    /// into one prompt. Zero disables the penalty.
    pub concat_penalty: usize,
    /// Whether the recommender reads reflections at all.
    pub reflections_active: bool,
}

impl MockScenario {
    pub fn by_id(id: &str) -> Result<Self, LlmError> {
        let base = MockScenario {
            id: id.to_string(),
            helpful_by_group: vec![],
            genuine_prob: 1.0,
            demo_genuine_prob: 1.0,
            overfit_prob: 0.0,
            genuine_rank: 1,
            overfit_rank: 1,
            concat_penalty: 0,
            reflections_active: true,
        };
        Ok(match id {
            "neutral" => MockScenario {
                helpful_by_group: vec![vec![0, 1, 2]; 3],
                reflections_active: false,
                ..base
            },
            // CF helps group 0 ("cluster A") only.
            "cf-best" => MockScenario {
                helpful_by_group: vec![vec![2]],
                ..base
            },
            "demo-helps" => MockScenario {
                helpful_by_group: vec![vec![0, 1, 2]; 3],
                genuine_prob: 0.1,
                demo_genuine_prob: 0.95,
                ..base
            },
            "contextual" => MockScenario {
                helpful_by_group: vec![vec![0], vec![1], vec![2]],
                genuine_prob: 0.8,
                demo_genuine_prob: 0.8,
                overfit_prob: 0.08,
                genuine_rank: 2,
                overfit_rank: 1,
                concat_penalty: 6,
                ..base
            },
            other => return Err(LlmError::UnknownScenario(other.to_string())),
        })
    }

    pub fn ids() -> &'static [&'static str] {
        &["neutral", "cf-best", "demo-helps", "contextual"]
    }

    pub fn is_helpful(&self, group: usize, perspective: u8) -> bool {
        self.helpful_by_group.get(group).is_some_and(|h| h.contains(&perspective))
    }
}

/// Parsed reflection marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marker {
    pub user_id: String,
    pub perspective: u8,
    pub genuine: bool,
    pub overfit: bool,
}

pub fn parse_markers(text: &str) -> Vec<Marker> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(MARKER_PREFIX) {
        let body_start = start + MARKER_PREFIX.len();
        let Some(len) = rest[body_start..].find("]]") else { break };
        let body = &rest[body_start..body_start + len];
        let fields: HashMap<&str, &str> = body.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let perspective = match fields.get("perspective").copied() {
            Some("EP") => Some(0),
            Some("IP") => Some(1),
            Some("CF") => Some(2),
            _ => None,
        };
        if let Some(perspective) = perspective {
            out.push(Marker {
                user_id: fields.get("user").unwrap_or(&"").to_string(),
                perspective,
                genuine: fields.get("genuine") == Some(&"1"),
                overfit: fields.get("overfit") == Some(&"1"),
            });
        }
        rest = &rest[body_start + len + 2..];
    }
    out
}

#[derive(Debug, Clone)]
struct UserFacts {
    validation_target: String,
    test_target: String,
    group: usize,
}

pub struct MockBackend {
    scenario: MockScenario,
    seed: u64,
    users: HashMap<String, UserFacts>,
    title_to_item: HashMap<String, String>,
    item_title: HashMap<String, String>,
}

/// Builds the mock for `scenario_id` over a corpus and its splits.
pub fn mock_policy(scenario_id: &str, corpus: &Corpus, splits: &[Split], seed: u64) -> Result<MockBackend, LlmError> {
    let scenario = MockScenario::by_id(scenario_id)?;
    Ok(MockBackend::new(scenario, corpus, splits, seed))
}

/// Dominant "category" attribute of the training prefix, as an index into
/// the sorted list of all categories. Users without the attribute land in
/// group 0.
pub fn user_group(corpus: &Corpus, split: &Split) -> usize {
    let mut categories: Vec<&str> = corpus
        .items()
        .iter()
        .filter_map(|i| i.attributes.get("category").map(String::as_str))
        .collect();
    categories.sort_unstable();
    categories.dedup();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in &split.train_prefix {
        if let Some(c) = corpus.item(id).and_then(|i| i.attributes.get("category")) {
            *counts.entry(c.as_str()).or_default() += 1;
        }
    }
    // max count, ties to the alphabetically first category
    let best = counts.iter().fold(None, |acc: Option<(&str, usize)>, (&c, &n)| match acc {
        Some((_, m)) if m >= n => acc,
        _ => Some((c, n)),
    });
    best.and_then(|(c, _)| categories.iter().position(|x| *x == c)).unwrap_or(0)
}

impl MockBackend {
    pub fn new(scenario: MockScenario, corpus: &Corpus, splits: &[Split], seed: u64) -> Self {
        let users = splits
            .iter()
            .map(|s| {
                (
                    s.user_id.clone(),
                    UserFacts {
                        validation_target: s.validation_target.clone(),
                        test_target: s.test_target.clone(),
                        group: user_group(corpus, s),
                    },
                )
            })
            .collect();
        let mut title_to_item = HashMap::new();
        let mut item_title = HashMap::new();
        for item in corpus.items() {
            title_to_item.entry(item.title.clone()).or_insert_with(|| item.item_id.clone());
            item_title.insert(item.item_id.clone(), item.title.clone());
        }
        Self {
            scenario,
            seed,
            users,
            title_to_item,
            item_title,
        }
    }

    pub fn scenario(&self) -> &MockScenario {
        &self.scenario
    }

    pub fn group_of(&self, user_id: &str) -> Option<usize> {
        self.users.get(user_id).map(|u| u.group)
    }

    /// Rank the target would get with no effective reflection.
    pub fn base_rank(&self, user_id: &str, phase: Phase) -> usize {
        4 + (unit_hash(self.seed, &["base-rank", user_id, &phase.to_string()]) * 12.0) as usize
    }

    /// Rank of the target for a prompt carrying `markers`, per the scenario
    /// rule. This is the ground truth the acceptance checks compare against.
    pub fn target_rank(&self, user_id: &str, phase: Phase, markers: &[Marker]) -> usize {
        let base = self.base_rank(user_id, phase);
        if !self.scenario.reflections_active || markers.is_empty() {
            return base;
        }
        if markers.len() >= 2 && self.scenario.concat_penalty > 0 {
            return base + self.scenario.concat_penalty;
        }
        let mut rank = base;
        for m in markers {
            if m.genuine {
                rank = rank.min(self.scenario.genuine_rank);
            }
            if m.overfit && phase == Phase::Validation {
                rank = rank.min(self.scenario.overfit_rank);
            }
        }
        rank
    }

    /// Whether a reflection carrying `marker` moves the target at `phase`.
    pub fn boosts(&self, user_id: &str, phase: Phase, marker: &Marker) -> bool {
        self.target_rank(user_id, phase, std::slice::from_ref(marker)) < self.base_rank(user_id, phase)
    }

    fn recommend(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let user_id = request.user_id.as_deref().unwrap_or("");
        let (history_part, rest) = request
            .prompt
            .split_once("candidate items:")
            .unwrap_or(("", request.prompt.as_str()));
        let candidates: Vec<&str> = rest
            .lines()
            .filter_map(|l| {
                let l = l.strip_prefix('[')?;
                let (idx, title) = l.split_once("] ")?;
                idx.parse::<usize>().ok().map(|_| title)
            })
            .collect();
        if candidates.is_empty() {
            return Ok("I could not find any candidates to rank.".into());
        }
        let ids: Vec<Option<&String>> = candidates.iter().map(|t| self.title_to_item.get(*t)).collect();
        let facts = self.users.get(user_id);
        let (target, phase) = match facts {
            Some(f) if ids.iter().any(|i| i == &Some(&f.validation_target)) => (Some(&f.validation_target), Phase::Validation),
            Some(f) if ids.iter().any(|i| i == &Some(&f.test_target)) => (Some(&f.test_target), Phase::Test),
            _ => (None, Phase::Test),
        };
        let mut others: Vec<(f64, &str)> = candidates
            .iter()
            .zip(&ids)
            .filter(|(_, id)| target.is_none() || *id != &target)
            .map(|(t, id)| (unit_hash(self.seed, &["score", user_id, id.map_or(*t, |s| s.as_str())]), *t))
            .collect();
        others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let mut ranking: Vec<&str> = others.into_iter().map(|(_, t)| t).collect();
        if let Some(target) = target {
            let markers = parse_markers(history_part);
            let rank = self.target_rank(user_id, phase, &markers);
            let pos = (rank - 1).min(ranking.len());
            ranking.insert(pos, self.item_title[target].as_str());
        }
        let mut out = String::from("Based on the user's history, here is my ranking:\n");
        for (i, t) in ranking.iter().enumerate() {
            out.push_str(&format!("{}. {t}\n", i + 1));
        }
        Ok(out)
    }

    fn reflect(&self, request: &CompletionRequest, perspective: u8) -> String {
        let user_id = request.user_id.as_deref().unwrap_or("");
        let group = self.group_of(user_id).unwrap_or(0);
        let helpful = self.scenario.is_helpful(group, perspective);
        let demos = parse_markers(&request.prompt);
        let genuine_share = if demos.is_empty() {
            0.0
        } else {
            demos.iter().filter(|m| m.genuine).count() as f64 / demos.len() as f64
        };
        let draw = unit_hash(self.seed, &["reflect", user_id, &request.prompt]);
        let (genuine, overfit) = if helpful {
            let s = &self.scenario;
            let p = s.genuine_prob + (s.demo_genuine_prob - s.genuine_prob) * genuine_share;
            (draw < p, false)
        } else {
            (false, draw < self.scenario.overfit_prob)
        };
        let code = ["EP", "IP", "CF"][perspective as usize];
        let analysis = match perspective {
            0 => "The recent titles point to a steady interest in the same line of products; the past list ranked loosely related titles too high.",
            1 => "The attribute sequence repeats the same category and brand; the past list ignored these recurring attributes.",
            _ => "Items with high CF ratings were placed below weakly rated ones; the ranking should follow the collaborative signal more closely.",
        };
        let nonce = &sha256_hex(request.prompt.as_bytes())[..12];
        format!(
            "{analysis} {MARKER_PREFIX} user={user_id} perspective={code} genuine={} overfit={} nonce={nonce}]]",
            u8::from(genuine),
            u8::from(overfit)
        )
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        match request.template {
            TemplateId::Rec => self.recommend(request),
            TemplateId::Ep => Ok(self.reflect(request, 0)),
            TemplateId::Ip => Ok(self.reflect(request, 1)),
            TemplateId::Cf => Ok(self.reflect(request, 2)),
        }
    }

    fn model(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marker_roundtrip() {
        let text = "blah [[mock-reflection user=u7 perspective=IP genuine=1 overfit=0 nonce=ab]] and \
                    [[mock-reflection user=u8 perspective=CF genuine=0 overfit=1 nonce=cd]]";
        let m = parse_markers(text);
        assert_eq!(m.len(), 2);
        assert_eq!(
            m[0],
            Marker {
                user_id: "u7".into(),
                perspective: 1,
                genuine: true,
                overfit: false
            }
        );
        assert!(m[1].overfit && !m[1].genuine && m[1].perspective == 2);
    }

    #[test]
    fn unknown_scenario_is_rejected() {
        assert!(matches!(MockScenario::by_id("nope"), Err(LlmError::UnknownScenario(_))));
        for id in MockScenario::ids() {
            MockScenario::by_id(id).unwrap();
        }
    }
}
