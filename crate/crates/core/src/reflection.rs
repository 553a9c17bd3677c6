//! The three perspective reflectors and the recommendation calls they are
//! judged against.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cf::{CfError, CfModel};
use crate::corpus::{CandidateSet, Corpus, Item, Phase, Split};
use crate::llm::{parse_ranking, CandidateRef, Gateway, LlmError, PromptSlots, RankedList, TemplateId};

pub const DEFAULT_MAX_HISTORY: usize = 50;

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Cf(#[from] CfError),
    #[error("CF perspective needs a trained CF model")]
    MissingCfModel,
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("demonstration {id} is {found} but the reflection is {expected}")]
    DemoPerspective {
        id: ReflectionId,
        expected: Perspective,
        found: Perspective,
    },
    #[error("demonstration {0} has not been scored")]
    UnscoredDemo(ReflectionId),
    #[error("empty reflection for user {user_id:?} ({perspective}) after retry")]
    EmptyReflection { user_id: String, perspective: Perspective },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Perspective {
    #[serde(rename = "EP")]
    Ep,
    #[serde(rename = "IP")]
    Ip,
    #[serde(rename = "CF")]
    Cf,
}

impl Perspective {
    pub const ALL: [Perspective; 3] = [Perspective::Ep, Perspective::Ip, Perspective::Cf];

    /// Bandit arm index.
    pub fn code(self) -> usize {
        match self {
            Perspective::Ep => 0,
            Perspective::Ip => 1,
            Perspective::Cf => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn template(self) -> TemplateId {
        match self {
            Perspective::Ep => TemplateId::Ep,
            Perspective::Ip => TemplateId::Ip,
            Perspective::Cf => TemplateId::Cf,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Perspective::Ep => "Explicit preference",
            Perspective::Ip => "Implicit preference",
            Perspective::Cf => "Collaborative filtering",
        }
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perspective::Ep => "EP",
            Perspective::Ip => "IP",
            Perspective::Cf => "CF",
        })
    }
}

impl std::str::FromStr for Perspective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "EP" => Ok(Perspective::Ep),
            "IP" => Ok(Perspective::Ip),
            "CF" => Ok(Perspective::Cf),
            _ => Err(format!("unknown perspective {s:?} (expected EP, IP or CF)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReflectionId(pub u64);

impl fmt::Display for ReflectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub reflection_id: ReflectionId,
    pub user_id: String,
    pub perspective: Perspective,
    pub text: String,
    pub iteration_round: u32,
    pub demo_ids: Vec<ReflectionId>,
    pub imp: Option<f64>,
    pub effective: Option<bool>,
    pub template_hash: String,
}

impl Reflection {
    pub fn is_scored(&self) -> bool {
        self.imp.is_some()
    }
}

/// One perspective's rendering of (history, candidates, prediction, target).
/// Each field holds one entry per item, without list markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveView {
    pub perspective: Perspective,
    pub user_id: String,
    pub history_repr: Vec<String>,
    pub candidates_repr: Vec<String>,
    pub prediction_repr: Vec<String>,
    pub target_repr: String,
}

fn ep_repr(item: &Item) -> String {
    if item.description.trim().is_empty() {
        item.title.clone()
    } else {
        format!("{} — {}", item.title, item.description)
    }
}

fn ip_repr(item: &Item, keys: &[String]) -> String {
    if keys.is_empty() {
        return "(no attributes)".into();
    }
    let parts: Vec<String> = keys
        .iter()
        .map(|k| format!("{k}: {}", item.attributes.get(k).map_or("unknown", String::as_str)))
        .collect();
    format!("({})", parts.join(", "))
}

/// The most recent `max_history` entries.
pub fn recent<T>(history: &[T], max_history: usize) -> &[T] {
    &history[history.len().saturating_sub(max_history)..]
}

/// Builds the view of a validation-phase prediction from one perspective.
pub fn build_view(
    perspective: Perspective,
    corpus: &Corpus,
    split: &Split,
    candidates: &CandidateSet,
    predicted: &RankedList,
    cf: Option<&CfModel>,
    max_history: usize,
) -> Result<PerspectiveView, ReflectionError> {
    let phase = candidates.phase;
    let history = split.history(phase);
    let history = recent(&history, max_history);
    let target = split.target(phase);
    let lookup = |id: &str| corpus.item(id).ok_or_else(|| ReflectionError::UnknownItem(id.to_string()));

    let render_many = |ids: &[&str]| -> Result<Vec<String>, ReflectionError> {
        match perspective {
            Perspective::Ep => ids.iter().map(|id| lookup(id).map(ep_repr)).collect(),
            Perspective::Ip => ids
                .iter()
                .map(|id| lookup(id).map(|item| ip_repr(item, corpus.attribute_keys())))
                .collect(),
            Perspective::Cf => {
                let model = cf.ok_or(ReflectionError::MissingCfModel)?;
                let ratings = model.rate(&split.user_id, ids)?;
                ids.iter()
                    .zip(ratings)
                    .map(|(id, r)| lookup(id).map(|item| format!("{} (rating={})", item.title, r.rendered())))
                    .collect()
            }
        }
    };

    let cand_ids: Vec<&str> = candidates.presentation_order.iter().map(String::as_str).collect();
    let pred_ids: Vec<&str> = predicted.item_ids.iter().map(String::as_str).collect();
    Ok(PerspectiveView {
        perspective,
        user_id: split.user_id.clone(),
        history_repr: render_many(history)?,
        candidates_repr: render_many(&cand_ids)?,
        prediction_repr: render_many(&pred_ids)?,
        target_repr: render_many(&[target])?.remove(0),
    })
}

/// Calls the reflection LLM on `view`. The returned reflection is unscored.
pub fn reflect(
    gateway: &Gateway,
    view: &PerspectiveView,
    demos: &[Reflection],
    reflection_id: ReflectionId,
) -> Result<Reflection, ReflectionError> {
    for d in demos {
        if d.perspective != view.perspective {
            return Err(ReflectionError::DemoPerspective {
                id: d.reflection_id,
                expected: view.perspective,
                found: d.perspective,
            });
        }
        if d.imp.is_none() {
            return Err(ReflectionError::UnscoredDemo(d.reflection_id));
        }
    }
    let slots = PromptSlots {
        history: view.history_repr.clone(),
        candidates: view.candidates_repr.clone(),
        prediction: view.prediction_repr.clone(),
        target: Some(view.target_repr.clone()),
        reflection: None,
        demos: demos.iter().map(|d| d.text.clone()).collect(),
    };
    let prompt = gateway.render(view.perspective.template(), &slots)?;
    let mut text = String::new();
    for _ in 0..2 {
        text = gateway.complete(&prompt, &view.user_id)?.trim().to_string();
        if !text.is_empty() {
            break;
        }
    }
    if text.is_empty() {
        return Err(ReflectionError::EmptyReflection {
            user_id: view.user_id.clone(),
            perspective: view.perspective,
        });
    }
    Ok(Reflection {
        reflection_id,
        user_id: view.user_id.clone(),
        perspective: view.perspective,
        text,
        iteration_round: demos.iter().map(|d| d.iteration_round + 1).max().unwrap_or(0),
        demo_ids: demos.iter().map(|d| d.reflection_id).collect(),
        imp: None,
        effective: None,
        template_hash: prompt.template_hash,
    })
}

/// Joins reflections into one prompt section, labeled and in EP, IP, CF order.
pub fn concat_reflections(reflections: &[&Reflection]) -> Option<String> {
    if reflections.is_empty() {
        return None;
    }
    if reflections.len() == 1 {
        return Some(reflections[0].text.clone());
    }
    let mut sorted = reflections.to_vec();
    sorted.sort_by_key(|r| r.perspective);
    let mut s = String::new();
    for r in sorted {
        s.push_str(&format!("\n{} reflection: {}", r.perspective.label(), r.text));
    }
    s.push('\n');
    Some(s)
}

/// Asks the recommendation LLM to rank `candidates`, optionally with a
/// reflection in the prompt.
pub fn recommend(
    gateway: &Gateway,
    corpus: &Corpus,
    split: &Split,
    candidates: &CandidateSet,
    reflection: Option<&str>,
    max_history: usize,
) -> Result<RankedList, ReflectionError> {
    let phase = candidates.phase;
    let history = split.history(phase);
    let title = |id: &str| {
        corpus
            .item(id)
            .map(|i| i.title.clone())
            .ok_or_else(|| ReflectionError::UnknownItem(id.to_string()))
    };
    let refs: Vec<CandidateRef> = candidates
        .presentation_order
        .iter()
        .map(|id| {
            title(id).map(|t| CandidateRef {
                item_id: id.clone(),
                title: t,
            })
        })
        .collect::<Result<_, _>>()?;
    let slots = PromptSlots {
        history: recent(&history, max_history).iter().map(|id| title(id)).collect::<Result<_, _>>()?,
        candidates: refs.iter().map(|c| c.title.clone()).collect(),
        reflection: reflection.filter(|r| !r.is_empty()).map(str::to_string),
        ..Default::default()
    };
    let prompt = gateway.render(TemplateId::Rec, &slots)?;
    let raw = gateway.complete(&prompt, &split.user_id)?;
    Ok(parse_ranking(&raw, &split.user_id, phase, &refs))
}

/// The two arms compared when scoring a reflection: identical prompts except
/// for the reflection sentence. Returns (with, without).
pub fn generate_offline_predictions(
    gateway: &Gateway,
    corpus: &Corpus,
    split: &Split,
    candidates: &CandidateSet,
    reflection: &str,
    max_history: usize,
) -> Result<(RankedList, RankedList), ReflectionError> {
    debug_assert_eq!(candidates.phase, Phase::Validation);
    let with = recommend(gateway, corpus, split, candidates, Some(reflection), max_history)?;
    let without = recommend(gateway, corpus, split, candidates, None, max_history)?;
    Ok((with, without))
}
