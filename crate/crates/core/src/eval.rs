//! Online evaluation on the test targets under the selection and ablation
//! modes.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cf::{CfError, CfModel};
use crate::corpus::{CandidateSet, Corpus, Phase, Split};
use crate::hashing::rng_for;
use crate::llm::Gateway;
use crate::memory::{best_reflection, MemoryStore};
use crate::metrics::{compute_metrics, rank_of_target, MetricError, MetricKind, MetricResult};
use crate::reflection::{concat_reflections, recommend, Perspective, Reflection, ReflectionId};
use crate::selector::{infer, PolicyParams, SelectorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mode {0} needs a trained policy")]
    MissingPolicy(EvalMode),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Cf(#[from] CfError),
    #[error("no test candidates for user {0:?}")]
    MissingUser(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalMode {
    /// Bandit selection.
    Full,
    Random,
    /// Per user, the perspective whose best reflection has the largest
    /// validation imp.
    Greedy,
    Single(Perspective),
    /// Best reflection of each listed perspective, pasted together.
    Concat(Vec<Perspective>),
    /// Plain recommendation prompt.
    None,
}

impl EvalMode {
    pub fn standard() -> Vec<EvalMode> {
        vec![
            EvalMode::None,
            EvalMode::Random,
            EvalMode::Greedy,
            EvalMode::Full,
            EvalMode::Single(Perspective::Ep),
            EvalMode::Single(Perspective::Ip),
            EvalMode::Single(Perspective::Cf),
            EvalMode::Concat(Perspective::ALL.to_vec()),
        ]
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Full => f.write_str("full"),
            EvalMode::Random => f.write_str("random"),
            EvalMode::Greedy => f.write_str("greedy"),
            EvalMode::None => f.write_str("none"),
            EvalMode::Single(p) => write!(f, "single:{p}"),
            EvalMode::Concat(ps) => {
                let names: Vec<String> = ps.iter().map(|p| p.to_string()).collect();
                write!(f, "concat:{}", names.join("+"))
            }
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => return Ok(EvalMode::Full),
            "random" => return Ok(EvalMode::Random),
            "greedy" => return Ok(EvalMode::Greedy),
            "none" => return Ok(EvalMode::None),
            _ => {}
        }
        if let Some(p) = s.strip_prefix("single:") {
            return p.parse().map(EvalMode::Single);
        }
        if let Some(list) = s.strip_prefix("concat:") {
            let mut ps: Vec<Perspective> = list.split('+').map(str::parse).collect::<Result<_, _>>()?;
            ps.sort();
            ps.dedup();
            return Ok(EvalMode::Concat(ps));
        }
        Err(format!("unknown evaluation mode {s:?}"))
    }
}

impl TryFrom<String> for EvalMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<EvalMode> for String {
    fn from(m: EvalMode) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEvalRow {
    pub user_id: String,
    pub perspectives: Vec<Perspective>,
    pub reflection_ids: Vec<ReflectionId>,
    pub rank: Option<usize>,
    /// The mode wanted a reflection but the bank was empty.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_fingerprint: String,
    pub bank_snapshot_id: String,
    pub policy_id: Option<String>,
    pub template_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub metrics: Vec<MetricResult>,
    pub evaluated_users: usize,
    pub excluded_users: Vec<String>,
    pub fallbacks: usize,
    pub seeds: BTreeMap<String, u64>,
    pub per_user: Vec<UserEvalRow>,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn metric(&self, kind: MetricKind) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == kind).map(|m| m.value)
    }
}

pub struct EvalContext<'a> {
    pub gateway: &'a Gateway,
    pub corpus: &'a Corpus,
    pub splits: &'a [Split],
    pub test: &'a BTreeMap<String, CandidateSet>,
    pub store: &'a MemoryStore,
    pub cf: &'a CfModel,
    pub policy: Option<&'a PolicyParams>,
    pub max_history: usize,
    pub max_concurrency: usize,
    /// Seed of the random mode.
    pub seed: u64,
    /// Every seed of the run, copied into the report.
    pub seeds: BTreeMap<String, u64>,
    pub provenance: Provenance,
}

fn best_of<'s>(store: &'s MemoryStore, user_id: &str, p: Perspective) -> Option<&'s Reflection> {
    store.bank(user_id, p).and_then(|b| best_reflection(b).ok())
}

/// Reflections a mode puts into the test prompt for one user, plus whether
/// the mode fell back to none.
fn choose(ctx: &EvalContext<'_>, mode: &EvalMode, split: &Split) -> Result<(Vec<Perspective>, Vec<Reflection>, bool), EvalError> {
    let user = split.user_id.as_str();
    let single = |p: Perspective| match best_of(ctx.store, user, p) {
        Some(r) => (vec![p], vec![r.clone()], false),
        None => (vec![p], vec![], true),
    };
    Ok(match mode {
        EvalMode::None => (vec![], vec![], false),
        EvalMode::Single(p) => single(*p),
        EvalMode::Random => {
            let mut rng = rng_for(ctx.seed, &["eval-random", user]);
            single(Perspective::from_code(rng.random_range(0..3)).expect("arm"))
        }
        EvalMode::Greedy => {
            let best = Perspective::ALL
                .iter()
                .filter_map(|&p| best_of(ctx.store, user, p).map(|r| (p, r)))
                .fold(None, |acc: Option<(Perspective, &Reflection)>, (p, r)| match acc {
                    Some((_, b)) if b.imp >= r.imp => acc,
                    _ => Some((p, r)),
                });
            match best {
                Some((p, r)) => (vec![p], vec![r.clone()], false),
                None => (vec![], vec![], true),
            }
        }
        EvalMode::Full => {
            let policy = ctx.policy.ok_or_else(|| EvalError::MissingPolicy(mode.clone()))?;
            let history = split.history(Phase::Test);
            let z = ctx.cf.embed_state(user, &history)?;
            let inf = infer(policy, ctx.store, user, &z)?;
            (vec![inf.perspective], inf.reflection.into_iter().collect(), inf.fallback)
        }
        EvalMode::Concat(ps) => {
            let found: Vec<Reflection> = ps.iter().filter_map(|&p| best_of(ctx.store, user, p).cloned()).collect();
            let fallback = found.len() < ps.len();
            (ps.clone(), found, fallback)
        }
    })
}

/// Evaluates every split user under `mode` on the test candidates. Users
/// whose LLM calls fail are excluded from the means and listed.
pub fn run_online_eval(ctx: &EvalContext<'_>, mode: &EvalMode) -> Result<EvalReport, EvalError> {
    let mut choices = Vec::with_capacity(ctx.splits.len());
    for split in ctx.splits {
        let cands = ctx.test.get(&split.user_id).ok_or_else(|| EvalError::MissingUser(split.user_id.clone()))?;
        let (perspectives, reflections, fallback) = choose(ctx, mode, split)?;
        choices.push((split, cands, perspectives, reflections, fallback));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.max_concurrency.max(1))
        .build()
        .expect("thread pool");
    let ranked: Vec<Result<Option<usize>, String>> = pool.install(|| {
        choices
            .par_iter()
            .map(|(split, cands, _, reflections, _)| {
                let refs: Vec<&Reflection> = reflections.iter().collect();
                let text = concat_reflections(&refs);
                recommend(ctx.gateway, ctx.corpus, split, cands, text.as_deref(), ctx.max_history)
                    .map(|list| rank_of_target(&list.item_ids, &cands.target_item_id))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut ranks = BTreeMap::new();
    let mut per_user = Vec::new();
    let mut excluded = Vec::new();
    let mut fallbacks = 0;
    for ((split, _, perspectives, reflections, fallback), outcome) in choices.into_iter().zip(ranked) {
        match outcome {
            Ok(rank) => {
                ranks.insert(split.user_id.clone(), rank);
                fallbacks += usize::from(fallback);
                per_user.push(UserEvalRow {
                    user_id: split.user_id.clone(),
                    perspectives,
                    reflection_ids: reflections.iter().map(|r| r.reflection_id).collect(),
                    rank,
                    fallback,
                });
            }
            Err(_) => excluded.push(split.user_id.clone()),
        }
    }
    let metrics = compute_metrics(&ranks, &MetricKind::standard())?;
    Ok(EvalReport {
        mode: mode.clone(),
        metrics,
        evaluated_users: ranks.len(),
        excluded_users: excluded,
        fallbacks,
        seeds: ctx.seeds.clone(),
        per_user,
        provenance: ctx.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_roundtrip() {
        for m in EvalMode::standard() {
            let s = m.to_string();
            assert_eq!(s.parse::<EvalMode>().unwrap(), m);
        }
        assert_eq!("concat:CF+EP".parse::<EvalMode>().unwrap(), EvalMode::Concat(vec![Perspective::Ep, Perspective::Cf]));
        assert!("best".parse::<EvalMode>().is_err());
        assert_eq!(serde_json::to_string(&EvalMode::Single(Perspective::Ip)).unwrap(), "\"single:IP\"");
    }
}
