//! Single-target ranking metrics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no users to evaluate")]
    EmptyUserSet,
    #[error("cutoff k must be positive")]
    ZeroCutoff,
    #[error("unrecognized metric {0:?} (expected e.g. NDCG@10 or HR@5)")]
    Unrecognized(String),
}

/// 1-based position of `target` in `ranked`, or `None` when absent.
pub fn rank_of_target<S: AsRef<str>>(ranked: &[S], target: &str) -> Option<usize> {
    ranked.iter().position(|x| x.as_ref() == target).map(|p| p + 1)
}

pub fn hr_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricKind {
    Hr(usize),
    Ndcg(usize),
}

impl MetricKind {
    pub fn k(self) -> usize {
        match self {
            MetricKind::Hr(k) | MetricKind::Ndcg(k) => k,
        }
    }

    pub fn value(self, rank: Option<usize>) -> f64 {
        match self {
            MetricKind::Hr(k) => hr_at(rank, k),
            MetricKind::Ndcg(k) => ndcg_at(rank, k),
        }
    }

    /// HR@1, HR@5, HR@10, NDCG@5, NDCG@10.
    pub fn standard() -> Vec<MetricKind> {
        vec![
            MetricKind::Hr(1),
            MetricKind::Hr(5),
            MetricKind::Hr(10),
            MetricKind::Ndcg(5),
            MetricKind::Ndcg(10),
        ]
    }
}

impl Default for MetricKind {
    fn default() -> Self {
        MetricKind::Ndcg(10)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Hr(k) => write!(f, "HR@{k}"),
            MetricKind::Ndcg(k) => write!(f, "NDCG@{k}"),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricError::Unrecognized(s.to_string());
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(MetricError::ZeroCutoff);
        }
        match name.trim().to_ascii_uppercase().as_str() {
            "HR" => Ok(MetricKind::Hr(k)),
            "NDCG" => Ok(MetricKind::Ndcg(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for MetricKind {
    type Error = MetricError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MetricKind> for String {
    fn from(m: MetricKind) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricKind,
    pub value: f64,
}

/// Means over users; an unranked target contributes 0.
pub fn compute_metrics(ranks: &BTreeMap<String, Option<usize>>, kinds: &[MetricKind]) -> Result<Vec<MetricResult>, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::EmptyUserSet);
    }
    if kinds.iter().any(|m| m.k() == 0) {
        return Err(MetricError::ZeroCutoff);
    }
    let n = ranks.len() as f64;
    Ok(kinds
        .iter()
        .map(|&metric| MetricResult {
            metric,
            value: ranks.values().map(|&r| metric.value(r)).sum::<f64>() / n,
        })
        .collect())
}
