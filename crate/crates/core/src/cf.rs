//! Matrix-factorization collaborative filtering.
//!
//! A two-sided factorization trained with sampled-negative binary
//! cross-entropy. It supplies CF ratings for the CF reflector, user/item
//! embeddings for the selector state, and user embeddings for clustering.
//! Training reads only the train prefixes of the leave-one-out splits.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Split};
use crate::hashing::{rng_for, sha256_hex};

#[derive(Debug, Error, PartialEq)]
pub enum CfError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("no training interactions")]
    EmptyCorpus,
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("empty history")]
    EmptyHistory,
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("embedding matrix has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Maps a raw dot product to the reported rating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    #[default]
    Logistic,
    Identity,
}

impl Squash {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Squash::Logistic => sigmoid(x),
            Squash::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SampledBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub l2: f64,
    pub init_std: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 0.05,
            epochs: 40,
            negatives_per_positive: 4,
            l2: 1e-4,
            init_std: 0.1,
            seed: 0,
            loss: LossKind::SampledBce,
        }
    }
}

impl CfConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfRating {
    pub user_id: String,
    pub item_id: String,
    pub score: f64,
}

impl CfRating {
    /// Two-decimal rendering used in prompts.
    pub fn rendered(&self) -> String {
        format!("{:.2}", self.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    users: usize,
    items: usize,
    seed: u64,
    config_hash: String,
}

#[derive(Clone, Serialize, Deserialize)]
struct CfModelRepr {
    header: ModelHeader,
    config: CfConfig,
    squash: Squash,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_embeddings: Vec<f64>,
    item_embeddings: Vec<f64>,
    loss_trajectory: Vec<f64>,
}

/// Trained factorization. Rows are stored flat, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CfModelRepr", into = "CfModelRepr")]
pub struct CfModel {
    dim: usize,
    config: CfConfig,
    squash: Squash,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_embeddings: Vec<f64>,
    item_embeddings: Vec<f64>,
    loss_trajectory: Vec<f64>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl From<CfModel> for CfModelRepr {
    fn from(m: CfModel) -> Self {
        CfModelRepr {
            header: ModelHeader {
                dim: m.dim,
                users: m.user_ids.len(),
                items: m.item_ids.len(),
                seed: m.config.seed,
                config_hash: m.config.hash(),
            },
            config: m.config,
            squash: m.squash,
            user_ids: m.user_ids,
            item_ids: m.item_ids,
            user_embeddings: m.user_embeddings,
            item_embeddings: m.item_embeddings,
            loss_trajectory: m.loss_trajectory,
        }
    }
}

impl TryFrom<CfModelRepr> for CfModel {
    type Error = CfError;

    fn try_from(r: CfModelRepr) -> Result<Self, CfError> {
        let mut model = CfModel::from_embeddings(
            r.user_ids,
            r.item_ids,
            r.header.dim,
            r.user_embeddings,
            r.item_embeddings,
            r.squash,
        )?;
        model.config = r.config;
        model.loss_trajectory = r.loss_trajectory;
        Ok(model)
    }
}

fn index_of(ids: &[String]) -> HashMap<String, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
}

impl CfModel {
    /// Wraps explicit embeddings; used for persisted models and constructed
    /// test landscapes.
    pub fn from_embeddings(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        dim: usize,
        user_embeddings: Vec<f64>,
        item_embeddings: Vec<f64>,
        squash: Squash,
    ) -> Result<Self, CfError> {
        if dim == 0 {
            return Err(CfError::ZeroDimension);
        }
        if user_embeddings.len() != user_ids.len() * dim {
            return Err(CfError::ShapeMismatch {
                expected: user_ids.len() * dim,
                got: user_embeddings.len(),
            });
        }
        if item_embeddings.len() != item_ids.len() * dim {
            return Err(CfError::ShapeMismatch {
                expected: item_ids.len() * dim,
                got: item_embeddings.len(),
            });
        }
        Ok(Self {
            dim,
            config: CfConfig { dim, ..CfConfig::default() },
            squash,
            user_index: index_of(&user_ids),
            item_index: index_of(&item_ids),
            user_ids,
            item_ids,
            user_embeddings,
            item_embeddings,
            loss_trajectory: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &CfConfig {
        &self.config
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    pub fn with_squash(mut self, squash: Squash) -> Self {
        self.squash = squash;
        self
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Mean training loss per epoch.
    pub fn loss_trajectory(&self) -> &[f64] {
        &self.loss_trajectory
    }

    pub fn user_embedding(&self, user_id: &str) -> Result<&[f64], CfError> {
        let u = *self
            .user_index
            .get(user_id)
            .ok_or_else(|| CfError::UnknownUser(user_id.to_string()))?;
        Ok(&self.user_embeddings[u * self.dim..(u + 1) * self.dim])
    }

    pub fn item_embedding(&self, item_id: &str) -> Result<&[f64], CfError> {
        let i = self.item_idx(item_id)?;
        Ok(&self.item_embeddings[i * self.dim..(i + 1) * self.dim])
    }

    fn item_idx(&self, item_id: &str) -> Result<usize, CfError> {
        self.item_index
            .get(item_id)
            .copied()
            .ok_or_else(|| CfError::UnknownItem(item_id.to_string()))
    }

    /// One squashed rating per item, in input order.
    pub fn rate(&self, user_id: &str, item_ids: &[&str]) -> Result<Vec<CfRating>, CfError> {
        let user = self.user_embedding(user_id)?;
        item_ids
            .iter()
            .map(|&item_id| {
                let item = self.item_embedding(item_id)?;
                Ok(CfRating {
                    user_id: user_id.to_string(),
                    item_id: item_id.to_string(),
                    score: self.squash.apply(dot(user, item)),
                })
            })
            .collect()
    }

    /// `[user embedding, mean of history item embeddings]`, length `2·dim`.
    ///
    /// History items are summed in catalog-index order so the mean does not
    /// depend on the order of the history.
    pub fn embed_state(&self, user_id: &str, history_item_ids: &[&str]) -> Result<Vec<f64>, CfError> {
        if history_item_ids.is_empty() {
            return Err(CfError::EmptyHistory);
        }
        let mut state = Vec::with_capacity(2 * self.dim);
        state.extend_from_slice(self.user_embedding(user_id)?);
        let mut idx = history_item_ids
            .iter()
            .map(|id| self.item_idx(id))
            .collect::<Result<Vec<_>, _>>()?;
        idx.sort_unstable();
        let mut mean = vec![0.0; self.dim];
        for i in &idx {
            for (m, v) in mean.iter_mut().zip(&self.item_embeddings[i * self.dim..(i + 1) * self.dim]) {
                *m += v;
            }
        }
        let n = idx.len() as f64;
        state.extend(mean.into_iter().map(|m| m / n));
        Ok(state)
    }

    pub fn all_finite(&self) -> bool {
        self.user_embeddings.iter().chain(&self.item_embeddings).all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Trains on the train prefixes of `splits`. Validation and test targets are
/// never read. Users are the split users in order; items are the full
/// catalog in catalog order.
pub fn train_cf(corpus: &Corpus, splits: &[Split], config: &CfConfig) -> Result<CfModel, CfError> {
    if config.dim == 0 {
        return Err(CfError::ZeroDimension);
    }
    let dim = config.dim;
    let user_ids: Vec<String> = splits.iter().map(|s| s.user_id.clone()).collect();
    let item_ids: Vec<String> = corpus.items().iter().map(|i| i.item_id.clone()).collect();
    let n_items = item_ids.len();

    let mut positives = Vec::new();
    let mut seen: Vec<HashSet<usize>> = Vec::with_capacity(splits.len());
    for (u, split) in splits.iter().enumerate() {
        let mut set = HashSet::new();
        for item in &split.train_prefix {
            let i = corpus
                .item_position(item)
                .ok_or_else(|| CfError::UnknownItem(item.clone()))?;
            positives.push((u, i));
            set.insert(i);
        }
        seen.push(set);
    }
    if positives.is_empty() || n_items == 0 {
        return Err(CfError::EmptyCorpus);
    }

    let mut init_rng = rng_for(config.seed, &["cf-init"]);
    let normal = Normal::new(0.0, config.init_std).expect("finite init std");
    let mut users: Vec<f64> = (0..user_ids.len() * dim).map(|_| normal.sample(&mut init_rng)).collect();
    let mut items: Vec<f64> = (0..n_items * dim).map(|_| normal.sample(&mut init_rng)).collect();

    let mut trajectory = Vec::with_capacity(config.epochs);
    let lr = config.learning_rate;
    let l2 = config.l2;
    let mut scratch = vec![0.0; dim];
    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, &["cf-epoch", &epoch.to_string()]);
        positives.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for &(u, i) in &positives {
            loss_sum += sgd_step(&mut users, &mut items, dim, u, i, 1.0, lr, l2, &mut scratch);
            count += 1;
            if seen[u].len() >= n_items {
                continue;
            }
            for _ in 0..config.negatives_per_positive {
                let j = loop {
                    let j = rng.random_range(0..n_items);
                    if !seen[u].contains(&j) {
                        break j;
                    }
                };
                loss_sum += sgd_step(&mut users, &mut items, dim, u, j, 0.0, lr, l2, &mut scratch);
                count += 1;
            }
        }
        let loss = loss_sum / count as f64;
        if !loss.is_finite() {
            return Err(CfError::Divergence { epoch, loss });
        }
        trajectory.push(loss);
    }

    let mut model = CfModel::from_embeddings(user_ids, item_ids, dim, users, items, Squash::Logistic)?;
    model.config = config.clone();
    model.loss_trajectory = trajectory;
    if !model.all_finite() {
        return Err(CfError::Divergence {
            epoch: config.epochs.saturating_sub(1),
            loss: f64::NAN,
        });
    }
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn sgd_step(
    users: &mut [f64],
    items: &mut [f64],
    dim: usize,
    u: usize,
    i: usize,
    label: f64,
    lr: f64,
    l2: f64,
    scratch: &mut [f64],
) -> f64 {
    let pu = &mut users[u * dim..(u + 1) * dim];
    let qi = &mut items[i * dim..(i + 1) * dim];
    let s = dot(pu, qi);
    let g = sigmoid(s) - label;
    scratch.copy_from_slice(pu);
    for k in 0..dim {
        pu[k] -= lr * (g * qi[k] + l2 * pu[k]);
        qi[k] -= lr * (g * scratch[k] + l2 * qi[k]);
    }
    softplus(s) - label * s
}
