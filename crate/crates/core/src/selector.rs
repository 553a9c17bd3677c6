//! Three-armed contextual bandit over reflection perspectives, trained with
//! a clipped-ratio policy gradient on precomputed improvement rewards.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{rng_for, sha256_hex};
use crate::memory::{best_reflection, sample_demos, MemoryBank, MemoryStore};
use crate::reflection::{Perspective, Reflection, ReflectionId};

pub const N_ARMS: usize = 3;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("state has dimension {found}, policy expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty PPO batch")]
    EmptyBatch,
    #[error("behavior probability {0} is not in (0, 1]")]
    BadBehaviorProb(f64),
    #[error("non-finite gradient at update {update}: {detail}")]
    NonFinite { update: usize, detail: String },
    #[error("no users to train on")]
    NoUsers,
    #[error("invalid PPO configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplaySampling {
    /// The most recent `batch_size` transitions.
    #[default]
    Recent,
    /// A uniform draw without replacement from the whole buffer.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub epsilon: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub buffer_capacity: usize,
    pub normalize_advantages: bool,
    pub entropy_coef: f64,
    /// Width of the optional tanh hidden layer in the actor.
    pub hidden: Option<usize>,
    /// Softmax temperature used when drawing a reward from a bank.
    pub tau: f64,
    pub replay: ReplaySampling,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epsilon: 0.1,
            actor_lr: 3e-3,
            critic_lr: 1e-2,
            epochs: 4,
            batch_size: 64,
            steps: 5000,
            buffer_capacity: 4096,
            normalize_advantages: false,
            entropy_coef: 0.0,
            hidden: None,
            tau: 1.0,
            replay: ReplaySampling::Recent,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        let bad = |m: &str| Err(SelectorError::Config(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0, 1)");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be positive and fit in the buffer");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

/// Actor and critic parameters, stored flat.
///
/// Affine actor: `W (3×d) | b (3)`. Hidden actor: `W1 (h×d) | b1 (h) |
/// W2 (3×h) | b2 (3)` with `tanh` after the first layer. Critic: `w (d) | b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub input_dim: usize,
    pub hidden: Option<usize>,
    pub actor: Vec<f64>,
    pub critic: Vec<f64>,
    pub seed: u64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl PolicyParams {
    /// Seeded initialization: small Gaussian weights, zero biases, zero critic.
    pub fn init(input_dim: usize, hidden: Option<usize>, seed: u64) -> Self {
        let mut rng = rng_for(seed, &["policy-init"]);
        let d = input_dim;
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let actor = match hidden {
            None => {
                let mut a = gauss(N_ARMS * d, 0.01);
                a.extend([0.0; N_ARMS]);
                a
            }
            Some(h) => {
                let mut a = gauss(h * d, 1.0 / (d.max(1) as f64).sqrt());
                a.extend(vec![0.0; h]);
                a.extend(gauss(N_ARMS * h, 0.01));
                a.extend([0.0; N_ARMS]);
                a
            }
        };
        Self {
            input_dim,
            hidden,
            actor,
            critic: vec![0.0; d + 1],
            seed,
        }
    }

    fn check(&self, z: &[f64]) -> Result<(), SelectorError> {
        if z.len() != self.input_dim {
            return Err(SelectorError::DimensionMismatch {
                expected: self.input_dim,
                found: z.len(),
            });
        }
        Ok(())
    }

    /// Hidden activations (when present) and logits.
    fn forward(&self, z: &[f64]) -> (Option<Vec<f64>>, [f64; N_ARMS]) {
        let d = self.input_dim;
        let affine = |w: &[f64], b: &[f64], x: &[f64], rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|r| b[r] + w[r * x.len()..(r + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        };
        let mut logits = [0.0; N_ARMS];
        match self.hidden {
            None => {
                let out = affine(&self.actor[..N_ARMS * d], &self.actor[N_ARMS * d..], z, N_ARMS);
                logits.copy_from_slice(&out);
                (None, logits)
            }
            Some(h) => {
                let (w1, rest) = self.actor.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(N_ARMS * h);
                let hid: Vec<f64> = affine(w1, b1, z, h).into_iter().map(f64::tanh).collect();
                logits.copy_from_slice(&affine(w2, b2, &hid, N_ARMS));
                (Some(hid), logits)
            }
        }
    }

    pub fn logits(&self, z: &[f64]) -> Result<[f64; N_ARMS], SelectorError> {
        self.check(z)?;
        Ok(self.forward(z).1)
    }

    pub fn probs(&self, z: &[f64]) -> Result<Vec<f64>, SelectorError> {
        Ok(softmax(&self.logits(z)?))
    }

    pub fn value(&self, z: &[f64]) -> Result<f64, SelectorError> {
        self.check(z)?;
        let d = self.input_dim;
        Ok(self.critic[d] + self.critic[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Accumulates `scale · ∂(Σ_j dlogits_j · logit_j)/∂θ` into `grad`.
    fn backprop_actor(&self, z: &[f64], hid: Option<&[f64]>, dlogits: &[f64; N_ARMS], scale: f64, grad: &mut [f64]) {
        let d = self.input_dim;
        match (self.hidden, hid) {
            (None, _) => {
                for a in 0..N_ARMS {
                    let g = scale * dlogits[a];
                    for (gi, zi) in grad[a * d..(a + 1) * d].iter_mut().zip(z) {
                        *gi += g * zi;
                    }
                    grad[N_ARMS * d + a] += g;
                }
            }
            (Some(h), Some(hid)) => {
                let w2_off = h * d + h;
                let b2_off = w2_off + N_ARMS * h;
                let mut dhid = vec![0.0; h];
                for a in 0..N_ARMS {
                    let g = scale * dlogits[a];
                    for j in 0..h {
                        grad[w2_off + a * h + j] += g * hid[j];
                        dhid[j] += g * self.actor[w2_off + a * h + j];
                    }
                    grad[b2_off + a] += g;
                }
                for j in 0..h {
                    let dpre = dhid[j] * (1.0 - hid[j] * hid[j]);
                    for (gi, zi) in grad[j * d..(j + 1) * d].iter_mut().zip(z) {
                        *gi += dpre * zi;
                    }
                    grad[h * d + j] += dpre;
                }
            }
            (Some(_), None) => unreachable!("hidden actor always yields activations"),
        }
    }
}

/// Clipped surrogate for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// ε-greedy action. Returns the arm and its mixture probability
/// ε/3 + (1 − ε)·π(a|z).
pub fn act(params: &PolicyParams, z: &[f64], epsilon: f64, rng: &mut impl Rng) -> Result<(usize, f64), SelectorError> {
    let probs = params.probs(z)?;
    let action = if rng.random::<f64>() < epsilon {
        rng.random_range(0..N_ARMS)
    } else {
        crate::memory::draw_index(&probs, rng)
    };
    Ok((action, epsilon / N_ARMS as f64 + (1.0 - epsilon) * probs[action]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTransition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub behavior_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<BanditTransition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: BanditTransition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BanditTransition> {
        self.items.iter()
    }

    pub fn sample(&self, n: usize, mode: ReplaySampling, rng: &mut impl Rng) -> Vec<BanditTransition> {
        let n = n.min(self.items.len());
        match mode {
            ReplaySampling::Recent => self.items.iter().skip(self.items.len() - n).cloned().collect(),
            ReplaySampling::Uniform => index::sample(rng, self.items.len(), n)
                .into_iter()
                .map(|i| self.items[i].clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDraw {
    pub reward: f64,
    pub reflection_id: Option<ReflectionId>,
    /// The chosen bank was empty; reward defaults to 0.
    pub void_arm: bool,
}

/// Reward of pulling an arm: the imp of one reflection drawn from the bank
/// with softmax(imp / τ) probabilities. No LLM call is needed.
pub fn reward_for(bank: Option<&MemoryBank>, tau: f64, rng: &mut impl Rng) -> RewardDraw {
    let pool: Vec<&Reflection> = bank.map(|b| b.entries().iter().collect()).unwrap_or_default();
    match sample_demos(&pool, 1, tau, rng) {
        Ok(mut v) => {
            let r = v.remove(0);
            RewardDraw {
                reward: r.imp.unwrap_or(0.0),
                reflection_id: Some(r.reflection_id),
                void_arm: false,
            }
        }
        Err(_) => RewardDraw {
            reward: 0.0,
            reflection_id: None,
            void_arm: true,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate (plus entropy bonus) before the update.
    pub actor_objective: f64,
    /// Mean squared critic error before the update.
    pub critic_loss: f64,
}

/// Mean clipped surrogate (plus entropy bonus) and its gradient with
/// respect to the actor parameters, for fixed advantages.
pub fn actor_objective_and_grad(params: &PolicyParams, batch: &[BanditTransition], advantages: &[f64], clip: f64, entropy_coef: f64) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.actor.len()];
    let mut total = 0.0;
    for (t, &adv) in batch.iter().zip(advantages) {
        let (hid, logits) = params.forward(&t.state);
        let probs = softmax(&logits);
        let ratio = probs[t.action] / t.behavior_prob;
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        total += unclipped.min(clipped);
        let mut dlogits = [0.0; N_ARMS];
        if unclipped <= clipped {
            for (j, dl) in dlogits.iter_mut().enumerate() {
                let onehot = if j == t.action { 1.0 } else { 0.0 };
                *dl += adv * ratio * (onehot - probs[j]);
            }
        }
        if entropy_coef != 0.0 {
            let h: f64 = -probs.iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
            total += entropy_coef * h;
            for (j, dl) in dlogits.iter_mut().enumerate() {
                let lp = if probs[j] > 0.0 { probs[j].ln() } else { 0.0 };
                *dl += entropy_coef * -probs[j] * (lp + h);
            }
        }
        params.backprop_actor(&t.state, hid.as_deref(), &dlogits, 1.0 / n, &mut grad);
    }
    (total / n, grad)
}

/// Mean squared error of the critic against rewards, and its gradient.
pub fn critic_loss_and_grad(params: &PolicyParams, batch: &[BanditTransition]) -> (f64, Vec<f64>) {
    let d = params.input_dim;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; d + 1];
    let mut loss = 0.0;
    for t in batch {
        let v = params.critic[d] + params.critic[..d].iter().zip(&t.state).map(|(a, b)| a * b).sum::<f64>();
        let err = v - t.reward;
        loss += err * err;
        for (g, z) in grad[..d].iter_mut().zip(&t.state) {
            *g += 2.0 * err * z / n;
        }
        grad[d] += 2.0 * err / n;
    }
    (loss / n, grad)
}

/// Advantages r − V(z) under the current critic, optionally standardized.
pub fn advantages(params: &PolicyParams, batch: &[BanditTransition], normalize: bool) -> Vec<f64> {
    let mut adv: Vec<f64> = batch.iter().map(|t| t.reward - params.value(&t.state).unwrap_or(0.0)).collect();
    if normalize && adv.len() > 1 {
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64;
        let std = var.sqrt().max(1e-8);
        for a in &mut adv {
            *a = (*a - mean) / std;
        }
    }
    adv
}

/// `config.epochs` full-batch gradient steps: ascent on the surrogate,
/// descent on the critic error. Advantages are fixed before the first step.
pub fn ppo_update(params: &PolicyParams, batch: &[BanditTransition], config: &PpoConfig, update: usize) -> Result<(PolicyParams, UpdateStats), SelectorError> {
    if batch.is_empty() {
        return Err(SelectorError::EmptyBatch);
    }
    for t in batch {
        params.check(&t.state)?;
        if !(t.behavior_prob > 0.0 && t.behavior_prob <= 1.0) {
            return Err(SelectorError::BadBehaviorProb(t.behavior_prob));
        }
    }
    let adv = advantages(params, batch, config.normalize_advantages);
    let mut next = params.clone();
    let mut stats = None;
    for _ in 0..config.epochs.max(1) {
        let (objective, ga) = actor_objective_and_grad(&next, batch, &adv, config.clip, config.entropy_coef);
        let (closs, gc) = critic_loss_and_grad(&next, batch);
        if !ga.iter().chain(&gc).all(|g| g.is_finite()) {
            return Err(SelectorError::NonFinite {
                update,
                detail: format!("actor objective {objective}, critic loss {closs}"),
            });
        }
        stats.get_or_insert(UpdateStats {
            actor_objective: objective,
            critic_loss: closs,
        });
        if config.epochs == 0 {
            break;
        }
        for (p, g) in next.actor.iter_mut().zip(&ga) {
            *p += config.actor_lr * g;
        }
        for (p, g) in next.critic.iter_mut().zip(&gc) {
            *p -= config.critic_lr * g;
        }
    }
    Ok((next, stats.expect("at least one pass")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub void_arms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub params: PolicyParams,
    pub config: PpoConfig,
    pub config_hash: String,
    pub log: Vec<TrainLogRow>,
}

impl TrainedPolicy {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,mean_reward,actor_loss,critic_loss,void_arms\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.mean_reward, r.actor_loss, r.critic_loss, r.void_arms);
        }
        s
    }
}

/// A user the bandit can be trained on: id and state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditUser {
    pub user_id: String,
    pub state: Vec<f64>,
}

/// Trains the policy. Each step samples a user, acts ε-greedily, draws the
/// reward from the chosen bank and stores the transition; every
/// `batch_size` steps a PPO update runs on a batch from the replay buffer.
pub fn train(store: &MemoryStore, users: &[BanditUser], config: &PpoConfig) -> Result<TrainedPolicy, SelectorError> {
    config.validate()?;
    if users.is_empty() {
        return Err(SelectorError::NoUsers);
    }
    let dim = users[0].state.len();
    let mut params = PolicyParams::init(dim, config.hidden, config.seed);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut rng = rng_for(config.seed, &["bandit-train"]);
    let mut log = Vec::new();
    let mut window_reward = 0.0;
    let mut window_void = 0;
    let mut window_len = 0;
    let mut current = rng.random_range(0..users.len());
    for step in 1..=config.steps {
        let user = &users[current];
        let (action, behavior_prob) = act(&params, &user.state, config.epsilon, &mut rng)?;
        let perspective = Perspective::from_code(action).expect("arm in range");
        let draw = reward_for(store.bank(&user.user_id, perspective), config.tau, &mut rng);
        let next = rng.random_range(0..users.len());
        buffer.push(BanditTransition {
            state: user.state.clone(),
            action,
            reward: draw.reward,
            next_state: users[next].state.clone(),
            behavior_prob,
        });
        window_reward += draw.reward;
        window_void += usize::from(draw.void_arm);
        window_len += 1;
        current = next;

        if step % config.batch_size == 0 {
            let batch = buffer.sample(config.batch_size, config.replay, &mut rng);
            let (updated, stats) = ppo_update(&params, &batch, config, log.len())?;
            params = updated;
            log.push(TrainLogRow {
                step,
                mean_reward: window_reward / window_len as f64,
                actor_loss: -stats.actor_objective,
                critic_loss: stats.critic_loss,
                void_arms: window_void,
            });
            window_reward = 0.0;
            window_void = 0;
            window_len = 0;
        }
    }
    Ok(TrainedPolicy {
        params,
        config_hash: config.hash(),
        config: config.clone(),
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub perspective: Perspective,
    pub logits: [f64; N_ARMS],
    pub reflection: Option<Reflection>,
    /// The chosen bank was empty, so no reflection is used.
    pub fallback: bool,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy choice: the arm with the largest logit, then the best reflection
/// in that arm's bank.
pub fn infer(params: &PolicyParams, store: &MemoryStore, user_id: &str, z: &[f64]) -> Result<Inference, SelectorError> {
    let logits = params.logits(z)?;
    let perspective = Perspective::from_code(argmax(&logits)).expect("arm in range");
    let reflection = store.bank(user_id, perspective).and_then(|b| best_reflection(b).ok()).cloned();
    Ok(Inference {
        perspective,
        logits,
        fallback: reflection.is_none(),
        reflection,
    })
}
