//! Per-user, per-perspective memory banks: scoring reflections by their
//! improvement effect, refining, demonstration sampling, and the offline
//! self-improvement loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cf::CfModel;
use crate::cluster::UserClustering;
use crate::corpus::{CandidateSet, Corpus, Split};
use crate::hashing::{rng_for, sha256_hex};
use crate::llm::{Gateway, RankedList};
use crate::metrics::{rank_of_target, MetricKind};
use crate::reflection::{build_view, generate_offline_predictions, reflect, Perspective, Reflection, ReflectionError, ReflectionId};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_N_DEMOS: usize = 3;
pub const DEFAULT_ROUNDS: u32 = 3;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory bank for user {user_id:?} ({perspective}) is empty")]
    EmptyBank { user_id: String, perspective: Perspective },
    #[error("number of demonstrations must be positive")]
    ZeroDemos,
    #[error("demonstration pool is empty")]
    EmptyPool,
    #[error("sampling temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("group-level refining needs a user clustering")]
    MissingClustering,
    #[error("reflection {0} has no improvement score")]
    Unscored(ReflectionId),
    #[error("reflection {id} belongs to ({user_id:?}, {perspective}), not this bank")]
    WrongBank {
        id: ReflectionId,
        user_id: String,
        perspective: Perspective,
    },
    #[error("no validation data for user {0:?}")]
    MissingUser(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Reflection(#[from] ReflectionError),
}

/// Improvement effect of one reflection on its user's validation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpScore {
    pub reflection_id: ReflectionId,
    pub metric: MetricKind,
    pub with_value: f64,
    pub without_value: f64,
    pub imp: f64,
    pub threshold: f64,
}

impl ImpScore {
    pub fn new(reflection_id: ReflectionId, metric: MetricKind, with_value: f64, without_value: f64, threshold: f64) -> Self {
        Self {
            reflection_id,
            metric,
            with_value,
            without_value,
            imp: with_value - without_value,
            threshold,
        }
    }

    pub fn effective(&self) -> bool {
        self.imp > self.threshold
    }
}

/// Scores `reflection` on the validation candidates: metric with the
/// reflection in the prompt minus metric without it.
#[allow(clippy::too_many_arguments)]
pub fn score(
    gateway: &Gateway,
    corpus: &Corpus,
    split: &Split,
    candidates: &CandidateSet,
    reflection: &Reflection,
    metric: MetricKind,
    threshold: f64,
    max_history: usize,
) -> Result<ImpScore, ReflectionError> {
    let (with, without) = generate_offline_predictions(gateway, corpus, split, candidates, &reflection.text, max_history)?;
    let target = &candidates.target_item_id;
    Ok(ImpScore::new(
        reflection.reflection_id,
        metric,
        metric.value(rank_of_target(&with.item_ids, target)),
        metric.value(rank_of_target(&without.item_ids, target)),
        threshold,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub user_id: String,
    pub perspective: Perspective,
    pub capacity: Option<usize>,
    entries: Vec<Reflection>,
}

impl MemoryBank {
    pub fn new(user_id: &str, perspective: Perspective, capacity: Option<usize>) -> Self {
        Self {
            user_id: user_id.to_string(),
            perspective,
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Reflection] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds a scored reflection. When over capacity, the lowest-imp entry is
    /// evicted (latest id on ties) and returned.
    pub fn push(&mut self, reflection: Reflection) -> Result<Option<Reflection>, MemoryError> {
        if reflection.user_id != self.user_id || reflection.perspective != self.perspective {
            return Err(MemoryError::WrongBank {
                id: reflection.reflection_id,
                user_id: reflection.user_id,
                perspective: reflection.perspective,
            });
        }
        if reflection.imp.is_none() {
            return Err(MemoryError::Unscored(reflection.reflection_id));
        }
        self.entries.push(reflection);
        match self.capacity {
            Some(cap) if self.entries.len() > cap => {
                let worst = self
                    .entries
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| imp_of(a).total_cmp(&imp_of(b)).then(b.reflection_id.cmp(&a.reflection_id)))
                    .map(|(i, _)| i)
                    .expect("non-empty");
                Ok(Some(self.entries.remove(worst)))
            }
            _ => Ok(None),
        }
    }

    pub fn effective(&self, threshold: f64) -> impl Iterator<Item = &Reflection> {
        self.entries.iter().filter(move |r| imp_of(r) > threshold)
    }
}

fn imp_of(r: &Reflection) -> f64 {
    r.imp.expect("banks hold scored reflections only")
}

/// Highest-imp entry, earliest id on ties.
pub fn best_reflection(bank: &MemoryBank) -> Result<&Reflection, MemoryError> {
    bank.entries
        .iter()
        .max_by(|a, b| imp_of(a).total_cmp(&imp_of(b)).then(b.reflection_id.cmp(&a.reflection_id)))
        .ok_or_else(|| MemoryError::EmptyBank {
            user_id: bank.user_id.clone(),
            perspective: bank.perspective,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineLevel {
    Global,
    Group,
    Individual,
}

impl std::str::FromStr for RefineLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(RefineLevel::Global),
            "group" => Ok(RefineLevel::Group),
            "individual" => Ok(RefineLevel::Individual),
            _ => Err(format!("unknown refine level {s:?}")),
        }
    }
}

/// One evaluation of a reflection on one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub reflection_id: ReflectionId,
    pub user_id: String,
    pub imp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinePlan {
    pub level: RefineLevel,
    pub perspective: Perspective,
    /// Scope key ("global", "cluster:3", "user:<id>") to the winning reflection.
    pub selected: BTreeMap<String, ReflectionId>,
    /// Scopes with no effective reflection.
    pub omitted: Vec<String>,
    pub temperature: f64,
}

pub fn scope_key(level: RefineLevel, user_id: &str, clustering: Option<&UserClustering>) -> Option<String> {
    match level {
        RefineLevel::Global => Some("global".into()),
        RefineLevel::Group => clustering?.cluster_of(user_id).map(|c| format!("cluster:{c}")),
        RefineLevel::Individual => Some(format!("user:{user_id}")),
    }
}

impl RefinePlan {
    pub fn selected_for(&self, user_id: &str, clustering: Option<&UserClustering>) -> Option<ReflectionId> {
        scope_key(self.level, user_id, clustering).and_then(|k| self.selected.get(&k).copied())
    }
}

/// Picks, per scope, the reflection with the greatest mean imp over the
/// scope's users where it was evaluated. Only reflections whose mean exceeds
/// `threshold` qualify; ties go to the earliest id.
pub fn refine(
    table: &[ScoreEntry],
    level: RefineLevel,
    perspective: Perspective,
    clustering: Option<&UserClustering>,
    threshold: f64,
    temperature: f64,
) -> Result<RefinePlan, MemoryError> {
    if level == RefineLevel::Group && clustering.is_none() {
        return Err(MemoryError::MissingClustering);
    }
    let scopes: Vec<String> = match level {
        RefineLevel::Global => vec!["global".into()],
        RefineLevel::Group => (0..clustering.expect("checked").k).map(|c| format!("cluster:{c}")).collect(),
        RefineLevel::Individual => table
            .iter()
            .map(|e| format!("user:{}", e.user_id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let mut sums: BTreeMap<&str, BTreeMap<ReflectionId, (f64, usize)>> = BTreeMap::new();
    let keyed: Vec<(Option<String>, &ScoreEntry)> = table.iter().map(|e| (scope_key(level, &e.user_id, clustering), e)).collect();
    for (key, e) in &keyed {
        if let Some(k) = key {
            let slot = sums.entry(k.as_str()).or_default().entry(e.reflection_id).or_insert((0.0, 0));
            slot.0 += e.imp;
            slot.1 += 1;
        }
    }
    let mut selected = BTreeMap::new();
    let mut omitted = Vec::new();
    for scope in scopes {
        let winner = sums.get(scope.as_str()).and_then(|m| {
            m.iter()
                .map(|(id, (s, n))| (*id, s / *n as f64))
                .filter(|(_, mean)| *mean > threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        });
        match winner {
            Some((id, _)) => {
                selected.insert(scope, id);
            }
            None => omitted.push(scope),
        }
    }
    Ok(RefinePlan {
        level,
        perspective,
        selected,
        omitted,
        temperature,
    })
}

/// Softmax weights of imp / tau, shifted by the max for stability.
pub fn softmax_weights(imps: &[f64], tau: f64) -> Vec<f64> {
    let max = imps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = imps.iter().map(|x| ((x - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Index drawn from unnormalized non-negative weights.
pub fn draw_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Draws up to `n` reflections without replacement, each draw with
/// probability proportional to softmax(imp / tau) over what remains.
pub fn sample_demos(pool: &[&Reflection], n: usize, tau: f64, rng: &mut impl Rng) -> Result<Vec<Reflection>, MemoryError> {
    if n == 0 {
        return Err(MemoryError::ZeroDemos);
    }
    if pool.is_empty() {
        return Err(MemoryError::EmptyPool);
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(MemoryError::BadTemperature(tau));
    }
    if let Some(r) = pool.iter().find(|r| r.imp.is_none()) {
        return Err(MemoryError::Unscored(r.reflection_id));
    }
    let mut remaining: Vec<&Reflection> = pool.to_vec();
    let mut out = Vec::new();
    while out.len() < n && !remaining.is_empty() {
        let imps: Vec<f64> = remaining.iter().map(|r| imp_of(r)).collect();
        let i = draw_index(&softmax_weights(&imps, tau), rng);
        out.push(remaining.remove(i).clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub user_id: String,
    pub perspective: Perspective,
    pub round: u32,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreMeta {
    next_id: u64,
    capacity: Option<usize>,
    pending: Vec<Reflection>,
    failures: Vec<FailureRecord>,
}

/// All banks of a run plus the bookkeeping around them. The iteration driver
/// is the only writer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryStore {
    banks: BTreeMap<(String, Perspective), MemoryBank>,
    scores: BTreeMap<ReflectionId, ImpScore>,
    /// Generated but not yet scored because the scoring calls failed.
    pending: Vec<Reflection>,
    failures: Vec<FailureRecord>,
    next_id: u64,
    capacity: Option<usize>,
}

impl MemoryStore {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            ..Default::default()
        }
    }

    pub fn allocate_id(&mut self) -> ReflectionId {
        let id = ReflectionId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Stores a scored reflection in its bank.
    pub fn commit(&mut self, mut reflection: Reflection, score: ImpScore) -> Result<(), MemoryError> {
        reflection.imp = Some(score.imp);
        reflection.effective = Some(score.effective());
        let key = (reflection.user_id.clone(), reflection.perspective);
        let capacity = self.capacity;
        let bank = self
            .banks
            .entry(key)
            .or_insert_with(|| MemoryBank::new(&reflection.user_id, reflection.perspective, capacity));
        self.scores.insert(score.reflection_id, score);
        if let Some(evicted) = bank.push(reflection)? {
            self.scores.remove(&evicted.reflection_id);
        }
        Ok(())
    }

    pub fn add_pending(&mut self, reflection: Reflection) {
        self.pending.push(reflection);
    }

    pub fn record_failure(&mut self, failure: FailureRecord) {
        self.failures.push(failure);
    }

    pub fn bank(&self, user_id: &str, perspective: Perspective) -> Option<&MemoryBank> {
        self.banks.get(&(user_id.to_string(), perspective))
    }

    pub fn banks(&self) -> impl Iterator<Item = &MemoryBank> {
        self.banks.values()
    }

    pub fn score_of(&self, id: ReflectionId) -> Option<&ImpScore> {
        self.scores.get(&id)
    }

    pub fn pending(&self) -> &[Reflection] {
        &self.pending
    }

    pub fn failures(&self) -> &[FailureRecord] {
        &self.failures
    }

    pub fn len(&self) -> usize {
        self.banks.values().map(MemoryBank::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self, perspective: Perspective) -> impl Iterator<Item = &Reflection> {
        self.banks
            .iter()
            .filter(move |((_, p), _)| *p == perspective)
            .flat_map(|(_, b)| b.entries.iter())
    }

    pub fn score_table(&self, perspective: Perspective) -> Vec<ScoreEntry> {
        self.entries(perspective)
            .map(|r| ScoreEntry {
                reflection_id: r.reflection_id,
                user_id: r.user_id.clone(),
                imp: imp_of(r),
            })
            .collect()
    }

    pub fn find(&self, id: ReflectionId) -> Option<&Reflection> {
        self.banks.values().flat_map(|b| b.entries.iter()).find(|r| r.reflection_id == id)
    }

    fn bank_file(dir: &Path, user_id: &str, perspective: Perspective) -> PathBuf {
        let safe: String = user_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let name = if safe == user_id {
            format!("{safe}.{perspective}.jsonl")
        } else {
            format!("{safe}-{}.{perspective}.jsonl", &sha256_hex(user_id.as_bytes())[..8])
        };
        dir.join("banks").join(name)
    }

    /// Writes one JSONL file per bank plus `scores.jsonl` and `memory.json`.
    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| MemoryError::Io { path, source }
        };
        let banks_dir = dir.join("banks");
        if banks_dir.exists() {
            fs::remove_dir_all(&banks_dir).map_err(io(&banks_dir))?;
        }
        fs::create_dir_all(&banks_dir).map_err(io(&banks_dir))?;
        for bank in self.banks.values() {
            let path = Self::bank_file(dir, &bank.user_id, bank.perspective);
            write_jsonl(&path, &bank.entries)?;
        }
        write_jsonl(&dir.join("scores.jsonl"), &self.scores.values().collect::<Vec<_>>())?;
        let meta = StoreMeta {
            next_id: self.next_id,
            capacity: self.capacity,
            pending: self.pending.clone(),
            failures: self.failures.clone(),
        };
        let path = dir.join("memory.json");
        let text = serde_json::to_string_pretty(&meta).expect("serializable");
        fs::write(&path, text).map_err(io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, MemoryError> {
        let path = dir.join("memory.json");
        let text = fs::read_to_string(&path).map_err(|source| MemoryError::Io { path: path.clone(), source })?;
        let meta: StoreMeta = serde_json::from_str(&text).map_err(|source| MemoryError::Json { path, line: 0, source })?;
        let mut store = MemoryStore {
            next_id: meta.next_id,
            capacity: meta.capacity,
            pending: meta.pending,
            failures: meta.failures,
            ..Default::default()
        };
        for score in read_jsonl::<ImpScore>(&dir.join("scores.jsonl"))? {
            store.scores.insert(score.reflection_id, score);
        }
        let banks_dir = dir.join("banks");
        let mut files: Vec<PathBuf> = fs::read_dir(&banks_dir)
            .map_err(|source| MemoryError::Io { path: banks_dir.clone(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for file in files {
            for r in read_jsonl::<Reflection>(&file)? {
                let key = (r.user_id.clone(), r.perspective);
                let capacity = store.capacity;
                store
                    .banks
                    .entry(key)
                    .or_insert_with(|| MemoryBank::new(&r.user_id, r.perspective, capacity))
                    .entries
                    .push(r);
            }
        }
        Ok(store)
    }

    /// Content hash over all banks and scores.
    pub fn snapshot_id(&self) -> String {
        let mut buf = String::new();
        for bank in self.banks.values() {
            for r in &bank.entries {
                buf.push_str(&serde_json::to_string(r).expect("serializable"));
                buf.push('\n');
            }
        }
        for s in self.scores.values() {
            buf.push_str(&serde_json::to_string(s).expect("serializable"));
            buf.push('\n');
        }
        sha256_hex(buf.as_bytes())
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), MemoryError> {
    let io = |source| MemoryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for row in rows {
        serde_json::to_writer(&mut f, row).expect("serializable");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, MemoryError> {
    let f = fs::File::open(path).map_err(|source| MemoryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MemoryError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Everything the offline loop reads. `baseline` holds the no-reflection
/// validation prediction per user, which every view is built from.
pub struct OfflineContext<'a> {
    pub gateway: &'a Gateway,
    pub corpus: &'a Corpus,
    /// Sorted by user id, as produced by `make_split`.
    pub splits: &'a [Split],
    pub validation: &'a BTreeMap<String, CandidateSet>,
    pub baseline: &'a BTreeMap<String, RankedList>,
    pub cf: Option<&'a CfModel>,
    pub clustering: Option<&'a UserClustering>,
    pub max_history: usize,
    pub max_concurrency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub rounds: u32,
    pub level: RefineLevel,
    pub n_demos: usize,
    pub tau: f64,
    pub threshold: f64,
    pub metric: MetricKind,
    pub seed: u64,
    pub perspectives: Vec<Perspective>,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            level: RefineLevel::Group,
            n_demos: DEFAULT_N_DEMOS,
            tau: DEFAULT_TAU,
            threshold: DEFAULT_THRESHOLD,
            metric: MetricKind::Ndcg(10),
            seed: 0,
            perspectives: Perspective::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u32,
    pub attempted: usize,
    pub scored: usize,
    pub failed: usize,
    pub mean_imp: Option<f64>,
    pub effective: usize,
}

/// Reflections produced in one round, not yet scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRound {
    pub round: u32,
    pub reflections: Vec<Reflection>,
    pub failures: Vec<FailureRecord>,
}

struct Job {
    split_idx: usize,
    perspective: Perspective,
    demos: Vec<Reflection>,
    id: ReflectionId,
}

fn thread_pool(max_concurrency: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrency.max(1))
        .build()
        .expect("thread pool")
}

fn split_index(ctx: &OfflineContext<'_>, user_id: &str) -> Option<usize> {
    ctx.splits.binary_search_by(|s| s.user_id.as_str().cmp(user_id)).ok()
}

fn run_generation(ctx: &OfflineContext<'_>, round: u32, jobs: Vec<Job>) -> GeneratedRound {
    let outcomes: Vec<Result<Reflection, String>> = thread_pool(ctx.max_concurrency).install(|| {
        jobs.par_iter()
            .map(|job| {
                let split = &ctx.splits[job.split_idx];
                let user = &split.user_id;
                let (Some(cands), Some(pred)) = (ctx.validation.get(user), ctx.baseline.get(user)) else {
                    return Err(MemoryError::MissingUser(user.clone()).to_string());
                };
                build_view(job.perspective, ctx.corpus, split, cands, pred, ctx.cf, ctx.max_history)
                    .and_then(|view| reflect(ctx.gateway, &view, &job.demos, job.id))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut out = GeneratedRound {
        round,
        reflections: Vec::new(),
        failures: Vec::new(),
    };
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => out.reflections.push(r),
            Err(message) => out.failures.push(FailureRecord {
                user_id: ctx.splits[job.split_idx].user_id.clone(),
                perspective: job.perspective,
                round,
                stage: "reflect".into(),
                message,
            }),
        }
    }
    out
}

/// Demonstrations for one (user, perspective) in a later round: the refine
/// plan's winner for the user's scope first, then softmax-sampled entries
/// from the same scope.
fn pick_demos(
    store: &MemoryStore,
    plan: &RefinePlan,
    ctx: &OfflineContext<'_>,
    config: &IterateConfig,
    user_id: &str,
    round: u32,
) -> Result<Vec<Reflection>, MemoryError> {
    let scope = scope_key(config.level, user_id, ctx.clustering);
    let winner = plan.selected_for(user_id, ctx.clustering).and_then(|id| store.find(id)).cloned();
    let pool: Vec<&Reflection> = store
        .entries(plan.perspective)
        .filter(|r| scope.is_some() && scope_key(config.level, &r.user_id, ctx.clustering) == scope)
        .filter(|r| winner.as_ref().is_none_or(|w| w.reflection_id != r.reflection_id))
        .collect();
    let mut demos: Vec<Reflection> = winner.into_iter().collect();
    let want = config.n_demos.saturating_sub(demos.len());
    if want > 0 && !pool.is_empty() {
        let mut rng = rng_for(config.seed, &["demos", &round.to_string(), user_id, &plan.perspective.to_string()]);
        demos.extend(sample_demos(&pool, want, config.tau, &mut rng)?);
    }
    Ok(demos)
}

/// Generates one reflection per (user, perspective). Round 0 uses no
/// demonstrations; later rounds draw them from what the store holds now.
pub fn generate_round(ctx: &OfflineContext<'_>, store: &mut MemoryStore, config: &IterateConfig, round: u32) -> Result<GeneratedRound, MemoryError> {
    let mut plans = BTreeMap::new();
    if round > 0 {
        for &p in &config.perspectives {
            let plan = refine(&store.score_table(p), config.level, p, ctx.clustering, config.threshold, config.tau)?;
            plans.insert(p, plan);
        }
    }
    let mut jobs = Vec::new();
    for (i, split) in ctx.splits.iter().enumerate() {
        for &p in &config.perspectives {
            let demos = match plans.get(&p) {
                Some(plan) => pick_demos(store, plan, ctx, config, &split.user_id, round)?,
                None => vec![],
            };
            jobs.push(Job {
                split_idx: i,
                perspective: p,
                demos,
                id: store.allocate_id(),
            });
        }
    }
    Ok(run_generation(ctx, round, jobs))
}

/// Scores a generated round and commits the results. Reflections whose
/// scoring calls fail stay pending.
pub fn score_round(ctx: &OfflineContext<'_>, store: &mut MemoryStore, config: &IterateConfig, generated: GeneratedRound) -> Result<RoundStats, MemoryError> {
    let outcomes: Vec<Result<ImpScore, String>> = thread_pool(ctx.max_concurrency).install(|| {
        generated
            .reflections
            .par_iter()
            .map(|r| {
                let i = split_index(ctx, &r.user_id).ok_or_else(|| MemoryError::MissingUser(r.user_id.clone()).to_string())?;
                let cands = ctx
                    .validation
                    .get(&r.user_id)
                    .ok_or_else(|| MemoryError::MissingUser(r.user_id.clone()).to_string())?;
                score(ctx.gateway, ctx.corpus, &ctx.splits[i], cands, r, config.metric, config.threshold, ctx.max_history).map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut stats = RoundStats {
        round: generated.round,
        attempted: generated.reflections.len() + generated.failures.len(),
        scored: 0,
        failed: generated.failures.len(),
        mean_imp: None,
        effective: 0,
    };
    for f in generated.failures {
        store.record_failure(f);
    }
    let mut imp_sum = 0.0;
    for (r, outcome) in generated.reflections.into_iter().zip(outcomes) {
        match outcome {
            Ok(s) => {
                stats.scored += 1;
                imp_sum += s.imp;
                stats.effective += usize::from(s.effective());
                store.commit(r, s)?;
            }
            Err(message) => {
                stats.failed += 1;
                store.record_failure(FailureRecord {
                    user_id: r.user_id.clone(),
                    perspective: r.perspective,
                    round: generated.round,
                    stage: "score".into(),
                    message,
                });
                store.add_pending(r);
            }
        }
    }
    if stats.scored > 0 {
        stats.mean_imp = Some(imp_sum / stats.scored as f64);
    }
    Ok(stats)
}

/// Round 0: one demonstration-free reflection per (user, perspective), scored.
pub fn generate_initial(ctx: &OfflineContext<'_>, store: &mut MemoryStore, config: &IterateConfig) -> Result<RoundStats, MemoryError> {
    let generated = generate_round(ctx, store, config, 0)?;
    score_round(ctx, store, config, generated)
}

pub fn iterate_round(ctx: &OfflineContext<'_>, store: &mut MemoryStore, config: &IterateConfig, round: u32) -> Result<RoundStats, MemoryError> {
    let generated = generate_round(ctx, store, config, round)?;
    score_round(ctx, store, config, generated)
}

/// Runs rounds `1..=config.rounds` of demonstration-driven regeneration and
/// returns per-round statistics.
pub fn iterate(ctx: &OfflineContext<'_>, store: &mut MemoryStore, config: &IterateConfig) -> Result<Vec<RoundStats>, MemoryError> {
    (1..=config.rounds).map(|round| iterate_round(ctx, store, config, round)).collect()
}
