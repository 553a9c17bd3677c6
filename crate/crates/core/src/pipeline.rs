//! Stage runner for a run directory.
//!
//! Stages talk to each other only through files in the run directory.
//! `manifest.json` records the config hash and the SHA-256 of every output;
//! a stage whose record matches the files on disk is skipped on the next
//! invocation, so an interrupted run picks up at the first unfinished stage.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cf::{train_cf, CfModel};
use crate::cluster::{cluster_users, UserClustering};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{ingest, make_split, sample_candidates, CandidateSet, Corpus, IngestReport, Phase, Split};
use crate::eval::{run_online_eval, EvalContext, EvalMode, EvalReport, Provenance};
use crate::hashing::sha256_hex;
use crate::llm::{mock_policy, BackendKind, CachedBackend, Gateway, HttpBackend, LlmBackend, RankedList, TemplateId};
use crate::memory::{
    generate_round, iterate_round, refine, score_round, GeneratedRound, IterateConfig, MemoryStore, OfflineContext, RefinePlan, RoundStats,
};
use crate::metrics::MetricKind;
use crate::reflection::{recommend, Perspective};
use crate::selector::{train, BanditUser, TrainedPolicy};
use crate::synthetic;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Split,
    TrainCf,
    Cluster,
    PredictOffline,
    Reflect,
    Score,
    Iterate,
    Refine,
    TrainBandit,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Ingest,
        Stage::Split,
        Stage::TrainCf,
        Stage::Cluster,
        Stage::PredictOffline,
        Stage::Reflect,
        Stage::Score,
        Stage::Iterate,
        Stage::Refine,
        Stage::TrainBandit,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::TrainCf => "train-cf",
            Stage::Cluster => "cluster",
            Stage::PredictOffline => "predict-offline",
            Stage::Reflect => "reflect",
            Stage::Score => "score",
            Stage::Iterate => "iterate",
            Stage::Refine => "refine",
            Stage::TrainBandit => "train-bandit",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("listed")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    /// `stage` doubles as the resume token: rerunning the pipeline (or that
    /// subcommand) continues from there.
    #[error("stage {stage} failed: {message} (resume token: {stage})")]
    Stage { stage: Stage, message: String },
    #[error("stage {stage} needs {missing} to be completed first")]
    NotReady { stage: Stage, missing: Stage },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Path relative to the run directory to SHA-256 of its content.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub template_hashes: BTreeMap<String, String>,
    pub threshold: f64,
    pub tau: f64,
    pub metric: MetricKind,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFile {
    pub validation: BTreeMap<String, CandidateSet>,
    pub test: BTreeMap<String, CandidateSet>,
}

/// No-reflection validation predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub lists: BTreeMap<String, RankedList>,
    pub failures: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub reports: Vec<EvalReport>,
}

pub fn template_hashes() -> BTreeMap<String, String> {
    TemplateId::ALL.iter().map(|t| (t.to_string(), t.hash())).collect()
}

/// Every component seed of a run, derived from the master seed.
pub fn seed_matrix(config: &RunConfig) -> BTreeMap<String, u64> {
    let mut seeds: BTreeMap<String, u64> = ["candidates", "cf", "cluster", "mock", "iterate", "bandit", "eval"]
        .iter()
        .map(|c| (c.to_string(), config.seed_for(c)))
        .collect();
    seeds.insert("master".into(), config.seed);
    seeds
}

/// File name for a mode's evaluation report.
pub fn eval_file(mode: &EvalMode) -> String {
    let name: String = mode
        .to_string()
        .chars()
        .map(|c| match c {
            ':' => '_',
            '+' => '-',
            c => c,
        })
        .collect();
    format!("eval/{name}.json")
}

type StageResult<T> = Result<T, String>;

fn err<E: fmt::Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> StageResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err(&parent.display().to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(err(&tmp.display().to_string()))?;
    fs::rename(&tmp, path).map_err(err(&path.display().to_string()))
}

fn files_under(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let full = root.join(rel);
    if full.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&full)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            files_under(root, &rel.join(e.file_name()), out)?;
        }
    } else {
        out.push(rel.to_path_buf());
    }
    Ok(())
}

fn rel_key(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// A run directory with its configuration and manifest.
pub struct Run {
    dir: PathBuf,
    config: RunConfig,
    manifest: Manifest,
}

impl Run {
    /// Opens or creates `dir`. An existing manifest is kept only when it was
    /// written under the same config hash.
    pub fn open(dir: &Path, config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let io = |message: String| PipelineError::Io {
            path: dir.to_path_buf(),
            message,
        };
        fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
        let hash = config.hash();
        let fresh = Manifest {
            config_hash: hash.clone(),
            seeds: seed_matrix(&config),
            template_hashes: template_hashes(),
            threshold: config.memory.threshold,
            tau: config.memory.tau,
            metric: config.memory.metric,
            stages: Vec::new(),
        };
        let manifest = match fs::read_to_string(dir.join(MANIFEST)) {
            Ok(text) => match serde_json::from_str::<Manifest>(&text) {
                Ok(m) if m.config_hash == hash && m.template_hashes == fresh.template_hashes => m,
                _ => fresh,
            },
            Err(_) => fresh,
        };
        write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes()).map_err(io)?;
        let run = Run {
            dir: dir.to_path_buf(),
            config,
            manifest,
        };
        run.save_manifest().map_err(io)?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save_manifest(&self) -> StageResult<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("serializable") + "\n";
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())
    }

    /// The stage has a record and every recorded output is on disk unchanged.
    pub fn is_complete(&self, stage: Stage) -> bool {
        let Some(rec) = self.manifest.stages.iter().find(|r| r.stage == stage) else {
            return false;
        };
        rec.outputs
            .iter()
            .all(|(rel, hash)| fs::read(self.dir.join(rel)).is_ok_and(|b| sha256_hex(&b) == *hash))
    }

    /// Runs every stage up to and including `last`, skipping completed ones.
    /// Once a stage reruns, everything after it reruns too. Returns the
    /// stages actually executed.
    pub fn run_until(&mut self, last: Stage) -> Result<Vec<Stage>, PipelineError> {
        let mut ran = Vec::new();
        for stage in Stage::ALL.into_iter().take(last.index() + 1) {
            if ran.is_empty() && self.is_complete(stage) {
                continue;
            }
            self.run_stage(stage)?;
            ran.push(stage);
        }
        Ok(ran)
    }

    /// Runs one stage. All earlier stages must be complete. Records of later
    /// stages are dropped since their inputs may change.
    pub fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        if let Some(missing) = Stage::ALL[..stage.index()].iter().find(|s| !self.is_complete(**s)) {
            return Err(PipelineError::NotReady { stage, missing: *missing });
        }
        let fail = |message: String| PipelineError::Stage { stage, message };
        let outputs = self.execute(stage).map_err(fail)?;
        let mut files = Vec::new();
        for rel in &outputs {
            files_under(&self.dir, rel, &mut files).map_err(|e| fail(e.to_string()))?;
        }
        let mut record = StageRecord {
            stage,
            outputs: BTreeMap::new(),
        };
        for rel in files {
            let bytes = fs::read(self.dir.join(&rel)).map_err(|e| fail(e.to_string()))?;
            record.outputs.insert(rel_key(&rel), sha256_hex(&bytes));
        }
        self.manifest.stages.retain(|r| r.stage.index() < stage.index());
        self.manifest.stages.push(record);
        self.save_manifest().map_err(fail)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn read<T: DeserializeOwned>(&self, rel: &str) -> StageResult<T> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(err(rel))?;
        serde_json::from_str(&text).map_err(err(rel))
    }

    fn write<T: Serialize>(&self, rel: &str, value: &T) -> StageResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(err(rel))? + "\n";
        write_atomic(&self.path(rel), text.as_bytes())?;
        Ok(PathBuf::from(rel))
    }

    fn write_text(&self, rel: &str, text: &str) -> StageResult<PathBuf> {
        write_atomic(&self.path(rel), text.as_bytes())?;
        Ok(PathBuf::from(rel))
    }

    fn iterate_config(&self) -> IterateConfig {
        let m = &self.config.memory;
        IterateConfig {
            rounds: m.rounds,
            level: m.level,
            n_demos: m.n_demos,
            tau: m.tau,
            threshold: m.threshold,
            metric: m.metric,
            seed: self.config.seed_for("iterate"),
            perspectives: Perspective::ALL.to_vec(),
        }
    }

    fn gateway(&self, corpus: &Corpus, splits: &[Split]) -> StageResult<Gateway> {
        let llm = self.config.llm.clone().with_env_overrides();
        let inner: Box<dyn LlmBackend> = match llm.kind {
            BackendKind::Mock => Box::new(mock_policy(&llm.scenario, corpus, splits, self.config.seed_for("mock")).map_err(err("mock backend"))?),
            BackendKind::Http => Box::new(HttpBackend::from_config(&llm)),
        };
        let backend: Box<dyn LlmBackend> = match &llm.cache_dir {
            Some(dir) => Box::new(CachedBackend::new(inner, dir).map_err(err("llm cache"))?),
            None => inner,
        };
        let audit = llm.audit_log.clone().unwrap_or_else(|| self.path("llm_audit.jsonl"));
        Gateway::new(backend)
            .with_token_budget(llm.token_budget)
            .with_audit_log(&audit)
            .map_err(err("audit log"))
    }

    fn execute(&self, stage: Stage) -> StageResult<Vec<PathBuf>> {
        match stage {
            Stage::Ingest => self.stage_ingest(),
            Stage::Split => self.stage_split(),
            Stage::TrainCf => self.stage_train_cf(),
            Stage::Cluster => self.stage_cluster(),
            Stage::PredictOffline => self.stage_predict_offline(),
            Stage::Reflect => self.stage_reflect(),
            Stage::Score => self.stage_score(),
            Stage::Iterate => self.stage_iterate(),
            Stage::Refine => self.stage_refine(),
            Stage::TrainBandit => self.stage_train_bandit(),
            Stage::Eval => self.stage_eval(),
            Stage::Report => self.stage_report(),
        }
    }

    fn stage_ingest(&self) -> StageResult<Vec<PathBuf>> {
        let data = &self.config.data;
        let (corpus, report) = match (&data.catalog, &data.interactions) {
            (Some(cat), Some(inter)) => ingest(cat, inter).map_err(err("ingest"))?,
            _ => {
                let corpus = synthetic::generate(&data.synthetic).map_err(err("synthetic corpus"))?;
                let n = corpus.sequences().len();
                let report = IngestReport {
                    catalog_items: corpus.items().len(),
                    interaction_records: corpus.sequences().iter().map(|s| s.events.len()).sum(),
                    users_seen: n,
                    users_kept: n,
                    ..Default::default()
                };
                (corpus, report)
            }
        };
        Ok(vec![self.write("corpus.json", &corpus)?, self.write("ingest_report.json", &report)?])
    }

    fn stage_split(&self) -> StageResult<Vec<PathBuf>> {
        let corpus: Corpus = self.read("corpus.json")?;
        let splits = make_split(&corpus);
        let seed = self.config.seed_for("candidates");
        let mut cands = CandidateFile {
            validation: BTreeMap::new(),
            test: BTreeMap::new(),
        };
        for split in &splits {
            for phase in [Phase::Validation, Phase::Test] {
                let c = sample_candidates(&corpus, split, phase, self.config.data.pool_size, seed).map_err(err("candidates"))?;
                let map = match phase {
                    Phase::Validation => &mut cands.validation,
                    Phase::Test => &mut cands.test,
                };
                map.insert(split.user_id.clone(), c);
            }
        }
        Ok(vec![self.write("splits.json", &splits)?, self.write("candidates.json", &cands)?])
    }

    fn stage_train_cf(&self) -> StageResult<Vec<PathBuf>> {
        let corpus: Corpus = self.read("corpus.json")?;
        let splits: Vec<Split> = self.read("splits.json")?;
        let mut cfg = self.config.cf.clone();
        cfg.seed = self.config.seed_for("cf");
        let model = train_cf(&corpus, &splits, &cfg).map_err(err("train-cf"))?;
        Ok(vec![self.write("cf_model.json", &model)?])
    }

    fn stage_cluster(&self) -> StageResult<Vec<PathBuf>> {
        let model: CfModel = self.read("cf_model.json")?;
        let k = self.config.cluster.k.min(model.user_ids().len()).max(1);
        let clustering = cluster_users(&model, k, self.config.seed_for("cluster")).map_err(err("cluster"))?;
        Ok(vec![self.write("clustering.json", &clustering)?])
    }

    fn stage_predict_offline(&self) -> StageResult<Vec<PathBuf>> {
        let corpus: Corpus = self.read("corpus.json")?;
        let splits: Vec<Split> = self.read("splits.json")?;
        let cands: CandidateFile = self.read("candidates.json")?;
        let gateway = self.gateway(&corpus, &splits)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.llm.max_concurrency.max(1))
            .build()
            .map_err(err("thread pool"))?;
        let max_history = self.config.data.max_history;
        let outcomes: Vec<Result<RankedList, String>> = pool.install(|| {
            splits
                .par_iter()
                .map(|split| {
                    let c = cands.validation.get(&split.user_id).ok_or("missing validation candidates")?;
                    recommend(&gateway, &corpus, split, c, None, max_history).map_err(|e| e.to_string())
                })
                .collect()
        });
        let mut file = BaselineFile {
            lists: BTreeMap::new(),
            failures: BTreeMap::new(),
        };
        for (split, outcome) in splits.iter().zip(outcomes) {
            match outcome {
                Ok(list) => file.lists.insert(split.user_id.clone(), list).map(|_| ()),
                Err(e) => file.failures.insert(split.user_id.clone(), e).map(|_| ()),
            };
        }
        Ok(vec![self.write("baseline.json", &file)?])
    }

    /// Loads what the offline loop needs and runs `f` with a context over it.
    fn with_offline<T>(&self, f: impl FnOnce(&OfflineContext<'_>) -> StageResult<T>) -> StageResult<T> {
        let corpus: Corpus = self.read("corpus.json")?;
        let splits: Vec<Split> = self.read("splits.json")?;
        let cands: CandidateFile = self.read("candidates.json")?;
        let baseline: BaselineFile = self.read("baseline.json")?;
        let cf: CfModel = self.read("cf_model.json")?;
        let clustering: UserClustering = self.read("clustering.json")?;
        let gateway = self.gateway(&corpus, &splits)?;
        let ctx = OfflineContext {
            gateway: &gateway,
            corpus: &corpus,
            splits: &splits,
            validation: &cands.validation,
            baseline: &baseline.lists,
            cf: Some(&cf),
            clustering: Some(&clustering),
            max_history: self.config.data.max_history,
            max_concurrency: self.config.llm.max_concurrency,
        };
        f(&ctx)
    }

    /// Each stage that touches the memory writes its own snapshot so earlier
    /// stage records stay valid: `memory_generated` after reflect,
    /// `memory_r0` after score, `memory` after iterate.
    fn save_store(&self, store: &MemoryStore, rel: &str) -> StageResult<PathBuf> {
        store.save(&self.path(rel)).map_err(err(rel))?;
        Ok(PathBuf::from(rel))
    }

    fn load_store(&self, rel: &str) -> StageResult<MemoryStore> {
        MemoryStore::load(&self.path(rel)).map_err(err(rel))
    }

    fn stage_reflect(&self) -> StageResult<Vec<PathBuf>> {
        let config = self.iterate_config();
        let mut store = MemoryStore::new(self.config.memory.capacity);
        let generated = self.with_offline(|ctx| generate_round(ctx, &mut store, &config, 0).map_err(err("reflect")))?;
        Ok(vec![self.write("generated_r0.json", &generated)?, self.save_store(&store, "memory_generated")?])
    }

    fn stage_score(&self) -> StageResult<Vec<PathBuf>> {
        let config = self.iterate_config();
        let mut store = self.load_store("memory_generated")?;
        let generated: GeneratedRound = self.read("generated_r0.json")?;
        let stats = self.with_offline(|ctx| score_round(ctx, &mut store, &config, generated).map_err(err("score")))?;
        Ok(vec![self.save_store(&store, "memory_r0")?, self.write("rounds_r0.json", &vec![stats])?])
    }

    fn stage_iterate(&self) -> StageResult<Vec<PathBuf>> {
        let config = self.iterate_config();
        let mut store = self.load_store("memory_r0")?;
        let mut rounds: Vec<RoundStats> = self.read("rounds_r0.json")?;
        self.with_offline(|ctx| {
            for round in 1..=config.rounds {
                rounds.push(iterate_round(ctx, &mut store, &config, round).map_err(err("iterate"))?);
            }
            Ok(())
        })?;
        let mut csv = String::from("round,attempted,scored,failed,mean_imp,effective\n");
        for r in &rounds {
            let mean = r.mean_imp.map(|m| m.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{},{},{}\n", r.round, r.attempted, r.scored, r.failed, mean, r.effective));
        }
        Ok(vec![
            self.save_store(&store, "memory")?,
            self.write("rounds.json", &rounds)?,
            self.write_text("trajectory.csv", &csv)?,
        ])
    }

    fn stage_refine(&self) -> StageResult<Vec<PathBuf>> {
        let store = self.load_store("memory")?;
        let clustering: UserClustering = self.read("clustering.json")?;
        let m = &self.config.memory;
        let plans: Vec<RefinePlan> = Perspective::ALL
            .iter()
            .map(|&p| refine(&store.score_table(p), m.level, p, Some(&clustering), m.threshold, m.tau).map_err(err("refine")))
            .collect::<Result<_, _>>()?;
        Ok(vec![self.write("refine.json", &plans)?])
    }

    fn stage_train_bandit(&self) -> StageResult<Vec<PathBuf>> {
        let store = self.load_store("memory")?;
        let splits: Vec<Split> = self.read("splits.json")?;
        let cf: CfModel = self.read("cf_model.json")?;
        let users: Vec<BanditUser> = splits
            .iter()
            .map(|s| {
                let history: Vec<&str> = s.train_prefix.iter().map(String::as_str).collect();
                cf.embed_state(&s.user_id, &history).map(|state| BanditUser {
                    user_id: s.user_id.clone(),
                    state,
                })
            })
            .collect::<Result<_, _>>()
            .map_err(err("bandit state"))?;
        let mut cfg = self.config.bandit.clone();
        cfg.seed = self.config.seed_for("bandit");
        let policy = train(&store, &users, &cfg).map_err(err("train-bandit"))?;
        Ok(vec![self.write("policy.json", &policy)?, self.write_text("train_log.csv", &policy.log_csv())?])
    }

    fn stage_eval(&self) -> StageResult<Vec<PathBuf>> {
        let corpus: Corpus = self.read("corpus.json")?;
        let splits: Vec<Split> = self.read("splits.json")?;
        let cands: CandidateFile = self.read("candidates.json")?;
        let cf: CfModel = self.read("cf_model.json")?;
        let store = self.load_store("memory")?;
        let policy_bytes = fs::read(self.path("policy.json")).map_err(err("policy.json"))?;
        let policy: TrainedPolicy = serde_json::from_slice(&policy_bytes).map_err(err("policy.json"))?;
        let gateway = self.gateway(&corpus, &splits)?;
        let ctx = EvalContext {
            gateway: &gateway,
            corpus: &corpus,
            splits: &splits,
            test: &cands.test,
            store: &store,
            cf: &cf,
            policy: Some(&policy.params),
            max_history: self.config.data.max_history,
            max_concurrency: self.config.llm.max_concurrency,
            seed: self.config.seed_for("eval"),
            seeds: seed_matrix(&self.config),
            provenance: Provenance {
                config_hash: self.config.hash(),
                corpus_fingerprint: corpus.fingerprint(),
                bank_snapshot_id: store.snapshot_id(),
                policy_id: Some(sha256_hex(&policy_bytes)),
                template_hashes: template_hashes(),
            },
        };
        let mut out = Vec::new();
        for mode in &self.config.eval.modes {
            let report = run_online_eval(&ctx, mode).map_err(err(&format!("eval {mode}")))?;
            out.push(self.write(&eval_file(mode), &report)?);
        }
        Ok(out)
    }

    fn stage_report(&self) -> StageResult<Vec<PathBuf>> {
        let reports: Vec<EvalReport> = self
            .config
            .eval
            .modes
            .iter()
            .map(|m| self.read(&eval_file(m)))
            .collect::<Result<_, _>>()?;
        let kinds = MetricKind::standard();
        let mut csv = String::from("mode,users,excluded,fallbacks");
        for k in &kinds {
            csv.push_str(&format!(",{k}"));
        }
        csv.push('\n');
        for r in &reports {
            csv.push_str(&format!("{},{},{},{}", r.mode, r.evaluated_users, r.excluded_users.len(), r.fallbacks));
            for k in &kinds {
                let v = r.metric(*k).map(|v| format!("{v:.6}")).unwrap_or_default();
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        let report = RunReport {
            config_hash: self.config.hash(),
            seeds: seed_matrix(&self.config),
            reports,
        };
        Ok(vec![self.write("report.json", &report)?, self.write_text("report.csv", &csv)?])
    }

    pub fn report(&self) -> StageResult<RunReport> {
        self.read("report.json")
    }
}

/// Runs the whole pipeline in `dir`, resuming where a previous invocation
/// stopped.
pub fn run_pipeline(config: RunConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    let mut run = Run::open(dir, config)?;
    run.run_until(Stage::Report)?;
    Ok(run.dir().to_path_buf())
}
