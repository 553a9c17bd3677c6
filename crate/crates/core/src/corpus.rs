//! Interaction data: catalog ingest, chronological sequences, leave-one-out
//! splits and per-user candidate sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{rng_for, sha256_hex};

/// Shortest sequence that still yields a train prefix plus two targets.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: malformed record: {message}")]
    Malformed {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}:{line}: interaction references unknown item {item_id:?}")]
    DanglingItem {
        source_name: String,
        line: usize,
        item_id: String,
    },
    #[error("{source_name}:{line}: duplicate item_id {item_id:?}")]
    DuplicateItem {
        source_name: String,
        line: usize,
        item_id: String,
    },
    #[error("{source_name}:{line}: item {item_id:?} has an empty title")]
    EmptyTitle {
        source_name: String,
        line: usize,
        item_id: String,
    },
    #[error("user {user_id:?}: only {available} items outside the history, {needed} negatives required")]
    InsufficientItems {
        user_id: String,
        available: usize,
        needed: usize,
    },
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("pool size must be at least 1")]
    EmptyPool,
}

/// A catalog entry. `title` and `description` carry the explicit text,
/// `attributes` the implicit side (brand, category, features, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub attributes: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: String,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub events: Vec<Event>,
}

impl InteractionSequence {
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.item_id.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub catalog_items: usize,
    pub interaction_records: usize,
    pub users_seen: usize,
    pub users_kept: usize,
    pub users_dropped_short: usize,
    pub dropped_user_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CorpusRepr {
    items: Vec<Item>,
    sequences: Vec<InteractionSequence>,
}

/// Catalog plus per-user sequences. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: Vec<Item>,
    sequences: Vec<InteractionSequence>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
    attribute_keys: Vec<String>,
}

impl Serialize for Corpus {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Ref<'a> {
            items: &'a [Item],
            sequences: &'a [InteractionSequence],
        }
        Ref {
            items: &self.items,
            sequences: &self.sequences,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Corpus {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = CorpusRepr::deserialize(deserializer)?;
        Corpus::new(repr.items, repr.sequences).map_err(serde::de::Error::custom)
    }
}

impl Corpus {
    /// Builds a corpus from already-parsed parts, validating the catalog and
    /// every item reference. Sequences shorter than [`MIN_SEQUENCE_LEN`] are
    /// rejected here; `ingest` filters them before calling this.
    pub fn new(items: Vec<Item>, mut sequences: Vec<InteractionSequence>) -> Result<Self, CorpusError> {
        let mut item_index = HashMap::with_capacity(items.len());
        let mut attribute_keys: Vec<String> = Vec::new();
        let mut seen_keys = HashSet::new();
        for (i, item) in items.iter().enumerate() {
            if item.title.trim().is_empty() {
                return Err(CorpusError::EmptyTitle {
                    source_name: "catalog".into(),
                    line: i + 1,
                    item_id: item.item_id.clone(),
                });
            }
            if item_index.insert(item.item_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateItem {
                    source_name: "catalog".into(),
                    line: i + 1,
                    item_id: item.item_id.clone(),
                });
            }
            for key in item.attributes.keys() {
                if seen_keys.insert(key.clone()) {
                    attribute_keys.push(key.clone());
                }
            }
        }
        sequences.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let mut user_index = HashMap::with_capacity(sequences.len());
        for (i, seq) in sequences.iter().enumerate() {
            if seq.events.len() < MIN_SEQUENCE_LEN {
                return Err(CorpusError::Malformed {
                    source_name: "sequences".into(),
                    line: i + 1,
                    message: format!(
                        "user {:?} has {} events, at least {MIN_SEQUENCE_LEN} required",
                        seq.user_id,
                        seq.events.len()
                    ),
                });
            }
            if seq.events.windows(2).any(|w| w[0].ts > w[1].ts) {
                return Err(CorpusError::Malformed {
                    source_name: "sequences".into(),
                    line: i + 1,
                    message: format!("user {:?} has decreasing timestamps", seq.user_id),
                });
            }
            for ev in &seq.events {
                if !item_index.contains_key(&ev.item_id) {
                    return Err(CorpusError::DanglingItem {
                        source_name: "sequences".into(),
                        line: i + 1,
                        item_id: ev.item_id.clone(),
                    });
                }
            }
            if user_index.insert(seq.user_id.clone(), i).is_some() {
                return Err(CorpusError::Malformed {
                    source_name: "sequences".into(),
                    line: i + 1,
                    message: format!("duplicate user {:?}", seq.user_id),
                });
            }
        }
        Ok(Self {
            items,
            sequences,
            item_index,
            user_index,
            attribute_keys,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn sequences(&self) -> &[InteractionSequence] {
        &self.sequences
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.item_index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn item_position(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn sequence(&self, user_id: &str) -> Option<&InteractionSequence> {
        self.user_index.get(user_id).map(|&i| &self.sequences[i])
    }

    pub fn user_position(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    /// Attribute names in first-seen catalog order.
    pub fn attribute_keys(&self) -> &[String] {
        &self.attribute_keys
    }

    /// SHA-256 over the canonical JSON form; identical inputs give identical
    /// fingerprints.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("corpus serializes"))
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `catalog.jsonl` and `interactions.jsonl` from disk.
pub fn ingest(catalog_file: &Path, interactions_file: &Path) -> Result<(Corpus, IngestReport), CorpusError> {
    ingest_readers(
        open(catalog_file)?,
        &catalog_file.display().to_string(),
        open(interactions_file)?,
        &interactions_file.display().to_string(),
    )
}

#[derive(Deserialize)]
struct InteractionRecord {
    user_id: String,
    item_id: String,
    ts: i64,
}

/// Reader-based ingest; `*_name` labels appear in error messages.
pub fn ingest_readers(
    catalog: impl BufRead,
    catalog_name: &str,
    interactions: impl BufRead,
    interactions_name: &str,
) -> Result<(Corpus, IngestReport), CorpusError> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in catalog.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            source_name: catalog_name.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            source_name: catalog_name.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        if item.title.trim().is_empty() {
            return Err(CorpusError::EmptyTitle {
                source_name: catalog_name.into(),
                line: line_no,
                item_id: item.item_id,
            });
        }
        if !ids.insert(item.item_id.clone()) {
            return Err(CorpusError::DuplicateItem {
                source_name: catalog_name.into(),
                line: line_no,
                item_id: item.item_id,
            });
        }
        items.push(item);
    }

    // BTreeMap keeps users in id order; Vec keeps file order for ts ties.
    let mut by_user: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    let mut records = 0;
    for (n, line) in interactions.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            source_name: interactions_name.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            source_name: interactions_name.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.contains(&rec.item_id) {
            return Err(CorpusError::DanglingItem {
                source_name: interactions_name.into(),
                line: line_no,
                item_id: rec.item_id,
            });
        }
        records += 1;
        by_user.entry(rec.user_id).or_default().push(Event {
            item_id: rec.item_id,
            ts: rec.ts,
        });
    }

    let mut report = IngestReport {
        catalog_items: items.len(),
        interaction_records: records,
        users_seen: by_user.len(),
        ..Default::default()
    };
    let mut sequences = Vec::with_capacity(by_user.len());
    for (user_id, mut events) in by_user {
        if events.len() < MIN_SEQUENCE_LEN {
            report.users_dropped_short += 1;
            report.dropped_user_ids.push(user_id);
            continue;
        }
        // stable: equal timestamps keep file order
        events.sort_by_key(|e| e.ts);
        sequences.push(InteractionSequence { user_id, events });
    }
    report.users_kept = sequences.len();
    Ok((Corpus::new(items, sequences)?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Validation,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Validation => "validation",
            Phase::Test => "test",
        })
    }
}

/// Leave-one-out split of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub user_id: String,
    pub train_prefix: Vec<String>,
    pub validation_target: String,
    pub test_target: String,
}

impl Split {
    pub fn target(&self, phase: Phase) -> &str {
        match phase {
            Phase::Validation => &self.validation_target,
            Phase::Test => &self.test_target,
        }
    }

    /// Items visible before predicting `phase`'s target.
    pub fn history(&self, phase: Phase) -> Vec<&str> {
        let mut h: Vec<&str> = self.train_prefix.iter().map(String::as_str).collect();
        if phase == Phase::Test {
            h.push(&self.validation_target);
        }
        h
    }

    /// The full sequence, in order.
    pub fn full_sequence(&self) -> Vec<&str> {
        let mut h = self.history(Phase::Test);
        h.push(&self.test_target);
        h
    }
}

/// Last event is the test target, the one before it the validation target.
pub fn make_split(corpus: &Corpus) -> Vec<Split> {
    corpus
        .sequences()
        .iter()
        .map(|seq| {
            let n = seq.events.len();
            debug_assert!(n >= MIN_SEQUENCE_LEN);
            Split {
                user_id: seq.user_id.clone(),
                train_prefix: seq.events[..n - 2].iter().map(|e| e.item_id.clone()).collect(),
                validation_target: seq.events[n - 2].item_id.clone(),
                test_target: seq.events[n - 1].item_id.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user_id: String,
    pub phase: Phase,
    pub target_item_id: String,
    pub negative_item_ids: Vec<String>,
    pub presentation_order: Vec<String>,
    pub seed: u64,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.presentation_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presentation_order.is_empty()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.presentation_order.iter().any(|i| i == item_id)
    }
}

/// Uniform negatives without replacement from catalog ∖ full history, then a
/// seeded shuffle of target + negatives.
pub fn sample_candidates(
    corpus: &Corpus,
    split: &Split,
    phase: Phase,
    pool_size: usize,
    seed: u64,
) -> Result<CandidateSet, CorpusError> {
    if pool_size == 0 {
        return Err(CorpusError::EmptyPool);
    }
    let seq = corpus
        .sequence(&split.user_id)
        .ok_or_else(|| CorpusError::UnknownUser(split.user_id.clone()))?;
    let history: HashSet<&str> = seq.item_ids().collect();
    let eligible: Vec<&Item> = corpus
        .items()
        .iter()
        .filter(|item| !history.contains(item.item_id.as_str()))
        .collect();
    let needed = pool_size - 1;
    if eligible.len() < needed {
        return Err(CorpusError::InsufficientItems {
            user_id: split.user_id.clone(),
            available: eligible.len(),
            needed,
        });
    }
    let phase_tag = phase.to_string();
    let mut rng = rng_for(seed, &["candidates", &split.user_id, &phase_tag]);
    let negatives: Vec<String> = index::sample(&mut rng, eligible.len(), needed)
        .into_iter()
        .map(|i| eligible[i].item_id.clone())
        .collect();
    let target = split.target(phase).to_string();
    let mut order = Vec::with_capacity(pool_size);
    order.push(target.clone());
    order.extend(negatives.iter().cloned());
    order.shuffle(&mut rng);
    Ok(CandidateSet {
        user_id: split.user_id.clone(),
        phase,
        target_item_id: target,
        negative_item_ids: negatives,
        presentation_order: order,
        seed,
    })
}
