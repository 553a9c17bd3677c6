//! Seeded generator for small catalogs with group structure, used for smoke
//! runs and tests. Users of group g mostly interact with items of category g.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Event, InteractionSequence, Item};
use crate::hashing::rng_for;

const GROUPS: [(&str, &str, [&str; 4], [&str; 4]); 3] = [
    ("books", "Novel", ["Quill", "Harbor", "Lantern", "Oakleaf"], ["mystery", "fantasy", "memoir", "thriller"]),
    ("games", "Game", ["Pixelworks", "Ironclad", "Nimbus", "Redshift"], ["puzzle", "strategy", "racing", "platformer"]),
    ("music", "Album", ["Bluenote", "Cascade", "Velvet", "Static"], ["jazz", "ambient", "rock", "folk"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    /// 1 to 3.
    pub groups: usize,
    pub items_per_group: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub in_group_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 30,
            groups: 3,
            items_per_group: 40,
            min_len: 6,
            max_len: 12,
            in_group_prob: 0.9,
            seed: 0,
        }
    }
}

pub fn group_of_user(index: usize, groups: usize) -> usize {
    index % groups
}

pub fn generate(config: &SyntheticConfig) -> Result<Corpus, CorpusError> {
    let groups = config.groups.clamp(1, GROUPS.len());
    let mut rng = rng_for(config.seed, &["synthetic"]);
    let mut items = Vec::new();
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (g, (category, noun, brands, styles)) in GROUPS.iter().take(groups).enumerate() {
        for i in 0..config.items_per_group {
            let style = styles[i % styles.len()];
            let brand = brands[(i / styles.len()) % brands.len()];
            let mut attributes = IndexMap::new();
            attributes.insert("category".to_string(), category.to_string());
            attributes.insert("brand".to_string(), brand.to_string());
            attributes.insert("style".to_string(), style.to_string());
            let mut title_style = style.to_string();
            title_style[..1].make_ascii_uppercase();
            by_group[g].push(items.len());
            items.push(Item {
                item_id: format!("{}{:03}", &category[..1], i),
                title: format!("{title_style} {noun} {}", i + 1),
                description: format!("A {style} {} from {brand}.", noun.to_lowercase()),
                attributes,
            });
        }
    }

    let mut sequences = Vec::with_capacity(config.users);
    let width = config.users.max(1).to_string().len();
    for u in 0..config.users {
        let g = group_of_user(u, groups);
        let span = config.max_len.max(config.min_len) - config.min_len;
        let len = config.min_len + rng.random_range(0..=span);
        let mut own: Vec<usize> = index::sample(&mut rng, by_group[g].len(), by_group[g].len())
            .into_iter()
            .map(|i| by_group[g][i])
            .collect();
        let others: Vec<usize> = (0..items.len()).filter(|i| !by_group[g].contains(i)).collect();
        let mut used = std::collections::HashSet::new();
        let mut events = Vec::with_capacity(len);
        while events.len() < len {
            let pick = if others.is_empty() || rng.random::<f64>() < config.in_group_prob {
                match own.pop() {
                    Some(i) => i,
                    None => break,
                }
            } else {
                *others.choose(&mut rng).expect("non-empty")
            };
            if used.insert(pick) {
                events.push(Event {
                    item_id: items[pick].item_id.clone(),
                    ts: 1_600_000_000 + (events.len() as i64) * 86_400 + u as i64,
                });
            }
        }
        sequences.push(InteractionSequence {
            user_id: format!("user{u:0width$}"),
            events,
        });
    }
    Corpus::new(items, sequences)
}

/// Writes the corpus in the ingest format (`catalog.jsonl`,
/// `interactions.jsonl`).
pub fn write_jsonl(corpus: &Corpus, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut catalog = std::io::BufWriter::new(fs::File::create(dir.join("catalog.jsonl"))?);
    for item in corpus.items() {
        serde_json::to_writer(&mut catalog, item)?;
        catalog.write_all(b"\n")?;
    }
    catalog.flush()?;
    let mut inter = std::io::BufWriter::new(fs::File::create(dir.join("interactions.jsonl"))?);
    for seq in corpus.sequences() {
        for e in &seq.events {
            serde_json::to_writer(
                &mut inter,
                &serde_json::json!({"user_id": seq.user_id, "item_id": e.item_id, "ts": e.ts}),
            )?;
            inter.write_all(b"\n")?;
        }
    }
    inter.flush()
}
