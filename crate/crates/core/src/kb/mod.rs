//! External knowledge base: verified facts, their embeddings, a two-level
//! in-memory cache and an append-only persistent store.
//!
//! Store directory layout:
//!
//! ```text
//! <store>/facts.jsonl    append-only log, one FactRecord JSON object per line
//! <store>/aliases.jsonl  optional alias table ({entity_id, aliases})
//! ```
//!
//! On open the log is replayed in order; for each (entity, attribute) the
//! last line wins. Updates append a new line with a fresh timestamp, so the
//! record a read returns is also the one with the largest timestamp.

mod cache;
mod embedding;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use cache::{CacheStats, Lru, Tier, TieredCache};
pub use embedding::hashed_embedding;

use crate::error::{Error, Result};
use cache::{CacheHit, FactPairs, HotEntry};

pub const FACTS_FILE: &str = "facts.jsonl";
pub const ALIASES_FILE: &str = "aliases.jsonl";

/// One verified (entity, attribute, value) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub entity_id: String,
    pub attribute: String,
    pub value: String,
    #[serde(default)]
    pub unit: Option<String>,
    pub confidence: f64,
    pub source: String,
    pub timestamp: DateTime<Utc>,
}

impl FactRecord {
    pub fn validate(&self) -> Result<()> {
        if !is_valid_entity_id(&self.entity_id) {
            return Err(Error::InvalidRecord(format!(
                "entity_id {:?} is not namespace:identifier",
                self.entity_id
            )));
        }
        if self.attribute.trim().is_empty() {
            return Err(Error::InvalidRecord("empty attribute".into()));
        }
        if self.value.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("{}/{} has an empty value", self.entity_id, self.attribute)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidRecord(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        Ok(())
    }
}

/// `namespace:identifier`, lowercase ascii with `_`, `-` or `.` in the identifier.
pub fn is_valid_entity_id(id: &str) -> bool {
    let Some((ns, ident)) = id.split_once(':') else {
        return false;
    };
    let ok = |s: &str, extra: &[char]| {
        !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || extra.contains(&c))
    };
    ok(ns, &[]) && ok(ident, &['-', '.'])
}

/// Dense vector for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FactEmbedding {
    pub entity_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CacheConfig {
    pub hot_capacity: usize,
    pub warm_capacity: usize,
    pub store_path: PathBuf,
}

impl CacheConfig {
    pub fn new(store_path: impl Into<PathBuf>) -> Self {
        Self {
            hot_capacity: 50,
            warm_capacity: 200,
            store_path: store_path.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub cache: CacheConfig,
    /// Embedding dimension; must equal the model's hidden size.
    pub embedding_dim: usize,
    pub seed: u64,
    /// fsync the log on every write.
    pub durable: bool,
}

impl StoreOptions {
    pub fn new(store_path: impl Into<PathBuf>) -> Self {
        Self {
            cache: CacheConfig::new(store_path),
            embedding_dim: 64,
            seed: 42,
            durable: true,
        }
    }
}

#[derive(Debug, Clone)]
struct StoredFact {
    record: FactRecord,
    offset: u64,
    len: u32,
}

#[derive(Debug, Clone, Default)]
struct EntityEntry {
    version: u64,
    facts: BTreeMap<String, StoredFact>,
}

#[derive(Debug)]
struct LogWriter {
    file: File,
    len: u64,
}

/// Result of [`KbStore::update_fact`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub latency: Duration,
    /// The key did not exist and was inserted.
    pub inserted: bool,
}

pub struct KbStore {
    options: StoreOptions,
    writer: Mutex<LogWriter>,
    reader: File,
    index: RwLock<HashMap<String, EntityEntry>>,
    cache: TieredCache,
    versions: AtomicU64,
}

impl std::fmt::Debug for KbStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KbStore")
            .field("path", &self.options.cache.store_path)
            .field("entities", &self.index.read().len())
            .finish()
    }
}

impl KbStore {
    /// Opens (creating if needed) the store directory and replays its log.
    pub fn open(options: StoreOptions) -> Result<Self> {
        let cfg = &options.cache;
        if cfg.hot_capacity > cfg.warm_capacity {
            return Err(Error::Precondition(format!(
                "hot capacity {} exceeds warm capacity {}",
                cfg.hot_capacity, cfg.warm_capacity
            )));
        }
        fs::create_dir_all(&cfg.store_path)?;
        let log_path = cfg.store_path.join(FACTS_FILE);
        let file = OpenOptions::new().create(true).read(true).append(true).open(&log_path)?;
        let reader = File::open(&log_path)?;

        let versions = AtomicU64::new(1);
        let mut index: HashMap<String, EntityEntry> = HashMap::new();
        let mut offset = 0u64;
        let mut buf = BufReader::new(File::open(&log_path)?);
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = buf.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                log::warn!("{}: dropping torn trailing write at line {line_no}", log_path.display());
                file.set_len(offset)?;
                break;
            }
            let text = line.trim_end();
            if !text.is_empty() {
                let record = parse_record(text, &log_path, line_no)?;
                let entry = index.entry(record.entity_id.clone()).or_default();
                entry.version = versions.fetch_add(1, Ordering::Relaxed);
                entry.facts.insert(
                    record.attribute.clone(),
                    StoredFact {
                        record,
                        offset,
                        len: text.len() as u32,
                    },
                );
            }
            offset += n as u64;
        }

        let cache = TieredCache::new(cfg.hot_capacity, cfg.warm_capacity);
        Ok(Self {
            writer: Mutex::new(LogWriter { file, len: offset }),
            reader,
            index: RwLock::new(index),
            cache,
            versions,
            options,
        })
    }

    pub fn options(&self) -> &StoreOptions {
        &self.options
    }

    pub fn path(&self) -> &Path {
        &self.options.cache.store_path
    }

    pub fn alias_path(&self) -> PathBuf {
        self.path().join(ALIASES_FILE)
    }

    pub fn embedding_dim(&self) -> usize {
        self.options.embedding_dim
    }

    /// Loads a KB file (one FactRecord JSON object per line). The whole file
    /// is parsed before anything is written; a malformed line aborts the import.
    pub fn import_kb(&self, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(line, path, i + 1)?);
        }
        self.import_records(records)
    }

    pub fn import_records(&self, records: Vec<FactRecord>) -> Result<usize> {
        let mut seen = HashMap::new();
        for r in &records {
            r.validate()?;
            if seen.insert((r.entity_id.as_str(), r.attribute.as_str()), ()).is_some() {
                log::warn!("duplicate key {}/{}: later record wins", r.entity_id, r.attribute);
            }
        }
        let mut lines = Vec::with_capacity(records.len());
        for r in &records {
            lines.push(serde_json::to_string(r).map_err(|e| Error::InvalidRecord(e.to_string()))?);
        }

        let mut w = self.writer.lock();
        let start = w.len;
        let mut blob = String::new();
        for l in &lines {
            blob.push_str(l);
            blob.push('\n');
        }
        self.append(&mut w, blob.as_bytes())?;

        let mut index = self.index.write();
        let mut offset = start;
        for (record, line) in records.into_iter().zip(&lines) {
            self.cache.invalidate(&record.entity_id);
            let entry = index.entry(record.entity_id.clone()).or_default();
            entry.version = self.versions.fetch_add(1, Ordering::Relaxed);
            entry.facts.insert(
                record.attribute.clone(),
                StoredFact {
                    record,
                    offset,
                    len: line.len() as u32,
                },
            );
            offset += line.len() as u64 + 1;
        }
        Ok(lines.len())
    }

    fn append(&self, w: &mut LogWriter, bytes: &[u8]) -> Result<()> {
        let res = w.file.write_all(bytes).and_then(|_| {
            if self.options.durable {
                w.file.sync_data()
            } else {
                w.file.flush()
            }
        });
        if let Err(e) = res {
            // roll back a partial append so replay never sees a torn line
            let _ = w.file.set_len(w.len);
            return Err(Error::Storage(e));
        }
        w.len += bytes.len() as u64;
        Ok(())
    }

    pub fn get_fact(&self, entity_id: &str, attribute: &str) -> Result<FactRecord> {
        let index = self.index.read();
        let entry = index
            .get(entity_id)
            .ok_or_else(|| Error::EntityNotFound(entity_id.to_string()))?;
        entry
            .facts
            .get(attribute)
            .map(|f| f.record.clone())
            .ok_or_else(|| Error::AttributeNotFound {
                entity: entity_id.to_string(),
                attribute: attribute.to_string(),
            })
    }

    /// All current facts of one entity, ordered by attribute.
    pub fn facts(&self, entity_id: &str) -> Result<Vec<FactRecord>> {
        let index = self.index.read();
        let entry = index
            .get(entity_id)
            .ok_or_else(|| Error::EntityNotFound(entity_id.to_string()))?;
        Ok(entry.facts.values().map(|f| f.record.clone()).collect())
    }

    /// Every current record, ordered by (entity, attribute).
    pub fn all_facts(&self) -> Vec<FactRecord> {
        let index = self.index.read();
        let mut ids: Vec<&String> = index.keys().collect();
        ids.sort();
        ids.into_iter()
            .flat_map(|id| index[id].facts.values().map(|f| f.record.clone()))
            .collect()
    }

    pub fn entity_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.index.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn contains_entity(&self, entity_id: &str) -> bool {
        self.index.read().contains_key(entity_id)
    }

    pub fn len(&self) -> usize {
        self.index.read().values().map(|e| e.facts.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.index.read().is_empty()
    }

    /// Replaces a fact's value. The new record is durably appended before
    /// the in-memory swap; on a write failure nothing changes. A missing key
    /// is inserted and flagged in the outcome.
    pub fn update_fact(&self, entity_id: &str, attribute: &str, new_value: &str) -> Result<UpdateOutcome> {
        let started = Instant::now();
        let mut w = self.writer.lock();
        let current = self.get_fact(entity_id, attribute).ok();
        let now = Utc::now();
        let inserted = current.is_none();
        let record = match current {
            Some(old) => FactRecord {
                value: new_value.to_string(),
                timestamp: now.max(old.timestamp + chrono::Duration::microseconds(1)),
                ..old
            },
            None => FactRecord {
                entity_id: entity_id.to_string(),
                attribute: attribute.to_string(),
                value: new_value.to_string(),
                unit: None,
                confidence: 1.0,
                source: "manual update".to_string(),
                timestamp: now,
            },
        };
        record.validate()?;
        let line = serde_json::to_string(&record).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        let offset = w.len;
        let mut bytes = line.clone().into_bytes();
        bytes.push(b'\n');
        self.append(&mut w, &bytes)?;
        {
            let mut index = self.index.write();
            let entry = index.entry(entity_id.to_string()).or_default();
            entry.version = self.versions.fetch_add(1, Ordering::Relaxed);
            entry.facts.insert(
                attribute.to_string(),
                StoredFact {
                    record,
                    offset,
                    len: line.len() as u32,
                },
            );
        }
        self.cache.invalidate(entity_id);
        drop(w);
        Ok(UpdateOutcome {
            latency: started.elapsed(),
            inserted,
        })
    }

    /// Embedding computed directly from the current in-memory fact set.
    pub fn fact_embedding(&self, entity_id: &str) -> Result<FactEmbedding> {
        let index = self.index.read();
        let entry = index
            .get(entity_id)
            .ok_or_else(|| Error::EntityNotFound(entity_id.to_string()))?;
        let vector = hashed_embedding(
            entity_id,
            entry.facts.values().map(|f| (f.record.attribute.as_str(), f.record.value.as_str())),
            self.options.embedding_dim,
            self.options.seed,
        );
        Ok(FactEmbedding {
            entity_id: entity_id.to_string(),
            vector,
        })
    }

    /// Embedding through the hot → warm → store hierarchy. Whatever tier
    /// serves the request, the entry ends up most-recent in the hot tier.
    pub fn lookup_with_cache(&self, entity_id: &str) -> Result<(FactEmbedding, Tier)> {
        let (version, locations) = {
            let index = self.index.read();
            let entry = index
                .get(entity_id)
                .ok_or_else(|| Error::EntityNotFound(entity_id.to_string()))?;
            let locs: Vec<(u64, u32)> = entry.facts.values().map(|f| (f.offset, f.len)).collect();
            (entry.version, locs)
        };
        let dim = self.options.embedding_dim;
        let seed = self.options.seed;
        let embed = |facts: &FactPairs| {
            Arc::new(hashed_embedding(
                entity_id,
                facts.iter().map(|(a, v)| (a.as_str(), v.as_str())),
                dim,
                seed,
            ))
        };

        let (vector, facts, tier) = match self.cache.get(entity_id, version) {
            Some(CacheHit::Hot(v)) => {
                return Ok((
                    FactEmbedding {
                        entity_id: entity_id.to_string(),
                        vector: v.as_ref().clone(),
                    },
                    Tier::Hot,
                ))
            }
            Some(CacheHit::Warm(facts)) => (embed(&facts), facts, Tier::Warm),
            None => {
                let facts = Arc::new(self.read_from_log(&locations)?);
                (embed(&facts), facts, Tier::Store)
            }
        };
        self.cache.promote(
            entity_id,
            HotEntry {
                version,
                vector: vector.clone(),
                facts,
            },
        );
        Ok((
            FactEmbedding {
                entity_id: entity_id.to_string(),
                vector: vector.as_ref().clone(),
            },
            tier,
        ))
    }

    fn read_from_log(&self, locations: &[(u64, u32)]) -> Result<Vec<(String, String)>> {
        let path = self.path().join(FACTS_FILE);
        let mut out = Vec::with_capacity(locations.len());
        let mut buf = Vec::new();
        for &(offset, len) in locations {
            buf.resize(len as usize, 0);
            self.reader.read_exact_at(&mut buf, offset)?;
            let text = std::str::from_utf8(&buf).map_err(|e| Error::Parse {
                path: path.clone(),
                line: 0,
                message: e.to_string(),
            })?;
            let r = parse_record(text, &path, 0)?;
            out.push((r.attribute, r.value));
        }
        Ok(out)
    }

    pub fn cache(&self) -> &TieredCache {
        &self.cache
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }
}

fn parse_record(line: &str, path: &Path, line_no: usize) -> Result<FactRecord> {
    let record: FactRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })?;
    record.validate().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })?;
    Ok(record)
}

/// Parses a KB file without touching any store.
pub fn read_kb_file(path: &Path) -> Result<Vec<FactRecord>> {
    let text = fs::read_to_string(path)?;
    parse_kb_text(&text, path)
}

pub fn parse_kb_text(text: &str, origin: &Path) -> Result<Vec<FactRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, origin, i + 1))
        .collect()
}
