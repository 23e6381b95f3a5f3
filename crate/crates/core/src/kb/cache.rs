//! Two in-process LRU tiers in front of the persistent store.
//!
//! The hot tier holds materialized embeddings. The warm tier holds the
//! entity's parsed fact set, so a warm hit re-derives the embedding without
//! touching disk. Entries carry the store version they were built from; a
//! version mismatch is treated as a miss.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Which layer served a lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hot,
    Warm,
    Store,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Hot => "hot",
            Tier::Warm => "warm",
            Tier::Store => "store",
        })
    }
}

/// Least-recently-used map with O(log n) touch and eviction.
#[derive(Debug)]
pub struct Lru<K, V> {
    capacity: usize,
    tick: u64,
    entries: HashMap<K, (V, u64)>,
    order: BTreeMap<u64, K>,
}

impl<K: Eq + Hash + Clone, V> Lru<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            tick: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.contains_key(key)
    }

    /// Marks `key` most recently used and returns its value.
    pub fn get(&mut self, key: &K) -> Option<&V> {
        self.tick += 1;
        let tick = self.tick;
        let (_, t) = self.entries.get_mut(key)?;
        self.order.remove(t);
        *t = tick;
        self.order.insert(tick, key.clone());
        self.entries.get(key).map(|(v, _)| v)
    }

    pub fn peek(&self, key: &K) -> Option<&V> {
        self.entries.get(key).map(|(v, _)| v)
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let (v, t) = self.entries.remove(key)?;
        self.order.remove(&t);
        Some(v)
    }

    /// Inserts as most recent; returns the evicted least-recent entry, if any.
    pub fn put(&mut self, key: K, value: V) -> Option<(K, V)> {
        if self.capacity == 0 {
            return Some((key, value));
        }
        self.remove(&key);
        self.tick += 1;
        self.order.insert(self.tick, key.clone());
        self.entries.insert(key, (value, self.tick));
        if self.entries.len() > self.capacity {
            let (&oldest, _) = self.order.iter().next()?;
            let k = self.order.remove(&oldest)?;
            let (v, _) = self.entries.remove(&k)?;
            return Some((k, v));
        }
        None
    }
}

pub(crate) type FactPairs = Arc<Vec<(String, String)>>;

#[derive(Debug, Clone)]
pub(crate) struct HotEntry {
    pub version: u64,
    pub vector: Arc<Vec<f64>>,
    pub facts: FactPairs,
}

#[derive(Debug, Clone)]
pub(crate) struct WarmEntry {
    pub version: u64,
    pub facts: FactPairs,
}

pub(crate) enum CacheHit {
    Hot(Arc<Vec<f64>>),
    Warm(FactPairs),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hot_hits: u64,
    pub warm_hits: u64,
    pub store_reads: u64,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hot_hits + self.warm_hits + self.store_reads
    }

    /// Fraction of lookups served by the hot or warm tier.
    pub fn memory_hit_rate(&self) -> f64 {
        let n = self.lookups();
        if n == 0 {
            0.0
        } else {
            (self.hot_hits + self.warm_hits) as f64 / n as f64
        }
    }
}

#[derive(Debug)]
struct Tiers {
    hot: Lru<String, HotEntry>,
    warm: Lru<String, WarmEntry>,
    stats: CacheStats,
}

#[derive(Debug)]
pub struct TieredCache {
    inner: Mutex<Tiers>,
}

impl TieredCache {
    pub fn new(hot_capacity: usize, warm_capacity: usize) -> Self {
        Self {
            inner: Mutex::new(Tiers {
                hot: Lru::new(hot_capacity),
                warm: Lru::new(warm_capacity),
                stats: CacheStats::default(),
            }),
        }
    }

    pub(crate) fn get(&self, entity: &str, version: u64) -> Option<CacheHit> {
        let mut t = self.inner.lock();
        let key = entity.to_string();
        if let Some(e) = t.hot.get(&key) {
            if e.version == version {
                let v = e.vector.clone();
                t.stats.hot_hits += 1;
                return Some(CacheHit::Hot(v));
            }
            t.hot.remove(&key);
        }
        if let Some(e) = t.warm.remove(&key) {
            if e.version == version {
                t.stats.warm_hits += 1;
                return Some(CacheHit::Warm(e.facts));
            }
        }
        t.stats.store_reads += 1;
        None
    }

    /// Puts a freshly materialized entry in the hot tier, demoting the hot
    /// tier's least-recent entry to warm.
    pub(crate) fn promote(&self, entity: &str, entry: HotEntry) {
        let mut t = self.inner.lock();
        t.warm.remove(&entity.to_string());
        if let Some((k, evicted)) = t.hot.put(entity.to_string(), entry) {
            t.warm.put(
                k,
                WarmEntry {
                    version: evicted.version,
                    facts: evicted.facts,
                },
            );
        }
    }

    pub fn invalidate(&self, entity: &str) {
        let mut t = self.inner.lock();
        let key = entity.to_string();
        t.hot.remove(&key);
        t.warm.remove(&key);
    }

    pub fn clear(&self) {
        let mut t = self.inner.lock();
        let (hc, wc) = (t.hot.capacity, t.warm.capacity);
        t.hot = Lru::new(hc);
        t.warm = Lru::new(wc);
    }

    pub fn stats(&self) -> CacheStats {
        self.inner.lock().stats
    }

    pub fn reset_stats(&self) {
        self.inner.lock().stats = CacheStats::default();
    }

    pub fn occupancy(&self) -> (usize, usize) {
        let t = self.inner.lock();
        (t.hot.len(), t.warm.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_evicts_least_recent() {
        let mut lru = Lru::new(2);
        assert!(lru.put("a", 1).is_none());
        assert!(lru.put("b", 2).is_none());
        assert_eq!(lru.get(&"a"), Some(&1));
        assert_eq!(lru.put("c", 3), Some(("b", 2)));
        assert!(lru.contains(&"a") && lru.contains(&"c"));
        assert_eq!(lru.len(), 2);
    }

    #[test]
    fn zero_capacity_rejects_everything() {
        let mut lru = Lru::new(0);
        assert_eq!(lru.put(1, 1), Some((1, 1)));
        assert!(lru.is_empty());
    }

    fn entry(version: u64) -> HotEntry {
        HotEntry {
            version,
            vector: Arc::new(vec![version as f64]),
            facts: Arc::new(vec![]),
        }
    }

    #[test]
    fn demotion_and_promotion() {
        let c = TieredCache::new(1, 1);
        assert!(c.get("a", 1).is_none());
        c.promote("a", entry(1));
        c.promote("b", entry(1));
        assert_eq!(c.occupancy(), (1, 1));
        assert!(matches!(c.get("a", 1), Some(CacheHit::Warm(_))));
        assert!(matches!(c.get("b", 1), Some(CacheHit::Hot(_))));
        // stale version is a miss
        assert!(c.get("b", 2).is_none());
        let s = c.stats();
        assert_eq!((s.hot_hits, s.warm_hits, s.store_reads), (1, 1, 2));
    }
}
