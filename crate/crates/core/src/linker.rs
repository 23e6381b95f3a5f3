//! Gazetteer entity linking: longest-leftmost alias matching over token
//! windows, stride-chunked recognition, and the entity → token assignment
//! matrix.
//!
//! Chunk windows extend `max_alias_len - 1` tokens past their stride so an
//! alias that straddles a chunk boundary is matched in the chunk where it
//! starts. Together with carrying the scan position across chunks this makes
//! chunked output identical to a single scan of the whole sequence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::text::tokenize;

/// One line of the alias file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasEntry {
    pub entity_id: String,
    pub aliases: Vec<String>,
}

pub fn read_alias_file(path: &Path) -> Result<Vec<AliasEntry>> {
    let text = fs::read_to_string(path)?;
    parse_alias_text(&text, path)
}

pub fn parse_alias_text(text: &str, origin: &Path) -> Result<Vec<AliasEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Alias tokens derived from an entity id: `phone:iphone_15_pro` → `iphone 15 pro`.
pub fn id_alias(entity_id: &str) -> Vec<String> {
    let ident = entity_id.split_once(':').map_or(entity_id, |(_, i)| i);
    tokenize(&ident.replace('_', " "))
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<String, usize>,
    entity: Option<usize>,
}

/// Alias table compiled into a token trie.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    nodes: Vec<TrieNode>,
    entities: Vec<String>,
    aliases: BTreeMap<Vec<String>, usize>,
    max_alias_len: usize,
}

impl Gazetteer {
    /// Builds from the KB's entity ids plus optional explicit aliases.
    /// Aliases for entities absent from the KB are dropped. When two
    /// entities claim the same alias, the one with the longer id-derived
    /// alias (the more specific entity) keeps it.
    pub fn build(entity_ids: &[String], extra: &[AliasEntry]) -> Self {
        let mut entities: Vec<String> = entity_ids.to_vec();
        entities.sort();
        entities.dedup();
        let slot: HashMap<&str, usize> = entities.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let specificity: Vec<usize> = entities.iter().map(|e| id_alias(e).len()).collect();

        let mut aliases: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        let mut claim = |tokens: Vec<String>, idx: usize| {
            if tokens.is_empty() {
                return;
            }
            match aliases.get(&tokens) {
                Some(&cur) if cur == idx => {}
                Some(&cur) => {
                    let keep_new = (specificity[idx], std::cmp::Reverse(&entities[idx]))
                        > (specificity[cur], std::cmp::Reverse(&entities[cur]));
                    let winner = if keep_new { idx } else { cur };
                    log::warn!(
                        "alias {:?} claimed by {} and {}; keeping {}",
                        tokens.join(" "),
                        entities[cur],
                        entities[idx],
                        entities[winner]
                    );
                    aliases.insert(tokens, winner);
                }
                None => {
                    aliases.insert(tokens, idx);
                }
            }
        };
        for (i, e) in entities.iter().enumerate() {
            claim(id_alias(e), i);
        }
        for entry in extra {
            let Some(&idx) = slot.get(entry.entity_id.as_str()) else {
                log::warn!("alias entry for unknown entity {} ignored", entry.entity_id);
                continue;
            };
            for a in &entry.aliases {
                claim(tokenize(a), idx);
            }
        }

        let mut nodes = vec![TrieNode::default()];
        let mut max_alias_len = 0;
        for (tokens, &idx) in &aliases {
            max_alias_len = max_alias_len.max(tokens.len());
            let mut cur = 0;
            for t in tokens {
                cur = match nodes[cur].children.get(t) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(t.clone(), n);
                        n
                    }
                };
            }
            nodes[cur].entity = Some(idx);
        }
        Self {
            nodes,
            entities,
            aliases,
            max_alias_len,
        }
    }

    pub fn alias_count(&self) -> usize {
        self.aliases.len()
    }

    pub fn max_alias_len(&self) -> usize {
        self.max_alias_len
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    /// Entity an exact alias resolves to.
    pub fn resolve(&self, alias: &str) -> Option<&str> {
        self.aliases.get(&tokenize(alias)).map(|&i| self.entities[i].as_str())
    }

    pub fn aliases(&self) -> impl Iterator<Item = (String, &str)> {
        self.aliases.iter().map(|(k, &v)| (k.join(" "), self.entities[v].as_str()))
    }

    /// Longest alias starting at `start`: (end, entity index).
    fn longest_at(&self, tokens: &[String], start: usize) -> Option<(usize, usize)> {
        let mut node = 0;
        let mut best = None;
        for (i, t) in tokens.iter().enumerate().skip(start) {
            match self.nodes[node].children.get(t) {
                Some(&n) => node = n,
                None => break,
            }
            if let Some(e) = self.nodes[node].entity {
                best = Some((i + 1, e));
            }
        }
        best
    }

    /// Greedy scan of `tokens` from `from`, accepting matches that start
    /// before `start_limit`. Returns spans and the position the scan stopped at.
    fn scan(&self, tokens: &[String], from: usize, start_limit: usize) -> (Vec<EntitySpan>, usize) {
        let mut spans = Vec::new();
        let mut p = from;
        while p < start_limit.min(tokens.len()) {
            match self.longest_at(tokens, p) {
                Some((end, e)) => {
                    spans.push(EntitySpan {
                        entity_id: self.entities[e].clone(),
                        start: p,
                        end,
                    });
                    p = end;
                }
                None => p += 1,
            }
        }
        (spans, p.max(from))
    }

    /// All longest-leftmost, non-overlapping alias matches in `window`.
    pub fn recognize(&self, window: &[String]) -> Vec<EntitySpan> {
        self.scan(window, 0, window.len()).0
    }
}

/// Token span `[start, end)` linked to an entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity_id: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecognizerConfig {
    pub stride: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self { stride: 16 }
    }
}

impl RecognizerConfig {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Precondition("stride must be >= 1".into()));
        }
        Ok(Self { stride })
    }

    /// Appended tokens served from the previous recognition before re-running it.
    pub fn cache_horizon(&self) -> usize {
        self.stride - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedRecognition {
    pub spans: Vec<EntitySpan>,
    /// Number of window recognitions performed.
    pub invocations: usize,
}

impl ChunkedRecognition {
    /// Distinct entities in order of first mention.
    pub fn entities(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.spans {
            if !out.contains(&s.entity_id) {
                out.push(s.entity_id.clone());
            }
        }
        out
    }

    /// Token positions covered by some entity.
    pub fn positions(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|s| s.start..s.end).collect()
    }
}

/// Recognition over stride-sized chunks, one window recognition per chunk.
pub fn chunked_recognize(gazetteer: &Gazetteer, tokens: &[String], config: RecognizerConfig) -> ChunkedRecognition {
    let stride = config.stride.max(1);
    let overlap = gazetteer.max_alias_len().saturating_sub(1);
    let mut spans = Vec::new();
    let mut invocations = 0;
    let mut resume: usize = 0;
    let mut chunk = 0;
    while chunk < tokens.len() {
        let chunk_end = (chunk + stride).min(tokens.len());
        let window_end = (chunk_end + overlap).min(tokens.len());
        let window = &tokens[chunk..window_end];
        invocations += 1;
        let (found, next) = gazetteer.scan(window, resume.saturating_sub(chunk), chunk_end - chunk);
        spans.extend(found.into_iter().map(|s| EntitySpan {
            start: s.start + chunk,
            end: s.end + chunk,
            ..s
        }));
        resume = next + chunk;
        chunk = chunk_end;
    }
    ChunkedRecognition { spans, invocations }
}

/// Incremental recognition for a growing token stream. Recognition re-runs
/// once every `stride` appended tokens, and then only over the tail whose
/// longest-match decisions could still change.
#[derive(Debug, Clone)]
pub struct StreamRecognizer<'g> {
    gazetteer: &'g Gazetteer,
    stride: usize,
    tokens: Vec<String>,
    spans: Vec<EntitySpan>,
    recognized_len: usize,
    invocations: usize,
}

impl<'g> StreamRecognizer<'g> {
    pub fn new(gazetteer: &'g Gazetteer, config: RecognizerConfig, prompt: Vec<String>) -> Self {
        let initial = chunked_recognize(gazetteer, &prompt, config);
        Self {
            gazetteer,
            stride: config.stride.max(1),
            recognized_len: prompt.len(),
            tokens: prompt,
            spans: initial.spans,
            invocations: initial.invocations,
        }
    }

    pub fn push(&mut self, token: String) {
        self.tokens.push(token);
        if self.tokens.len() - self.recognized_len >= self.stride {
            self.refresh();
        }
    }

    /// Re-runs recognition now regardless of the stride cache.
    pub fn refresh(&mut self) {
        if self.tokens.len() == self.recognized_len {
            return;
        }
        let max_len = self.gazetteer.max_alias_len().max(1);
        // decisions at p were made with full lookahead iff p + max_len <= recognized_len
        let settled = (self.recognized_len + 1).saturating_sub(max_len);
        self.spans.retain(|s| s.start < settled);
        let from = self.spans.last().map_or(settled, |s| s.end.max(settled));
        let (found, _) = self.gazetteer.scan(&self.tokens, from, self.tokens.len());
        self.invocations += 1;
        self.spans.extend(found);
        self.recognized_len = self.tokens.len();
    }

    pub fn spans(&self) -> &[EntitySpan] {
        &self.spans
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }
}

/// Binary M×L entity → token map; rows follow `entities`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub matrix: Matrix,
    pub entities: Vec<String>,
}

impl AssignmentMatrix {
    pub fn empty(len: usize) -> Self {
        Self {
            matrix: Matrix::zeros(0, len),
            entities: Vec::new(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn seq_len(&self) -> usize {
        self.matrix.cols()
    }

    /// Entity row owning token `j`, if any.
    pub fn owner(&self, j: usize) -> Option<usize> {
        (0..self.matrix.rows()).find(|&i| self.matrix.get(i, j) == 1.0)
    }
}

/// One row per distinct entity (first-mention order); mentions of the same
/// entity share a row.
pub fn assignment_matrix(spans: &[EntitySpan], len: usize) -> Result<AssignmentMatrix> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for s in &sorted {
        if s.start >= s.end || s.end > len {
            return Err(Error::Precondition(format!(
                "span [{}, {}) of {} invalid for length {len}",
                s.start, s.end, s.entity_id
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Precondition(format!(
                "spans [{}, {}) and [{}, {}) overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    let mut entities: Vec<String> = Vec::new();
    for s in &sorted {
        if !entities.contains(&s.entity_id) {
            entities.push(s.entity_id.clone());
        }
    }
    let mut matrix = Matrix::zeros(entities.len(), len);
    for s in &sorted {
        let row = entities.iter().position(|e| *e == s.entity_id).expect("entity listed above");
        for j in s.start..s.end {
            matrix.set(row, j, 1.0);
        }
    }
    Ok(AssignmentMatrix { matrix, entities })
}
