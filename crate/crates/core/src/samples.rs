//! The bundled mini KB, aliases, query set, gate corpus and configs.

use std::path::Path;

use crate::error::Result;
use crate::eval::{parse_queries, QueryRecord};
use crate::gate_train::{parse_corpus, CorpusRecord, TrainConfig};
use crate::kb::{parse_kb_text, FactRecord};
use crate::linker::{parse_alias_text, AliasEntry};
use crate::model::ToyModelConfig;

pub const KB_JSONL: &str = include_str!("../data/kb.jsonl");
pub const ALIASES_JSONL: &str = include_str!("../data/aliases.jsonl");
pub const QUERIES_JSONL: &str = include_str!("../data/queries.jsonl");
pub const GATE_CORPUS_JSONL: &str = include_str!("../data/gate_corpus.jsonl");
pub const MODEL_CONFIG_JSON: &str = include_str!("../data/model_config.json");
pub const TRAIN_CONFIG_JSON: &str = include_str!("../data/train_config.json");

pub fn facts() -> Result<Vec<FactRecord>> {
    parse_kb_text(KB_JSONL, Path::new("data/kb.jsonl"))
}

pub fn aliases() -> Result<Vec<AliasEntry>> {
    parse_alias_text(ALIASES_JSONL, Path::new("data/aliases.jsonl"))
}

pub fn queries() -> Result<Vec<QueryRecord>> {
    parse_queries(QUERIES_JSONL, Path::new("data/queries.jsonl"))
}

pub fn gate_corpus() -> Result<Vec<CorpusRecord>> {
    parse_corpus(GATE_CORPUS_JSONL, Path::new("data/gate_corpus.jsonl"))
}

pub fn model_config() -> Result<ToyModelConfig> {
    ToyModelConfig::from_json(MODEL_CONFIG_JSON)
}

pub fn train_config() -> Result<TrainConfig> {
    TrainConfig::from_json(TRAIN_CONFIG_JSON)
}
