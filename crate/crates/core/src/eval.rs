//! Query-set evaluation across generation modes, and the KB coverage ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::GateParams;
use crate::constrain::ConstraintConfig;
use crate::error::{Error, Result};
use crate::generate::{AlphaMode, GenerationConfig, Generator};
use crate::kb::{FactRecord, KbStore, StoreOptions};
use crate::linalg::SeededRng;
use crate::linker::AliasEntry;
use crate::model::ToyModel;
use crate::text::contains_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DirectRetrieval,
    Disambiguation,
    ModelConfusion,
    NumericalPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Phones,
    Laptops,
    Evs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub question: String,
    pub entity_id: String,
    pub attribute: String,
    pub gold_answer: String,
    pub category: Category,
    pub domain: Domain,
}

pub fn parse_queries(text: &str, origin: &Path) -> Result<Vec<QueryRecord>> {
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

pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    parse_queries(&fs::read_to_string(path)?, path)
}

/// Generation configurations compared by `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// No grounding.
    Baseline,
    /// Heuristic gate with hard constraints.
    Fga,
    /// Heuristic gate, constraints off.
    FgaNoConstraints,
    /// α = 1 everywhere, constraints on.
    FgaAlways,
    /// Trained gate, constraints on.
    FgaLearned,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Fga => "fga",
            Self::FgaNoConstraints => "fga-no-constraints",
            Self::FgaAlways => "fga-always",
            Self::FgaLearned => "fga-learned",
        }
    }

    pub fn config(self, gate: Option<&GateParams>) -> GenerationConfig {
        let base = GenerationConfig::default();
        match self {
            Self::Baseline => GenerationConfig::baseline(),
            Self::Fga => base,
            Self::FgaNoConstraints => GenerationConfig {
                constraints: ConstraintConfig {
                    enabled: false,
                    ..Default::default()
                },
                ..base
            },
            Self::FgaAlways => GenerationConfig {
                alpha_mode: AlphaMode::Always,
                ..base
            },
            Self::FgaLearned => GenerationConfig {
                alpha_mode: AlphaMode::Learned,
                gate: gate.cloned(),
                ..base
            },
        }
    }
}

/// One generated answer with its judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: EvalMode,
    pub question: String,
    pub domain: Domain,
    pub category: Category,
    pub gold_answer: String,
    pub output: String,
    /// All four guarantee conditions held and the linked fact is the queried one.
    pub in_scope: bool,
    /// The emitted constrained answer is a path of the fact's constraint set.
    pub answer_is_path: bool,
    pub correct: bool,
}

/// An answer is correct iff the normalized gold value occurs in the output.
pub fn judge(output: &str, gold: &str) -> bool {
    contains_answer(output, gold)
}

/// Generates an answer for every (mode, query) pair.
pub fn run_queries(
    generator: &Generator,
    queries: &[QueryRecord],
    modes: &[EvalMode],
    gate: Option<&GateParams>,
) -> Result<Vec<EvalRecord>> {
    if queries.is_empty() {
        return Err(Error::Input("empty query set".into()));
    }
    let mut records = Vec::with_capacity(queries.len() * modes.len());
    for &mode in modes {
        let config = mode.config(gate);
        for q in queries {
            let out = generator.generate(&q.question, &config)?;
            let linked_right = out
                .resolved
                .as_ref()
                .is_some_and(|r| r.entity_id == q.entity_id && r.attribute == q.attribute);
            records.push(EvalRecord {
                mode,
                question: q.question.clone(),
                domain: q.domain,
                category: q.category,
                gold_answer: q.gold_answer.clone(),
                correct: judge(&out.text, &q.gold_answer),
                output: out.text,
                in_scope: out.scope.holds() && linked_right,
                answer_is_path: out.answer_is_path,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub overall: Tally,
    /// Guarantee-scope subset.
    pub scope: Tally,
    pub by_domain: BTreeMap<Domain, Tally>,
    pub by_category: BTreeMap<Category, Tally>,
    pub cells: BTreeMap<(Domain, Category), Tally>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub modes: Vec<ModeSummary>,
}

/// Aggregates records, re-judging each output from its text and gold answer.
pub fn summarize(records: &[EvalRecord]) -> EvalReport {
    let mut by_mode: BTreeMap<EvalMode, ModeSummary> = BTreeMap::new();
    for r in records {
        let ok = judge(&r.output, &r.gold_answer);
        let s = by_mode.entry(r.mode).or_insert_with(|| ModeSummary {
            mode: r.mode,
            overall: Tally::default(),
            scope: Tally::default(),
            by_domain: BTreeMap::new(),
            by_category: BTreeMap::new(),
            cells: BTreeMap::new(),
        });
        s.overall.add(ok);
        if r.in_scope {
            s.scope.add(ok);
        }
        s.by_domain.entry(r.domain).or_default().add(ok);
        s.by_category.entry(r.category).or_default().add(ok);
        s.cells.entry((r.domain, r.category)).or_default().add(ok);
    }
    EvalReport {
        modes: by_mode.into_values().collect(),
    }
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Phones => "phones",
        Domain::Laptops => "laptops",
        Domain::Evs => "evs",
    }
}

fn category_name(c: Category) -> &'static str {
    match c {
        Category::DirectRetrieval => "direct_retrieval",
        Category::Disambiguation => "disambiguation",
        Category::ModelConfusion => "model_confusion",
        Category::NumericalPrecision => "numerical_precision",
    }
}

impl EvalReport {
    pub fn mode(&self, mode: EvalMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let pct = |t: &Tally| format!("{:6.1}% ({}/{})", 100.0 * t.accuracy(), t.correct, t.total);
        let mut out = String::new();
        for m in &self.modes {
            let _ = writeln!(out, "mode {}", m.mode.name());
            let _ = writeln!(out, "  overall              {}", pct(&m.overall));
            let _ = writeln!(out, "  guarantee scope      {}", pct(&m.scope));
            for (d, t) in &m.by_domain {
                let _ = writeln!(out, "  {:<20} {}", domain_name(*d), pct(t));
            }
            for (c, t) in &m.by_category {
                let _ = writeln!(out, "  {:<20} {}", category_name(*c), pct(t));
            }
        }
        out
    }

    /// Domain × category accuracy per mode as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,domain,category,total,correct,accuracy\n");
        for m in &self.modes {
            for ((d, c), t) in &m.cells {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.4}",
                    m.mode.name(),
                    domain_name(*d),
                    category_name(*c),
                    t.total,
                    t.correct,
                    t.accuracy()
                );
            }
        }
        out
    }
}

/// Outcome of evaluating against a store that keeps only part of the KB.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageAblation {
    pub kept_facts: usize,
    pub total_facts: usize,
    /// Fraction of queries whose fact survived the deletion.
    pub query_coverage: f64,
    /// Constrained-mode accuracy on the reduced store.
    pub accuracy: f64,
    /// Constrained-mode accuracy on the full store.
    pub full_accuracy: f64,
}

/// Creates a store under `dir` holding `records`.
pub fn build_store(dir: &Path, records: Vec<FactRecord>, embedding_dim: usize, seed: u64) -> Result<Arc<KbStore>> {
    let mut opts = StoreOptions::new(dir);
    opts.embedding_dim = embedding_dim;
    opts.seed = seed;
    opts.durable = false;
    let kb = KbStore::open(opts)?;
    kb.import_records(records)?;
    Ok(Arc::new(kb))
}

/// Deletes a seeded random `1 - keep_fraction` of the facts and compares
/// constrained accuracy with the surviving query coverage.
pub fn coverage_ablation(
    model: &ToyModel,
    facts: &[FactRecord],
    aliases: &[AliasEntry],
    queries: &[QueryRecord],
    keep_fraction: f64,
    seed: u64,
    work_dir: &Path,
) -> Result<CoverageAblation> {
    let d = model.config().d;
    let full_kb = build_store(&work_dir.join("full"), facts.to_vec(), d, seed)?;
    let full = Generator::new(model.clone(), full_kb, aliases.to_vec())?;
    let full_records = run_queries(&full, queries, &[EvalMode::Fga], None)?;

    let mut idx: Vec<usize> = (0..facts.len()).collect();
    SeededRng::new(seed).shuffle(&mut idx);
    let keep = ((facts.len() as f64) * keep_fraction).round() as usize;
    let kept: Vec<FactRecord> = idx[..keep].iter().map(|&i| facts[i].clone()).collect();
    let covered = queries
        .iter()
        .filter(|q| kept.iter().any(|f| f.entity_id == q.entity_id && f.attribute == q.attribute))
        .count();
    let reduced_kb = build_store(&work_dir.join("reduced"), kept, d, seed)?;
    let reduced = Generator::new(model.clone(), reduced_kb, aliases.to_vec())?;
    let records = run_queries(&reduced, queries, &[EvalMode::Fga], None)?;
    let acc = |r: &[EvalRecord]| r.iter().filter(|r| r.correct).count() as f64 / r.len() as f64;
    Ok(CoverageAblation {
        kept_facts: keep,
        total_facts: facts.len(),
        query_coverage: covered as f64 / queries.len() as f64,
        accuracy: acc(&records),
        full_accuracy: acc(&full_records),
    })
}
