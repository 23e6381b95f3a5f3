//! Benchmark suites and their self-describing reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{amplification_ratio, attention, fga_attention};
use crate::error::{Error, Result};
use crate::eval::{build_store, QueryRecord};
use crate::gate_train::{run_training, CorpusRecord, TrainConfig};
use crate::generate::{GenerationConfig, Generator, StageTimings};
use crate::kb::{FactRecord, KbStore, StoreOptions};
use crate::linalg::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Amplification,
    Update,
    Overhead,
    Cache,
    Calibration,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Amplification,
        Suite::Update,
        Suite::Overhead,
        Suite::Cache,
        Suite::Calibration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Amplification => "amplification",
            Self::Update => "update",
            Self::Overhead => "overhead",
            Self::Cache => "cache",
            Self::Calibration => "calibration",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown bench suite '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub unit: String,
}

/// A numeric table emitted as CSV and as a gnuplot data file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub suite: Suite,
    pub seed: u64,
    /// sha256 of the suite parameters and model configuration.
    pub config_hash: String,
    pub metrics: Vec<Metric>,
    pub tables: Vec<Table>,
}

/// Hex sha256 of a serializable configuration.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

impl BenchReport {
    fn new<T: Serialize + ?Sized>(suite: Suite, seed: u64, config: &T) -> Self {
        Self {
            suite,
            seed,
            config_hash: config_hash(config),
            metrics: Vec::new(),
            tables: Vec::new(),
        }
    }

    fn metric(&mut self, name: &str, value: f64, unit: &str) {
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
            unit: unit.to_string(),
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn header(&self) -> String {
        format!("suite={} seed={} config_hash={}", self.suite.name(), self.seed, self.config_hash)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.header());
        for m in &self.metrics {
            let _ = writeln!(out, "  {:<28} {:>14.6} {}", m.name, m.value, m.unit);
        }
        out
    }

    /// Writes `<suite>_metrics.csv`, and a `.csv` plus `.dat` per table,
    /// returning the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let header = self.header();
        let mut metrics = format!("# {header}\nname,value,unit\n");
        for m in &self.metrics {
            let _ = writeln!(metrics, "{},{},{}", m.name, m.value, m.unit);
        }
        let p = dir.join(format!("{}_metrics.csv", self.suite.name()));
        fs::write(&p, metrics)?;
        written.push(p);
        for t in &self.tables {
            let mut csv = format!("# {header}\n{}\n", t.columns.join(","));
            let mut dat = format!("# {header}\n# {}\n", t.columns.join(" "));
            for r in &t.rows {
                let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(csv, "{}", cells.join(","));
                let _ = writeln!(dat, "{}", cells.join(" "));
            }
            for (ext, body) in [("csv", &csv), ("dat", &dat)] {
                let p = dir.join(format!("{}_{}.{ext}", self.suite.name(), t.name));
                fs::write(&p, body)?;
                written.push(p);
            }
        }
        Ok(written)
    }
}

pub const AMPLIFICATION_ALPHAS: [f64; 4] = [0.2, 0.5, 0.8, 1.0];

/// Post-softmax odds ratio between a grounded column `i` and an ungrounded
/// column `j` at the last query row, FGA over baseline.
pub fn measured_odds_ratio(q: &Matrix, k: &Matrix, v: &Matrix, g: &Matrix, alpha: f64, i: usize, j: usize) -> Result<f64> {
    let l = q.rows();
    let fga = fga_attention(q, k, v, g, &vec![alpha; l])?;
    let base = attention(q, k, v)?;
    let t = l - 1;
    let (fw, bw) = (fga.weights.row(t), base.weights.row(t));
    Ok((fw[i] / fw[j]) / (bw[i] / bw[j]))
}

/// One random attention instance with column `grounded` carrying bias `g`.
pub fn amplification_instance(rng: &mut SeededRng, len: usize, d_k: usize, grounded: usize, g: f64) -> (Matrix, Matrix, Matrix, Matrix) {
    let q = rng.gaussian_matrix(len, d_k, 1.0);
    let k = rng.gaussian_matrix(len, d_k, 1.0);
    let v = rng.gaussian_matrix(len, d_k, 1.0);
    let mut gm = Matrix::zeros(len, len);
    for t in 0..len {
        gm.set(t, grounded, g);
    }
    (q, k, v, gm)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AmplificationParams {
    pub len: usize,
    pub d_k: usize,
    pub g_step: f64,
    pub g_max: f64,
}

impl Default for AmplificationParams {
    fn default() -> Self {
        Self {
            len: 8,
            d_k: 16,
            g_step: 0.5,
            g_max: 7.0,
        }
    }
}

pub fn amplification(params: AmplificationParams, seed: u64) -> Result<BenchReport> {
    let mut report = BenchReport::new(Suite::Amplification, seed, &params);
    let mut rng = SeededRng::new(seed);
    let mut table = Table::new("odds", &["alpha", "g", "measured", "closed_form", "relative_error"]);
    let steps = (params.g_max / params.g_step).round() as usize;
    let mut worst: f64 = 0.0;
    let mut at_reference = f64::NAN;
    for &alpha in &AMPLIFICATION_ALPHAS {
        for s in 0..=steps {
            let g = s as f64 * params.g_step;
            let (q, k, v, gm) = amplification_instance(&mut rng, params.len, params.d_k, 0, g);
            let measured = measured_odds_ratio(&q, &k, &v, &gm, alpha, 0, 1)?;
            let closed = amplification_ratio(alpha, g);
            let rel = (measured - closed).abs() / closed;
            worst = worst.max(rel);
            if alpha == 0.8 && g == 5.0 {
                at_reference = measured;
            }
            table.push(vec![alpha, g, measured, closed, rel]);
        }
    }
    report.metric("max_relative_error", worst, "ratio");
    report.metric("odds_ratio_alpha0.8_g5", at_reference, "x");
    report.tables.push(table);
    Ok(report)
}

/// Least-squares line through `(x, y)`: (intercept, slope, R²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}

pub const UPDATE_BATCHES: [usize; 4] = [1, 10, 100, 1000];

#[derive(Debug, Clone, Serialize)]
pub struct UpdateParams {
    pub batches: Vec<usize>,
    pub repeats: usize,
    pub embedding_dim: usize,
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self {
            batches: UPDATE_BATCHES.to_vec(),
            repeats: 3,
            embedding_dim: 64,
        }
    }
}

/// Times batches of `k` sequential updates against a scratch store seeded
/// with `facts`, taking the median of `repeats` runs per batch size.
pub fn update(facts: &[FactRecord], params: &UpdateParams, seed: u64, work_dir: &Path) -> Result<BenchReport> {
    if facts.is_empty() {
        return Err(Error::Input("update bench needs at least one fact".into()));
    }
    let mut report = BenchReport::new(Suite::Update, seed, params);
    let kb = build_store(&work_dir.join("update-bench"), facts.to_vec(), params.embedding_dim, seed)?;
    let mut table = Table::new("latency", &["k", "total_ms", "per_update_ms"]);
    let mut counter = 0usize;
    let mut singles = Vec::new();
    for &k in &params.batches {
        let mut runs = Vec::with_capacity(params.repeats);
        for _ in 0..params.repeats.max(1) {
            let started = Instant::now();
            for _ in 0..k {
                let f = &facts[counter % facts.len()];
                counter += 1;
                let out = kb.update_fact(&f.entity_id, &f.attribute, &format!("{} {}", counter, "units"))?;
                if k == 1 {
                    singles.push(out.latency);
                }
            }
            runs.push(started.elapsed());
        }
        runs.sort();
        let median = runs[runs.len() / 2].as_secs_f64() * 1e3;
        table.push(vec![k as f64, median, median / k as f64]);
    }
    let x = table.column("k").unwrap_or_default();
    let y = table.column("total_ms").unwrap_or_default();
    let (intercept, slope, r2) = linear_fit(&x, &y);
    singles.sort();
    let single = singles.get(singles.len() / 2).copied().unwrap_or_default();
    report.metric("single_update_latency", single.as_secs_f64() * 1e3, "ms");
    report.metric("fit_slope", slope, "ms/update");
    report.metric("fit_intercept", intercept, "ms");
    report.metric("fit_r2", r2, "ratio");
    report.tables.push(table);
    Ok(report)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Per-token stage timings for ungrounded and grounded generation over the
/// query prompts.
pub fn overhead(generator: &Generator, queries: &[QueryRecord], seed: u64) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::Input("empty query set".into()));
    }
    let mut report = BenchReport::new(Suite::Overhead, seed, generator.model().config());
    let mut table = Table::new(
        "stages",
        &["grounded", "forward_ms", "recognition_ms", "kb_lookup_ms", "grounding_ms", "masking_ms", "total_ms"],
    );
    let mut per_token = [0.0f64; 2];
    for (slot, config) in [GenerationConfig::baseline(), GenerationConfig::default()].iter().enumerate() {
        let mut sum = StageTimings::default();
        let mut tokens = 0usize;
        for q in queries {
            let out = generator.generate(&q.question, config)?;
            sum.accumulate(&out.timings);
            tokens += out.tokens.len().max(1);
        }
        let n = tokens as f64;
        let row = vec![
            slot as f64,
            ms(sum.forward) / n,
            ms(sum.recognition) / n,
            ms(sum.kb_lookup) / n,
            ms(sum.grounding) / n,
            ms(sum.masking) / n,
            ms(sum.total()) / n,
        ];
        per_token[slot] = row[6];
        if slot == 1 {
            report.metric("grounding_share", row[4] / row[6], "fraction of grounded total");
            report.metric("kb_lookup_share", row[3] / row[6], "fraction of grounded total");
        }
        table.push(row);
    }
    report.metric("baseline_per_token", per_token[0], "ms/token");
    report.metric("fga_per_token", per_token[1], "ms/token");
    report.metric("total_overhead", (per_token[1] - per_token[0]) / per_token[0], "fraction of baseline");
    report.tables.push(table);
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CacheParams {
    pub entities: usize,
    pub hot: usize,
    pub warm: usize,
    pub zipf_exponent: f64,
    pub lookups: usize,
    pub embedding_dim: usize,
}

impl Default for CacheParams {
    fn default() -> Self {
        Self {
            entities: 1000,
            hot: 50,
            warm: 200,
            zipf_exponent: 1.0,
            lookups: 100_000,
            embedding_dim: 64,
        }
    }
}

pub fn synthetic_entity(rank: usize) -> String {
    format!("synthetic:entity_{rank:05}")
}

/// The Zipf access trace a cache run replays.
pub fn zipf_trace(params: &CacheParams, seed: u64) -> Vec<usize> {
    let mut rng = SeededRng::new(seed);
    (0..params.lookups)
        .map(|_| rng.zipf(params.entities, params.zipf_exponent))
        .collect()
}

fn synthetic_facts(n: usize) -> Vec<FactRecord> {
    let ts = chrono::DateTime::parse_from_rfc3339("2024-06-01T00:00:00Z")
        .map(|t| t.to_utc())
        .unwrap_or_default();
    (0..n)
        .map(|i| FactRecord {
            entity_id: synthetic_entity(i),
            attribute: "rank".to_string(),
            value: i.to_string(),
            unit: None,
            confidence: 1.0,
            source: "synthetic".to_string(),
            timestamp: ts,
        })
        .collect()
}

/// Replays a Zipf trace through the store's hot/warm/store hierarchy.
pub fn cache(params: CacheParams, seed: u64, work_dir: &Path) -> Result<BenchReport> {
    let mut report = BenchReport::new(Suite::Cache, seed, &params);
    let mut opts = StoreOptions::new(work_dir.join("cache-bench"));
    opts.cache.hot_capacity = params.hot;
    opts.cache.warm_capacity = params.warm;
    opts.embedding_dim = params.embedding_dim;
    opts.seed = seed;
    opts.durable = false;
    let kb = KbStore::open(opts)?;
    kb.import_records(synthetic_facts(params.entities))?;
    kb.cache().clear();
    kb.cache().reset_stats();
    let trace = zipf_trace(&params, seed);
    let started = Instant::now();
    for &r in &trace {
        kb.lookup_with_cache(&synthetic_entity(r))?;
    }
    let elapsed = started.elapsed();
    let stats = kb.cache_stats();
    let n = stats.lookups() as f64;
    report.metric("hit_rate", stats.memory_hit_rate(), "fraction");
    report.metric("hot_hit_rate", stats.hot_hits as f64 / n, "fraction");
    report.metric("warm_hit_rate", stats.warm_hits as f64 / n, "fraction");
    report.metric("store_read_rate", stats.store_reads as f64 / n, "fraction");
    report.metric("mean_lookup", elapsed.as_secs_f64() * 1e6 / n, "us");
    let mut table = Table::new("tiers", &["tier", "lookups"]);
    table.push(vec![0.0, stats.hot_hits as f64]);
    table.push(vec![1.0, stats.warm_hits as f64]);
    table.push(vec![2.0, stats.store_reads as f64]);
    report.tables.push(table);
    Ok(report)
}

/// Trains the gate on `corpus` and reports held-out calibration.
pub fn calibration(generator: &Generator, corpus: &[CorpusRecord], config: &TrainConfig) -> Result<BenchReport> {
    let mut report = BenchReport::new(Suite::Calibration, config.seed, config);
    let r = run_training(generator, corpus, config)?;
    report.metric("heldout_ece", r.heldout_calibration.ece, "fraction");
    report.metric("class_separation", r.class_separation, "alpha");
    report.metric("final_loss", r.final_loss.total, "nats");
    report.metric("grad_check_max_relative_error", r.grad_check.max_relative_error, "ratio");
    let mut bins = Table::new("reliability", &["lower", "upper", "count", "confidence", "accuracy"]);
    for b in &r.heldout_calibration.bins {
        bins.push(vec![b.lower, b.upper, b.count as f64, b.confidence, b.accuracy]);
    }
    let mut hist = Table::new("alpha_histogram", &["bin_lower", "factual", "creative"]);
    let k = r.heldout_calibration.positive_histogram.len();
    for i in 0..k {
        hist.push(vec![
            i as f64 / k as f64,
            r.heldout_calibration.positive_histogram[i] as f64,
            r.heldout_calibration.negative_histogram[i] as f64,
        ]);
    }
    report.tables.push(bins);
    report.tables.push(hist);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_exact_lines() {
        let x = [1.0, 10.0, 100.0, 1000.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 2.0 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 0.5).abs() < 1e-9 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, 1.0, -1.0]);
        assert!(r2 < 0.5);
    }

    #[test]
    fn suites_parse_by_name() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("latency".parse::<Suite>().is_err());
    }

    #[test]
    fn amplification_matches_closed_form() {
        let r = amplification(AmplificationParams::default(), 3).unwrap();
        assert!(r.get("max_relative_error").unwrap() < 1e-9);
        assert!((r.get("odds_ratio_alpha0.8_g5").unwrap() - 54.598150033144236).abs() < 1e-6);
        assert_eq!(r.table("odds").unwrap().rows.len(), 4 * 15);
    }

    #[test]
    fn reports_are_self_describing() {
        let dir = tempfile::tempdir().unwrap();
        let r = amplification(AmplificationParams::default(), 3).unwrap();
        let files = r.write(dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            let body = fs::read_to_string(f).unwrap();
            let first = body.lines().next().unwrap();
            assert!(first.contains("seed=3") && first.contains(&r.config_hash));
        }
        assert_eq!(r.config_hash, config_hash(&AmplificationParams::default()));
    }

    #[test]
    fn cache_run_counts_every_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let params = CacheParams {
            entities: 40,
            hot: 4,
            warm: 6,
            lookups: 500,
            ..Default::default()
        };
        let r = cache(params, 1, dir.path()).unwrap();
        let sum: f64 = r.table("tiers").unwrap().column("lookups").unwrap().iter().sum();
        assert_eq!(sum, 500.0);
        let h = r.get("hit_rate").unwrap();
        assert!((0.0..=1.0).contains(&h));
    }
}
