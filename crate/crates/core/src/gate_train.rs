//! Fitting the learned fact gate on silver labels.
//!
//! A prompt gets label 1 when its linked entity and resolved attribute exist
//! in the KB and the gold answer matches the stored value. The gate is a
//! logistic model over `[q_t; c_t]` at the last prompt position, trained by
//! full-batch gradient descent on `β1·BCE + β4·mean|α|`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{gate_input, GateFeatures, GateMode, GateParams};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::generate::Generator;
use crate::linalg::{dot, sigmoid, Matrix, SeededRng};
use crate::linker::RecognizerConfig;
use crate::text::{answers_match, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextClass {
    Factual,
    Creative,
}

/// One line of a gate training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub query: String,
    #[serde(default)]
    pub gold_answer: Option<String>,
    pub context_class: ContextClass,
}

pub fn parse_corpus(text: &str, origin: &Path) -> Result<Vec<CorpusRecord>> {
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

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    parse_corpus(&fs::read_to_string(path)?, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilverExample {
    pub query: String,
    pub token_ids: Vec<TokenId>,
    /// Context features at the last prompt position.
    pub features: GateFeatures,
    /// Head-0 query of the first grounded layer at the last prompt position.
    pub query_vector: Vec<f64>,
    pub label: f64,
    pub context_class: ContextClass,
}

impl SilverExample {
    pub fn input(&self) -> Vec<f64> {
        gate_input(&self.query_vector, &self.features)
    }
}

/// Whether `query`'s resolved KB value agrees with `gold`.
pub fn silver_label(generator: &Generator, query: &str, gold: &str) -> Result<bool> {
    let a = generator.analyze(query, RecognizerConfig::default())?;
    let Some(r) = a.resolved else { return Ok(false) };
    Ok(match generator.kb().get_fact(&r.entity_id, &r.attribute) {
        Ok(f) => answers_match(gold, &f.value),
        Err(_) => false,
    })
}

/// Labels every record that carries a gold answer; the rest are skipped.
pub fn silver_labels(generator: &Generator, records: &[CorpusRecord]) -> Result<Vec<SilverExample>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let Some(gold) = r.gold_answer.as_deref().filter(|g| !g.trim().is_empty()) else {
            log::warn!("skipping {:?}: no gold answer", r.query);
            continue;
        };
        let label = silver_label(generator, &r.query, gold)?;
        let a = generator.analyze(&r.query, RecognizerConfig::default())?;
        let q = generator.model().gate_queries(&a.ids)?;
        let last = a.ids.len() - 1;
        out.push(SilverExample {
            query: r.query.clone(),
            features: a.features[last],
            query_vector: q.row(last).to_vec(),
            token_ids: a.ids,
            label: if label { 1.0 } else { 0.0 },
            context_class: r.context_class,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta4: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub seed: u64,
}

fn default_holdout() -> f64 {
    0.25
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            epochs: 400,
            beta1: 1.0,
            beta4: 0.01,
            holdout_fraction: default_holdout(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let valid = self.learning_rate > 0.0 && self.beta4 >= 0.0 && self.beta1 >= 0.0;
        if !valid {
            return Err(Error::Input("learning_rate must be > 0 and betas >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Input("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Input(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub l1: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logit(params: &GateParams, x: &[f64]) -> f64 {
    dot(&params.w_alpha, x) + params.b_alpha
}

fn check_batch(params: &GateParams, batch: &[SilverExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let width = batch[0].input().len();
    if params.w_alpha.len() != width {
        return Err(Error::Shape {
            op: "gate_loss",
            left: (1, params.w_alpha.len()),
            right: (1, width),
        });
    }
    Ok(())
}

/// `β1·BCE(α, y) + β4·mean|α|` over `batch`.
pub fn gate_loss(params: &GateParams, batch: &[SilverExample], config: &TrainConfig) -> Result<LossParts> {
    check_batch(params, batch)?;
    let n = batch.len() as f64;
    let (mut bce, mut l1) = (0.0, 0.0);
    for ex in batch {
        let z = logit(params, &ex.input());
        // -ln σ(z) = softplus(-z), -ln(1 - σ(z)) = softplus(z)
        bce += ex.label * softplus(-z) + (1.0 - ex.label) * softplus(z);
        l1 += sigmoid(z).abs();
    }
    let (bce, l1) = (bce / n, l1 / n);
    Ok(LossParts {
        total: config.beta1 * bce + config.beta4 * l1,
        bce,
        l1,
    })
}

/// Analytic gradient of [`gate_loss`]: weights then bias.
pub fn gate_gradient(params: &GateParams, batch: &[SilverExample], config: &TrainConfig) -> Result<(Vec<f64>, f64)> {
    check_batch(params, batch)?;
    let n = batch.len() as f64;
    let mut dw = vec![0.0; params.w_alpha.len()];
    let mut db = 0.0;
    for ex in batch {
        let x = ex.input();
        let a = sigmoid(logit(params, &x));
        // α > 0 for finite z, so d|α|/dz = α(1 - α)
        let dz = (config.beta1 * (a - ex.label) + config.beta4 * a * (1.0 - a)) / n;
        for (g, xi) in dw.iter_mut().zip(&x) {
            *g += dz * xi;
        }
        db += dz;
    }
    Ok((dw, db))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Coordinates skipped because some example sits exactly on the |α| kink at α = 0.
    pub excluded: Vec<usize>,
}

/// Compares [`gate_gradient`] with central differences (h = 1e-5). Relative
/// error is `|a − n| / max(|a|, |n|, 1e-6)`, so vanishing coordinates are
/// compared absolutely. Coordinate `w.len()` is the bias.
pub fn grad_check(params: &GateParams, batch: &[SilverExample], config: &TrainConfig) -> Result<GradCheck> {
    const H: f64 = 1e-5;
    let (dw, db) = gate_gradient(params, batch, config)?;
    let mut analytic = dw;
    analytic.push(db);

    let kinked: Vec<Vec<f64>> = batch
        .iter()
        .map(|ex| ex.input())
        .filter(|x| sigmoid(logit(params, x)) == 0.0)
        .collect();
    let mut excluded = Vec::new();
    if config.beta4 > 0.0 && !kinked.is_empty() {
        for i in 0..analytic.len() {
            let touches = i == params.w_alpha.len() || kinked.iter().any(|x| x[i] != 0.0);
            if touches {
                excluded.push(i);
            }
        }
    }

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, &a) in analytic.iter().enumerate() {
        if excluded.contains(&i) {
            continue;
        }
        let shifted = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            if i == p.w_alpha.len() {
                p.b_alpha += delta;
            } else {
                p.w_alpha[i] += delta;
            }
            Ok(gate_loss(&p, batch, config)?.total)
        };
        let numeric = (shifted(H)? - shifted(-H)?) / (2.0 * H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(GradCheck {
        max_relative_error: worst,
        coordinates_checked: checked,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: GateParams,
    /// Loss before training followed by the loss after each epoch.
    pub losses: Vec<f64>,
    pub final_learning_rate: f64,
}

/// Full-batch gradient descent from `init`. A step that would raise the loss
/// is retried at half the step size, so the loss sequence never increases.
pub fn train_gate(init: GateParams, examples: &[SilverExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let positives = examples.iter().filter(|e| e.label == 1.0).count();
    if positives == 0 || positives == examples.len() {
        return Err(Error::DegenerateData(format!(
            "{positives} of {} examples are positive; both classes are required",
            examples.len()
        )));
    }
    let mut params = GateParams {
        mode: GateMode::Learned,
        ..init
    };
    let mut lr = config.learning_rate;
    let mut loss = gate_loss(&params, examples, config)?.total;
    let mut losses = vec![loss];
    for _ in 0..config.epochs {
        let (dw, db) = gate_gradient(&params, examples, config)?;
        let mut halvings = 0;
        loop {
            let mut next = params.clone();
            for (w, g) in next.w_alpha.iter_mut().zip(&dw) {
                *w -= lr * g;
            }
            next.b_alpha -= lr * db;
            let next_loss = gate_loss(&next, examples, config)?.total;
            if next_loss <= loss {
                params = next;
                loss = next_loss;
                break;
            }
            lr /= 2.0;
            halvings += 1;
            if halvings > 60 {
                break;
            }
        }
        losses.push(loss);
    }
    Ok(TrainOutcome {
        params,
        losses,
        final_learning_rate: lr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean gate value in the bin.
    pub confidence: f64,
    /// Fraction of positive labels in the bin.
    pub accuracy: f64,
    /// Share of all examples in the bin.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bin_count: usize,
    pub bins: Vec<CalibrationBin>,
    /// Per-bin counts of label-1 examples.
    pub positive_histogram: Vec<usize>,
    /// Per-bin counts of label-0 examples.
    pub negative_histogram: Vec<usize>,
}

/// Expected calibration error over equal-width bins.
pub fn ece(values: &[f64], labels: &[f64], bins: usize) -> Result<CalibrationReport> {
    if values.is_empty() || bins == 0 {
        return Err(Error::Input("calibration needs at least one value and one bin".into()));
    }
    if values.len() != labels.len() {
        return Err(Error::Shape {
            op: "ece",
            left: (values.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("gate value {v} outside [0, 1]")));
    }
    let n = values.len() as f64;
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    let mut pos = vec![0; bins];
    let mut neg = vec![0; bins];
    for (&v, &y) in values.iter().zip(labels) {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        sums[b].0 += 1;
        sums[b].1 += v;
        sums[b].2 += y;
        if y >= 0.5 {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    let mut total = 0.0;
    let bins_out = sums
        .iter()
        .enumerate()
        .map(|(i, &(count, conf, acc))| {
            let (confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf / count as f64, acc / count as f64)
            };
            let weight = count as f64 / n;
            total += weight * (confidence - accuracy).abs();
            CalibrationBin {
                lower: i as f64 / bins as f64,
                upper: (i + 1) as f64 / bins as f64,
                count,
                confidence,
                accuracy,
                weight,
            }
        })
        .collect();
    Ok(CalibrationReport {
        ece: total,
        bin_count: bins,
        bins: bins_out,
        positive_histogram: pos,
        negative_histogram: neg,
    })
}

/// Gate values of `params` on each example.
pub fn predict(params: &GateParams, examples: &[SilverExample]) -> Vec<f64> {
    examples.iter().map(|e| sigmoid(logit(params, &e.input()))).collect()
}

/// Mean gate value on factual prompts minus the mean on creative ones.
pub fn class_separation(values: &[f64], examples: &[SilverExample]) -> f64 {
    let mean = |class: ContextClass| {
        let v: Vec<f64> = values
            .iter()
            .zip(examples)
            .filter(|(_, e)| e.context_class == class)
            .map(|(v, _)| *v)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(ContextClass::Factual) - mean(ContextClass::Creative)
}

/// Deterministic train / held-out split.
pub fn split(examples: Vec<SilverExample>, holdout_fraction: f64, seed: u64) -> (Vec<SilverExample>, Vec<SilverExample>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    SeededRng::new(seed).shuffle(&mut idx);
    let held = ((examples.len() as f64) * holdout_fraction).round() as usize;
    let mut slots: Vec<Option<SilverExample>> = examples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| ids.iter().map(|&i| slots[i].take().expect("each index once")).collect::<Vec<_>>();
    let test = take(&idx[..held]);
    let train = take(&idx[held..]);
    (train, test)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    #[serde(skip)]
    pub params: GateParams,
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub initial_loss: f64,
    pub final_loss: LossParts,
    pub grad_check: GradCheck,
    pub heldout_calibration: CalibrationReport,
    pub class_separation: f64,
    pub model_checksum_before: String,
    pub model_checksum_after: String,
}

/// Silver labelling, split, training and held-out calibration in one call.
pub fn run_training(generator: &Generator, corpus: &[CorpusRecord], config: &TrainConfig) -> Result<TrainingReport> {
    config.validate()?;
    let before = generator.model().checksum();
    let examples = silver_labels(generator, corpus)?;
    let (train, test) = split(examples, config.holdout_fraction, config.seed);
    let init = GateParams::learned_zero(generator.model().config().d_k);
    let outcome = train_gate(init.clone(), &train, config)?;
    let grad = grad_check(&outcome.params, &train, config)?;
    let eval_set = if test.is_empty() { &train } else { &test };
    let values = predict(&outcome.params, eval_set);
    let labels: Vec<f64> = eval_set.iter().map(|e| e.label).collect();
    Ok(TrainingReport {
        train_examples: train.len(),
        heldout_examples: test.len(),
        initial_loss: outcome.losses[0],
        final_loss: gate_loss(&outcome.params, &train, config)?,
        grad_check: grad,
        heldout_calibration: ece(&values, &labels, 10)?,
        class_separation: class_separation(&values, eval_set),
        model_checksum_before: before,
        model_checksum_after: generator.model().checksum(),
        params: outcome.params,
    })
}

pub fn save_gate(path: &Path, params: &GateParams) -> Result<()> {
    checkpoint::save(path, &gate_tensors(params))
}

pub fn gate_tensors(params: &GateParams) -> checkpoint::NamedTensors {
    vec![
        (
            "gate.w_alpha".to_string(),
            Matrix::from_vec(1, params.w_alpha.len(), params.w_alpha.clone()).expect("1×n"),
        ),
        ("gate.b_alpha".to_string(), Matrix::from_rows(&[vec![params.b_alpha]])),
    ]
}

pub fn load_gate(path: &Path) -> Result<GateParams> {
    let mut t = checkpoint::load(path)?;
    let w = checkpoint::take(&mut t, "gate.w_alpha")?;
    let b = checkpoint::take(&mut t, "gate.b_alpha")?;
    if w.rows() != 1 || b.shape() != (1, 1) {
        return Err(Error::Checkpoint("gate tensors have unexpected shapes".into()));
    }
    Ok(GateParams {
        w_alpha: w.data().to_vec(),
        b_alpha: b.get(0, 0),
        mode: GateMode::Learned,
        ..GateParams::heuristic()
    })
}
