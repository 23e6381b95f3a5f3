//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;

use fga_core::attention::{attention, fga_attention};
use fga_core::bench::{self, CacheParams, UpdateParams};
use fga_core::eval::{build_store, coverage_ablation, judge, run_queries, EvalMode};
use fga_core::gate_train::run_training;
use fga_core::generate::{GenerationConfig, Generator};
use fga_core::linalg::{Matrix, SeededRng};
use fga_core::linker::{chunked_recognize, Gazetteer, RecognizerConfig};
use fga_core::model::{AlphaSpec, Grounding, ToyModel};
use fga_core::samples;
use fga_core::text::tokenize;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn generator(dir: &Path) -> Generator {
    let model = ToyModel::new(samples::model_config().unwrap()).unwrap();
    let kb = build_store(dir, samples::facts().unwrap(), model.config().d, 42).unwrap();
    Generator::new(model, kb, samples::aliases().unwrap()).unwrap()
}

fn odds_ratio() -> Outcome {
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let l = 2 + rng.below(15);
        let d_k = 1 + rng.below(16);
        let q = rng.gaussian_matrix(l, d_k, 1.5);
        let k = rng.gaussian_matrix(l, d_k, 1.5);
        let v = rng.gaussian_matrix(l, d_k, 1.0);
        let g = rng.uniform_matrix(l, l, -3.0, 7.0);
        let alpha: Vec<f64> = (0..l).map(|_| rng.uniform()).collect();
        let t = 1 + rng.below(l - 1);
        let i = rng.below(t + 1);
        let j = (i + 1 + rng.below(t)) % (t + 1);
        let fga = fga_attention(&q, &k, &v, &g, &alpha).unwrap();
        let base = attention(&q, &k, &v).unwrap();
        let (f, b) = (fga.weights.row(t), base.weights.row(t));
        let measured = (f[i] / f[j]) / (b[i] / b[j]);
        let expected = (alpha[t] * (g.get(t, i) - g.get(t, j))).exp();
        worst = worst.max((measured - expected).abs() / expected);
    }
    let (q, k, v, g) = bench::amplification_instance(&mut rng, 8, 16, 0, 5.0);
    let reference = bench::measured_odds_ratio(&q, &k, &v, &g, 0.8, 0, 1).unwrap();
    let ok = worst <= 1e-9 && (reference - 4f64.exp()).abs() <= 1e-6 && format!("{reference:.3}") == "54.598";
    outcome(
        ok,
        format!("max rel err {worst:.3e} over 1000 instances; ratio(0.8,5) = {reference:.9}"),
    )
}

fn gate_off_identity() -> Outcome {
    let model = ToyModel::new(samples::model_config().unwrap()).unwrap();
    let d = model.config().d;
    let mut rng = SeededRng::new(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = 1 + rng.below(24);
        let ids: Vec<u32> = (0..l).map(|_| 3 + rng.below(500) as u32).collect();
        let base = model.forward(&ids, None).unwrap();
        let m = 1 + rng.below(3);
        let mut assignment = Matrix::zeros(m, l);
        for e in 0..m {
            assignment.set(e, rng.below(l), 1.0);
        }
        let zero_alpha = Grounding {
            fact_embeddings: rng.gaussian_matrix(m, d, 1.0),
            assignment: assignment.clone(),
            alpha: AlphaSpec::Fixed(vec![0.0; l]),
        };
        let zero_g = Grounding {
            fact_embeddings: Matrix::zeros(m, d),
            assignment,
            alpha: AlphaSpec::Fixed(vec![1.0; l]),
        };
        for g in [&zero_alpha, &zero_g] {
            let out = model.forward(&ids, Some(g)).unwrap();
            for (a, b) in out.data().iter().zip(base.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |logit diff| {worst:.3e} over 100 prompts x 2 gate-off modes"))
}

fn convergence() -> Outcome {
    let mut rng = SeededRng::new(11);
    let mut ok = true;
    let mut last_mass = Vec::new();
    for _ in 0..20 {
        let l = 12;
        let q = rng.gaussian_matrix(l, 16, 1.0);
        let k = rng.gaussian_matrix(l, 16, 1.0);
        let v = rng.gaussian_matrix(l, 16, 1.0);
        let entity_cols = [2usize, 3, 7];
        let mut base_g = Matrix::zeros(l, l);
        for t in 0..l {
            for &c in &entity_cols {
                base_g.set(t, c, rng.range(0.5, 1.5));
            }
        }
        let alpha = vec![1.0; l];
        let mut prev = vec![0.0; l];
        for p in 0..=6 {
            let c = f64::from(1u32 << p);
            let w = fga_attention(&q, &k, &v, &base_g.scale(c), &alpha).unwrap().weights;
            for (t, p) in prev.iter_mut().enumerate().skip(entity_cols[0]) {
                let mass: f64 = entity_cols.iter().filter(|&&e| e <= t).map(|&e| w.get(t, e)).sum();
                if mass < *p - 1e-15 {
                    ok = false;
                }
                *p = mass;
            }
        }
        let min_final = prev[entity_cols[0]..].iter().cloned().fold(f64::INFINITY, f64::min);
        last_mass.push(min_final);
        ok &= min_final >= 0.999;
    }
    let min = last_mass.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(ok, format!("monotone over c = 1..64; min entity mass at c = 64: {min:.6}"))
}

fn guarantee_scope(generator: &Generator) -> Outcome {
    let queries = samples::queries().unwrap();
    let records = run_queries(generator, &queries, &[EvalMode::Fga], None).unwrap();
    let scoped: Vec<_> = records.iter().filter(|r| r.in_scope).collect();
    let correct = scoped.iter().filter(|r| r.correct && r.answer_is_path).count();
    outcome(
        !scoped.is_empty() && correct == scoped.len(),
        format!("{correct}/{} guarantee-scope queries correct ({} queries total)", scoped.len(), queries.len()),
    )
}

fn instant_update(dir: &Path) -> Outcome {
    let mut g = generator(&dir.join("update"));
    let prompt = "What is the battery capacity of the iPhone 15 Pro?";
    let config = GenerationConfig::default();
    let before = g.generate(prompt, &config).unwrap().text;
    let up = g.update_fact("phone:iphone_15_pro", "battery_capacity", "3500 mAh").unwrap();
    let after = g.generate(prompt, &config).unwrap().text;
    let latency_ms = up.latency.as_secs_f64() * 1e3;
    let report = bench::update(&samples::facts().unwrap(), &UpdateParams::default(), 42, &dir.join("k")).unwrap();
    let r2 = report.get("fit_r2").unwrap();
    let ok = judge(&before, "3274 mAh") && judge(&after, "3500 mAh") && !judge(&after, "3274 mAh") && latency_ms < 50.0 && r2 > 0.9;
    outcome(
        ok,
        format!("'{before}' -> '{after}'; update latency {latency_ms:.3} ms; k-update fit R^2 {r2:.4}"),
    )
}

fn chunked_recognition() -> Outcome {
    let facts = samples::facts().unwrap();
    let ids: Vec<String> = facts.iter().map(|f| f.entity_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let gaz = Gazetteer::build(&ids, &samples::aliases().unwrap());
    let aliases: Vec<Vec<String>> = gaz.aliases().map(|(a, _)| tokenize(&a)).collect();
    let filler = ["the", "and", "of", "what", "is", "battery", "pro", "15", "max", "model", "with", "a", "tesla", "iphone"];
    let config = RecognizerConfig::default();
    let mut rng = SeededRng::new(5);
    let mut mismatches = 0;
    let mut over_budget = 0;
    let mut total_spans = 0;
    for _ in 0..500 {
        let target = 1 + rng.below(80);
        let mut tokens = Vec::new();
        while tokens.len() < target {
            if rng.uniform() < 0.3 {
                tokens.extend(aliases[rng.below(aliases.len())].iter().cloned());
            } else {
                tokens.push(filler[rng.below(filler.len())].to_string());
            }
        }
        let chunked = chunked_recognize(&gaz, &tokens, config);
        let whole = gaz.recognize(&tokens);
        total_spans += whole.len();
        let a: BTreeSet<_> = chunked.spans.iter().cloned().collect();
        let b: BTreeSet<_> = whole.into_iter().collect();
        mismatches += usize::from(a != b);
        over_budget += usize::from(chunked.invocations > tokens.len().div_ceil(config.stride));
    }
    outcome(
        mismatches == 0 && over_budget == 0,
        format!("500 sentences, {total_spans} spans: {mismatches} set mismatches, {over_budget} over ceil(L/16) invocations"),
    )
}

/// Two-tier LRU modeled as a reuse-distance process: a lookup hits memory
/// iff fewer than `capacity` distinct entities were touched since the
/// entity's previous lookup.
fn reuse_distance_hit_rate(trace: &[usize], capacity: usize) -> f64 {
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_time: BTreeSet<usize> = BTreeSet::new();
    let mut hits = 0usize;
    for (t, &e) in trace.iter().enumerate() {
        if let Some(prev) = last.insert(e, t) {
            let distinct_since = by_time.range(prev + 1..).count();
            if distinct_since < capacity {
                hits += 1;
            }
            by_time.remove(&prev);
        }
        by_time.insert(t);
    }
    hits as f64 / trace.len() as f64
}

fn cache_behavior(dir: &Path) -> Outcome {
    let params = CacheParams::default();
    let report = bench::cache(params, 42, &dir.join("cache")).unwrap();
    let measured = report.get("hit_rate").unwrap();
    let oracle = reuse_distance_hit_rate(&bench::zipf_trace(&params, 42), params.hot + params.warm);
    let gap = (measured - oracle).abs();
    outcome(
        measured >= 0.95 && gap <= 0.01,
        format!(
            "hit rate {:.2}% (floor 95%: {}); oracle {:.2}%, gap {:.3} pp (within 1 pp: {})",
            measured * 100.0,
            if measured >= 0.95 { "met" } else { "missed" },
            oracle * 100.0,
            gap * 100.0,
            if gap <= 0.01 { "yes" } else { "no" }
        ),
    )
}

fn gate_training(generator: &Generator) -> Outcome {
    let r = run_training(generator, &samples::gate_corpus().unwrap(), &samples::train_config().unwrap()).unwrap();
    let gc = r.grad_check.max_relative_error;
    let ece = r.heldout_calibration.ece;
    let sep = r.class_separation;
    outcome(
        gc < 1e-4 && ece <= 0.1 && sep >= 0.4,
        format!("grad check {gc:.2e}; held-out ECE {ece:.4}; class separation {sep:.4}"),
    )
}

fn coverage(generator: &Generator, dir: &Path) -> Outcome {
    let r = coverage_ablation(
        generator.model(),
        &samples::facts().unwrap(),
        &samples::aliases().unwrap(),
        &samples::queries().unwrap(),
        0.5,
        7,
        &dir.join("ablation"),
    )
    .unwrap();
    let gap = (r.accuracy - r.query_coverage).abs();
    outcome(
        gap <= 0.05,
        format!(
            "kept {}/{} facts; accuracy {:.1}% vs coverage {:.1}% (full store {:.1}%)",
            r.kept_facts,
            r.total_facts,
            r.accuracy * 100.0,
            r.query_coverage * 100.0,
            r.full_accuracy * 100.0
        ),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let g = generator(&dir.path().join("kb"));
    let criteria: Vec<Criterion> = vec![
        ("odds ratio", Box::new(odds_ratio)),
        ("gate-off identity", Box::new(gate_off_identity)),
        ("grounding convergence", Box::new(convergence)),
        ("guarantee-scope accuracy", Box::new(|| guarantee_scope(&g))),
        ("instant update", Box::new(|| instant_update(dir.path()))),
        ("chunked recognition", Box::new(chunked_recognition)),
        ("cache hit rate", Box::new(|| cache_behavior(dir.path()))),
        ("gate training", Box::new(|| gate_training(&g))),
        ("coverage ablation", Box::new(|| coverage(&g, dir.path()))),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.pass);
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, n + 1, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
