use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fga_core::bench::{self, AmplificationParams, BenchReport, CacheParams, Suite, UpdateParams};
use fga_core::eval::{self, read_queries, run_queries, summarize, EvalMode, EvalRecord};
use fga_core::gate_train::{self, gate_tensors, read_corpus, run_training, save_gate, TrainConfig};
use fga_core::generate::{AlphaMode, GenerationConfig, Generator};
use fga_core::kb::{read_kb_file, KbStore, StoreOptions};
use fga_core::linker::read_alias_file;
use fga_core::model::{ToyModel, ToyModelConfig};
use fga_core::{checkpoint, samples, Error, Result};

#[derive(Parser)]
#[command(name = "fga", version, about = "Fact-grounded generation over a local knowledge base")]
struct Cli {
    /// Fact store directory.
    #[arg(long, global = true, default_value = "fga-store")]
    store: PathBuf,

    /// Toy model configuration (JSON); the bundled default otherwise.
    #[arg(long, global = true)]
    model_config: Option<PathBuf>,

    /// Overrides every configured seed.
    #[arg(long, global = true, env = "FGA_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manage the fact store.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Generate an answer for a prompt.
    Generate(GenerateArgs),
    /// Evaluate a query dataset (JSON lines) across generation modes.
    Eval(EvalArgs),
    /// Re-judge saved evaluation records.
    Judge {
        records: PathBuf,
    },
    /// Run a benchmark suite.
    Bench {
        #[arg(value_enum)]
        suite: SuiteArg,
        /// Directory for CSV and gnuplot data files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the learned gate on a labeled corpus.
    TrainGate {
        dataset: PathBuf,
        config: PathBuf,
        /// Checkpoint path for the trained gate.
        #[arg(long, default_value = "gate.fgat")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Import facts from a JSON-lines file.
    Import {
        #[arg(required_unless_present = "bundled")]
        file: Option<PathBuf>,
        /// Alias file (JSON lines) installed into the store.
        #[arg(long)]
        aliases: Option<PathBuf>,
        /// Import the bundled sample KB and aliases.
        #[arg(long, conflicts_with_all = ["file", "aliases"])]
        bundled: bool,
    },
    /// Print one fact.
    Get { entity: String, attribute: String },
    /// Replace a fact's value.
    Update {
        entity: String,
        attribute: String,
        value: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaModeArg {
    Heuristic,
    Learned,
    Always,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Amplification,
    Update,
    Overhead,
    Cache,
    Calibration,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Fga,
    FgaNoConstraints,
    FgaAlways,
    FgaLearned,
}

#[derive(Args)]
struct GenerateArgs {
    prompt: String,
    /// Ungrounded baseline generation.
    #[arg(long)]
    no_fga: bool,
    /// Disable hard vocabulary constraints.
    #[arg(long)]
    no_constraints: bool,
    /// Print one line per decoding step.
    #[arg(long)]
    trace: bool,
    #[arg(long, value_enum, default_value = "heuristic")]
    alpha_mode: AlphaModeArg,
    /// Trained gate checkpoint, required by `--alpha-mode learned`.
    #[arg(long)]
    gate: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct EvalArgs {
    dataset: PathBuf,
    /// Modes to run; defaults to every mode available.
    #[arg(long = "mode", value_enum)]
    modes: Vec<ModeArg>,
    /// Baseline mode only.
    #[arg(long, conflicts_with = "modes")]
    no_fga: bool,
    /// Trained gate checkpoint; adds the learned-gate mode.
    #[arg(long)]
    gate: Option<PathBuf>,
    /// Also evaluate against a copy of the store keeping this fraction of facts.
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Directory for records and the per-cell table.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}

struct Context {
    store: PathBuf,
    model_config: ToyModelConfig,
    seed: u64,
    /// Seed given on the command line or through `FGA_SEED`.
    seed_override: Option<u64>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut model_config = match &cli.model_config {
            Some(p) => ToyModelConfig::from_json(&read_input(p)?)?,
            None => samples::model_config()?,
        };
        if let Some(s) = cli.seed {
            model_config.seed = s;
        }
        Ok(Self {
            store: cli.store.clone(),
            seed: model_config.seed,
            seed_override: cli.seed,
            model_config,
        })
    }

    fn open_store(&self) -> Result<Arc<KbStore>> {
        let mut opts = StoreOptions::new(&self.store);
        opts.embedding_dim = self.model_config.d;
        opts.seed = self.seed;
        Ok(Arc::new(KbStore::open(opts)?))
    }

    fn generator(&self) -> Result<Generator> {
        let kb = self.open_store()?;
        if kb.is_empty() {
            return Err(Error::Input(format!(
                "store {} is empty; run `fga kb import` first",
                self.store.display()
            )));
        }
        Generator::open(ToyModel::new(self.model_config.clone())?, kb)
    }

    fn config_hash(&self) -> String {
        bench::config_hash(&self.model_config)
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("no such file: {}", path.display())))
    }
}

fn run(cli: Cli) -> CmdResult {
    let ctx = Context::new(&cli)?;
    match cli.command {
        Command::Kb(cmd) => cmd_kb(&ctx, cmd),
        Command::Generate(args) => cmd_generate(&ctx, args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Judge { records } => cmd_judge(&records),
        Command::Bench { suite, out } => cmd_bench(&ctx, suite, out.as_deref()),
        Command::TrainGate { dataset, config, out } => cmd_train_gate(&ctx, &dataset, &config, &out),
    }
}

fn cmd_kb(ctx: &Context, cmd: KbCommand) -> CmdResult {
    match cmd {
        KbCommand::Import { file, aliases, bundled } => {
            let (records, alias_text) = if bundled {
                (samples::facts()?, Some(samples::ALIASES_JSONL.to_string()))
            } else {
                let file = file.ok_or_else(|| Failure::Usage("missing FILE".into()))?;
                require_file(&file)?;
                let records = read_kb_file(&file)?;
                let alias_text = match aliases {
                    Some(p) => {
                        require_file(&p)?;
                        read_alias_file(&p)?;
                        Some(read_input(&p)?)
                    }
                    None => None,
                };
                (records, alias_text)
            };
            let kb = ctx.open_store()?;
            let n = kb.import_records(records)?;
            if let Some(text) = alias_text {
                fs::write(kb.alias_path(), text).map_err(Error::from)?;
            }
            println!("{n} records");
        }
        KbCommand::Get { entity, attribute } => {
            let fact = ctx.open_store()?.get_fact(&entity, &attribute)?;
            match &fact.unit {
                Some(u) if !fact.value.ends_with(u.as_str()) => println!("{} {u}", fact.value),
                _ => println!("{}", fact.value),
            }
        }
        KbCommand::Update { entity, attribute, value } => {
            let out = ctx.open_store()?.update_fact(&entity, &attribute, &value)?;
            let verb = if out.inserted { "inserted" } else { "updated" };
            println!(
                "{verb} {entity} {attribute} in {:.3} ms",
                out.latency.as_secs_f64() * 1e3
            );
        }
    }
    Ok(())
}

fn load_gate_for(ctx: &Context, path: &Path) -> Result<fga_core::attention::GateParams> {
    require_file(path)?;
    let gate = gate_train::load_gate(path)?;
    let expected = ctx.model_config.d_k + fga_core::attention::GateFeatures::LEN;
    if gate.w_alpha.len() != expected {
        return Err(Error::Input(format!(
            "gate expects {} inputs, model provides {expected}",
            gate.w_alpha.len()
        )));
    }
    Ok(gate)
}

fn cmd_generate(ctx: &Context, args: GenerateArgs) -> CmdResult {
    let alpha_mode = match args.alpha_mode {
        AlphaModeArg::Heuristic => AlphaMode::Heuristic,
        AlphaModeArg::Learned => AlphaMode::Learned,
        AlphaModeArg::Always => AlphaMode::Always,
    };
    if alpha_mode == AlphaMode::Learned && args.gate.is_none() && !args.no_fga {
        return Err(Failure::Usage("--alpha-mode learned requires --gate".into()));
    }
    let gate = args.gate.as_deref().map(|p| load_gate_for(ctx, p)).transpose()?;
    let mut config = if args.no_fga {
        GenerationConfig::baseline()
    } else {
        GenerationConfig::default()
    };
    config.constraints.enabled = !args.no_constraints;
    config.alpha_mode = alpha_mode;
    config.gate = gate;
    config.max_new_tokens = args.max_new_tokens;
    let generator = ctx.generator()?;
    let out = generator.generate(&args.prompt, &config)?;
    println!("{}", out.text);
    if args.trace {
        match &out.resolved {
            Some(f) => println!("queried fact {}/{}", f.entity_id, f.attribute),
            None => println!("queried fact -"),
        }
        let s = &out.scope;
        let linked: Vec<&str> = out.spans.iter().map(|s| s.entity_id.as_str()).collect();
        println!("linked entities [{}]", linked.join(", "));
        println!(
            "scope gate={} entity={} kb={} surface={}",
            s.gate_ok, s.entity_ok, s.kb_covered, s.surface_covered
        );
        for step in &out.trace {
            let alpha = step.alpha.map_or("-".to_string(), |a| format!("{a:.3}"));
            let tier = step.cache_tier.map_or("-".to_string(), |t| t.to_string());
            let fact = step
                .grounded_fact
                .as_ref()
                .map_or("-".to_string(), |f| format!("{}/{}", f.entity_id, f.attribute));
            println!(
                "step {} token {:?} alpha={alpha} constrained={} tier={tier} fact={fact}",
                step.step, step.text, step.constraint_active
            );
        }
    }
    Ok(())
}

fn eval_mode(m: ModeArg) -> EvalMode {
    match m {
        ModeArg::Baseline => EvalMode::Baseline,
        ModeArg::Fga => EvalMode::Fga,
        ModeArg::FgaNoConstraints => EvalMode::FgaNoConstraints,
        ModeArg::FgaAlways => EvalMode::FgaAlways,
        ModeArg::FgaLearned => EvalMode::FgaLearned,
    }
}

#[derive(Serialize)]
struct EvalMeta<'a> {
    seed: u64,
    config_hash: String,
    dataset: &'a Path,
    modes: Vec<&'static str>,
}

fn cmd_eval(ctx: &Context, args: EvalArgs) -> CmdResult {
    require_file(&args.dataset)?;
    let queries = read_queries(&args.dataset)?;
    if queries.is_empty() {
        return Err(Error::Input(format!("{} holds no queries", args.dataset.display())).into());
    }
    let gate = args.gate.as_deref().map(|p| load_gate_for(ctx, p)).transpose()?;
    let modes: Vec<EvalMode> = if args.no_fga {
        vec![EvalMode::Baseline]
    } else if !args.modes.is_empty() {
        args.modes.iter().copied().map(eval_mode).collect()
    } else {
        let mut m = vec![EvalMode::Baseline, EvalMode::Fga, EvalMode::FgaNoConstraints, EvalMode::FgaAlways];
        if gate.is_some() {
            m.push(EvalMode::FgaLearned);
        }
        m
    };
    if modes.contains(&EvalMode::FgaLearned) && gate.is_none() {
        return Err(Failure::Usage("mode fga-learned requires --gate".into()));
    }
    let generator = ctx.generator()?;
    let records = run_queries(&generator, &queries, &modes, gate.as_ref())?;
    let report = summarize(&records);
    println!("seed={} config_hash={}", ctx.seed, ctx.config_hash());
    print!("{}", report.to_text());

    if let Some(fraction) = args.keep_fraction {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Failure::Usage("--keep-fraction must lie in [0, 1]".into()));
        }
        let scratch = tempfile::tempdir().map_err(Error::from)?;
        let kb = generator.kb();
        let aliases = match kb.alias_path() {
            p if p.exists() => read_alias_file(&p)?,
            _ => Vec::new(),
        };
        let ab = eval::coverage_ablation(
            generator.model(),
            &kb.all_facts(),
            &aliases,
            &queries,
            fraction,
            ctx.seed,
            scratch.path(),
        )?;
        println!(
            "coverage ablation: kept {}/{} facts, query coverage {:.1}%, constrained accuracy {:.1}% (full store {:.1}%)",
            ab.kept_facts,
            ab.total_facts,
            ab.query_coverage * 100.0,
            ab.accuracy * 100.0,
            ab.full_accuracy * 100.0
        );
    }

    if let Some(dir) = args.out {
        fs::create_dir_all(&dir).map_err(Error::from)?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
            lines.push('\n');
        }
        let meta = EvalMeta {
            seed: ctx.seed,
            config_hash: ctx.config_hash(),
            dataset: &args.dataset,
            modes: modes.iter().map(|m| m.name()).collect(),
        };
        let header = format!("# seed={} config_hash={}\n", meta.seed, meta.config_hash);
        fs::write(dir.join("eval_records.jsonl"), lines).map_err(Error::from)?;
        fs::write(dir.join("eval_cells.csv"), header + &report.to_csv()).map_err(Error::from)?;
        fs::write(
            dir.join("eval_meta.json"),
            serde_json::to_string_pretty(&meta).map_err(|e| Error::Input(e.to_string()))?,
        )
        .map_err(Error::from)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_judge(path: &Path) -> CmdResult {
    require_file(path)?;
    let text = read_input(path)?;
    let mut records: Vec<EvalRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if records.is_empty() {
        return Err(Error::Input(format!("{} holds no records", path.display())).into());
    }
    print!("{}", summarize(&records).to_text());
    Ok(())
}

fn cmd_bench(ctx: &Context, suite: SuiteArg, out: Option<&Path>) -> CmdResult {
    let scratch = tempfile::tempdir().map_err(Error::from)?;
    let report: BenchReport = match suite {
        SuiteArg::Amplification => bench::amplification(AmplificationParams::default(), ctx.seed)?,
        SuiteArg::Update => {
            let kb = ctx.open_store()?;
            let facts = if kb.is_empty() { samples::facts()? } else { kb.all_facts() };
            let params = UpdateParams {
                embedding_dim: ctx.model_config.d,
                ..Default::default()
            };
            bench::update(&facts, &params, ctx.seed, scratch.path())?
        }
        SuiteArg::Overhead => bench::overhead(&ctx.generator()?, &samples::queries()?, ctx.seed)?,
        SuiteArg::Cache => {
            let params = CacheParams {
                embedding_dim: ctx.model_config.d,
                ..Default::default()
            };
            bench::cache(params, ctx.seed, scratch.path())?
        }
        SuiteArg::Calibration => {
            let mut config = samples::train_config()?;
            config.seed = ctx.seed;
            bench::calibration(&ctx.generator()?, &samples::gate_corpus()?, &config)?
        }
    };
    debug_assert!(Suite::ALL.contains(&report.suite));
    print!("{}", report.to_text());
    if let Some(dir) = out {
        for p in report.write(dir)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_train_gate(ctx: &Context, dataset: &Path, config_path: &Path, out: &Path) -> CmdResult {
    require_file(dataset)?;
    let corpus = read_corpus(dataset)?;
    let mut config = TrainConfig::from_json(&read_input(config_path)?)?;
    if let Some(s) = ctx.seed_override {
        config.seed = s;
    }
    let generator = ctx.generator()?;
    let report = run_training(&generator, &corpus, &config)?;
    save_gate(out, &report.params)?;
    println!("train examples {}, held-out {}", report.train_examples, report.heldout_examples);
    println!("loss {:.6} -> {:.6}", report.initial_loss, report.final_loss.total);
    println!("grad check max relative error {:.3e}", report.grad_check.max_relative_error);
    println!("held-out ECE {:.4}", report.heldout_calibration.ece);
    println!("class separation {:.4}", report.class_separation);
    println!(
        "checkpoint {} sha256 {}",
        out.display(),
        checkpoint::digest(&gate_tensors(&report.params))
    );
    Ok(())
}
