use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use protomatch::archive::Archive;
use protomatch::data::{synth_corpus, Shots, SynthConfig};
use protomatch::experiment::{eval_checkpoint, run_grid, run_one, write_eval_artifacts, RunSpec};
use protomatch::gradcheck::run_suite;
use protomatch::learner::Method;
use protomatch::metrics::CSV_HEADER;
use protomatch::model::RepLayer;
use protomatch::prototypes::PrototypeVariant;
use protomatch::training::TrainConfig;
use protomatch::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "protomatch", version, about = "Few-shot intent classification with class prototypes and cosine OOD scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest plus JSONL splits).
    Synth(SynthArgs),
    /// Train and evaluate one (method, shots, seed) run.
    Train(RunArgs),
    /// Re-evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a grid over several seeds.
    Grid(GridArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    k_id: usize,
    #[arg(long, default_value_t = 8)]
    k_ood: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Defaults to 4 words per class pool plus a shared pool of the same size.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// lr 1e-4, τ 0.01.
    Standard,
    /// lr 1e-3, τ 0.1, tuned for the tiny random-backbone encoder.
    Desk,
}

/// Settings shared by `train` and `grid`. Precedence: flags, then the preset
/// (which replaces the whole training section), then the config file.
#[derive(Args)]
struct CommonArgs {
    /// JSON run spec; missing fields take default values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    soft_tokens: Option<usize>,
    #[arg(long)]
    shared_soft_tokens: bool,
    /// Add the class prototypes to the validation bank when scoring.
    #[arg(long)]
    bank_include_prototypes: bool,
    #[arg(long)]
    rep_layer: Option<RepLayer>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    shots: Option<Shots>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    variant: Option<PrototypeVariant>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    shots: Vec<Shots>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long = "lambda", value_delimiter = ',', allow_negative_numbers = true)]
    lambdas: Vec<f64>,
    #[arg(long = "variant", value_delimiter = ',')]
    variants: Vec<PrototypeVariant>,
    /// Number of runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the value stored in the checkpoint.
    #[arg(long)]
    shots: Option<Shots>,
    /// Defaults to the value stored in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the score dump, metrics and plots.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the bank setting recorded in the checkpoint.
    #[arg(long)]
    bank_include_prototypes: Option<bool>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
        ErrorKind::Io => 5,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Grid(a) => grid(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig::new(a.k_id, a.k_ood, a.per_class, a.overlap, a.seed);
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    let corpus = synth_corpus(&cfg)?;
    corpus.write(&a.out)?;
    println!(
        "wrote {} train, {} val, {} test rows to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Defaults, overlaid by the config file, then the preset, then flags.
fn base_spec(c: &CommonArgs) -> Result<RunSpec> {
    let mut spec = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<RunSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunSpec::default(),
    };
    match c.preset {
        Some(Preset::Desk) => spec.train = TrainConfig::desk(),
        Some(Preset::Standard) => spec.train = TrainConfig::default(),
        None => {}
    }
    if let Some(m) = &c.manifest {
        spec.manifest = Some(m.clone());
    }
    let t = &mut spec.train;
    t.tau = c.tau.unwrap_or(t.tau);
    t.lr = c.lr.unwrap_or(t.lr);
    t.epochs = c.epochs.unwrap_or(t.epochs);
    t.batch_size = c.batch_size.unwrap_or(t.batch_size);
    if c.soft_tokens.is_some() {
        spec.soft_tokens = c.soft_tokens;
    }
    spec.shared_soft_tokens |= c.shared_soft_tokens;
    spec.bank_include_prototypes |= c.bank_include_prototypes;
    let e = &mut spec.encoder;
    e.rep_layer = c.rep_layer.unwrap_or(e.rep_layer);
    e.lora_rank = c.lora_rank.unwrap_or(e.lora_rank);
    e.lora_alpha = c.lora_alpha.unwrap_or(e.lora_alpha);
    spec.backbone_seed = c.backbone_seed.unwrap_or(spec.backbone_seed);
    Ok(spec)
}

fn replace<T>(target: &mut Vec<T>, values: Vec<T>) {
    if !values.is_empty() {
        *target = values;
    }
}

fn single<T: Clone>(what: &str, values: &[T]) -> Result<T> {
    match values {
        [v] => Ok(v.clone()),
        _ => Err(Error::Config(format!(
            "train takes exactly one {what}; use grid for several"
        ))),
    }
}

fn train(a: RunArgs) -> Result<ExitCode> {
    let mut spec = base_spec(&a.common)?;
    replace(&mut spec.methods, a.method.into_iter().collect());
    replace(&mut spec.shots, a.shots.into_iter().collect());
    spec.seeds = vec![a.seed.or(spec.seeds.first().copied()).unwrap_or(1)];
    replace(&mut spec.lambdas, a.lambda.into_iter().collect());
    replace(&mut spec.variants, a.variant.into_iter().collect());
    let spec = spec.resolve()?;
    let cells = spec.cells();
    let cell = single("cell", &cells)?;
    let seed = single("seed", &spec.seeds)?;
    let corpus = spec.load_corpus()?;
    let r = run_one(&spec, &corpus, &cell, seed, Some(&a.common.out))?;
    println!("{CSV_HEADER}");
    println!("{}", r.report.csv_row(&cell.shots.to_string(), &cell.label(), &seed.to_string()));
    println!("run directory: {}", a.common.out.join(&r.run_id).display());
    Ok(ExitCode::SUCCESS)
}

fn grid(a: GridArgs) -> Result<ExitCode> {
    let mut spec = base_spec(&a.common)?;
    replace(&mut spec.methods, a.methods);
    replace(&mut spec.shots, a.shots);
    replace(&mut spec.seeds, a.seeds);
    replace(&mut spec.lambdas, a.lambdas);
    replace(&mut spec.variants, a.variants);
    let spec = spec.resolve()?;
    let corpus = spec.load_corpus()?;
    let (report, _) = run_grid(&spec, &corpus, Some(&a.common.out), a.parallel)?;
    print!("{}", report.csv());
    if !report.failures.is_empty() {
        eprintln!("{} run(s) failed; see report.json", report.failures.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (report, records, shots, seed) = eval_checkpoint(&a.checkpoint, &a.manifest, a.shots, a.seed, a.bank_include_prototypes)?;
    let method = method_label(&a.checkpoint)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        write_eval_artifacts(out, &report, &records, &shots.to_string(), &method, &seed.to_string())?;
    }
    println!("{}", serde_json::to_string_pretty(&json!(report))?);
    println!("{CSV_HEADER}");
    println!("{}", report.csv_row(&shots.to_string(), &method, &seed.to_string()));
    Ok(ExitCode::SUCCESS)
}

/// Method label for the CSV row, as recorded when the checkpoint was saved.
fn method_label(ckpt: &Path) -> Result<String> {
    let archive = Archive::load(ckpt)?;
    Ok(archive.meta["run"]["label"]
        .as_str()
        .map(str::to_string)
        .unwrap_or_else(|| archive.config["method"].as_str().unwrap_or("unknown").to_string()))
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let outcomes = run_suite(a.instances, a.seed)?;
    let mut ok = true;
    for o in &outcomes {
        println!(
            "{:<22} {} instances  worst rel {:.2e}  worst abs {:.2e}  {}",
            o.case,
            o.instances,
            o.worst_rel_err,
            o.worst_abs_err,
            if o.passed { "ok" } else { "FAILED" }
        );
        ok &= o.passed;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
