//! Experiment driver: single runs with on-disk artifacts, evaluation from a
//! checkpoint, and seed grids with aggregated reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{few_shot_sample, load_corpus, DatasetManifest, LabeledCorpus, Sample, Shots, Split};
use crate::error::{Error, Result};
use crate::learner::{Learner, Method, PrototypeOptions};
use crate::metrics::{evaluate, pr_curve, roc_curve, MetricReport, ScoredSample, CSV_HEADER};
use crate::model::{EncoderConfig, RepLayer};
use crate::plot::{line_chart, score_histogram, Series};
use crate::prototypes::{PrototypeVariant, DEFAULT_SOFT_TOKENS};
use crate::scoring::{build_bank, check_disjoint, cosine_score, PROTOTYPE_SOURCE_PREFIX};
use crate::training::{train, EpochLog, TrainConfig};

/// Environment variable that replaces the seed list of every run.
pub const SEED_OVERRIDE_ENV: &str = "PROTO_OOD_SEED_OVERRIDE";

/// Fixed seed of the frozen backbone, shared by every run so that runs differ
/// only in what they train.
pub const DEFAULT_BACKBONE_SEED: u64 = 20240229;

/// Encoder sizes; the vocabulary size always comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSizes {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_seq_len: usize,
    pub rep_layer: RepLayer,
}

impl Default for EncoderSizes {
    fn default() -> Self {
        let d = EncoderConfig::desk(1);
        Self {
            embed_dim: d.embed_dim,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            mlp_ratio: d.mlp_ratio,
            lora_rank: d.lora_rank,
            lora_alpha: d.lora_alpha,
            max_seq_len: d.max_seq_len,
            rep_layer: d.rep_layer,
        }
    }
}

impl EncoderSizes {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            max_seq_len: self.max_seq_len,
            rep_layer: self.rep_layer,
        }
    }
}

/// Everything that defines one grid: the data, the axes of the grid, and the
/// shared hyper-parameters. A single run is a grid with one value per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub manifest: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub shots: Vec<Shots>,
    pub lambdas: Vec<f64>,
    pub variants: Vec<PrototypeVariant>,
    pub seeds: Vec<u64>,
    /// Soft tokens per prototype; `None` picks 0 for name-only and the
    /// default otherwise.
    pub soft_tokens: Option<usize>,
    pub shared_soft_tokens: bool,
    /// Adds the class prototypes to the validation bank when scoring.
    pub bank_include_prototypes: bool,
    pub backbone_seed: u64,
    pub encoder: EncoderSizes,
    /// Shared optimizer settings; `lambda`, `seed` and `method` are
    /// overwritten per cell.
    pub train: TrainConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            manifest: None,
            methods: vec![Method::SemanticMatching],
            shots: vec![Shots::Count(5)],
            lambdas: vec![TrainConfig::default().lambda],
            variants: vec![PrototypeVariant::ScenarioPromptPlusName],
            seeds: vec![1, 2, 3, 4, 5],
            soft_tokens: None,
            shared_soft_tokens: false,
            bank_include_prototypes: false,
            backbone_seed: DEFAULT_BACKBONE_SEED,
            encoder: EncoderSizes::default(),
            train: TrainConfig::default(),
        }
    }
}

/// One point of the grid, minus the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub shots: Shots,
    /// Only meaningful for semantic matching.
    pub lambda: f64,
    pub variant: PrototypeVariant,
}

impl Cell {
    /// Label used in the `method` column of reports and in run names.
    pub fn label(&self) -> String {
        match self.method {
            Method::SemanticMatching => {
                format!("{}/{}/lambda{}", self.method, self.variant, self.lambda)
            }
            Method::Discriminative => self.method.to_string(),
        }
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-{}shot-seed{seed}", self.label().replace('/', "-"), self.shots)
    }
}

impl RunSpec {
    /// Checks the spec and applies the seed override; fails before any compute.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_OVERRIDE_ENV) {
            self.seeds = parse_seed_list(&v)?;
        }
        if self.methods.is_empty() || self.shots.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("methods, shots and seeds must be non-empty".into()));
        }
        if self.lambdas.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("lambdas and variants must be non-empty".into()));
        }
        for &lambda in &self.lambdas {
            TrainConfig {
                lambda,
                ..self.train.clone()
            }
            .validate()?;
        }
        for &v in &self.variants {
            self.proto_options(v).map(|_| ())?;
        }
        self.encoder.config(1).validate()?;
        Ok(self)
    }

    pub fn proto_options(&self, variant: PrototypeVariant) -> Result<PrototypeOptions> {
        let m = self.soft_tokens.unwrap_or(if variant.uses_soft_tokens() {
            DEFAULT_SOFT_TOKENS
        } else {
            0
        });
        if variant.uses_soft_tokens() == (m == 0) {
            return Err(Error::Config(format!(
                "variant {variant} is incompatible with {m} soft tokens"
            )));
        }
        Ok(PrototypeOptions {
            variant,
            num_soft_tokens: m,
            shared_soft_tokens: self.shared_soft_tokens,
        })
    }

    /// Grid cells in report order. A discriminative cell ignores λ and the
    /// prototype variant, so it appears once per shot count.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &shots in &self.shots {
                match method {
                    Method::SemanticMatching => {
                        for &variant in &self.variants {
                            for &lambda in &self.lambdas {
                                out.push(Cell {
                                    method,
                                    shots,
                                    lambda,
                                    variant,
                                });
                            }
                        }
                    }
                    Method::Discriminative => out.push(Cell {
                        method,
                        shots,
                        lambda: 0.0,
                        variant: self.variants[0],
                    }),
                }
            }
        }
        out
    }

    pub fn train_config(&self, cell: &Cell, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: cell.lambda,
            seed,
            method: cell.method,
            ..self.train.clone()
        }
    }

    pub fn load_corpus(&self) -> Result<LabeledCorpus> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("no manifest given".into()))?;
        load_corpus(&DatasetManifest::load(path)?)
    }
}

pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {t:?}")))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config("empty seed list".into()))
            } else {
                Ok(v)
            }
        })
}

/// One line of `scores.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub is_id: bool,
    pub score: f64,
    pub predicted: Option<usize>,
    #[serde(rename = "true")]
    pub truth: Option<usize>,
}

impl ScoreRecord {
    pub fn scored(&self) -> ScoredSample {
        ScoredSample {
            score: self.score,
            is_id: self.is_id,
            predicted_class: self.predicted,
            true_class: self.truth,
        }
    }
}

/// Scores every test sample against a bank of the validation representations
/// and classifies the ID ones. `include_prototypes` also puts the class
/// prototypes in the bank; it has no effect for a linear head.
pub fn evaluate_learner(
    learner: &Learner,
    corpus: &LabeledCorpus,
    include_prototypes: bool,
) -> Result<(MetricReport, Vec<ScoreRecord>)> {
    let mut bank = build_bank(&learner.encoder, corpus.split(Split::Val))?;
    let test: Vec<&Sample> = corpus.split(Split::Test).collect();
    check_disjoint(&bank, test.iter().copied())?;
    let protos = learner.prototypes()?;
    if let (true, Some(p)) = (include_prototypes, &protos) {
        let ids = learner
            .class_names
            .iter()
            .map(|c| format!("{PROTOTYPE_SOURCE_PREFIX}{c}"))
            .collect();
        bank.extend(p, ids)?;
    }
    let mut records = Vec::with_capacity(test.len());
    for s in test {
        let z = learner.encoder.represent(&s.tokens)?;
        let predicted = match s.class_index {
            Some(_) => Some(learner.predict(&z, protos.as_ref())?),
            None => None,
        };
        records.push(ScoreRecord {
            id: s.id.clone(),
            is_id: s.is_id(),
            score: cosine_score(&z, &bank)?,
            predicted,
            truth: s.class_index,
        });
    }
    let scored: Vec<ScoredSample> = records.iter().map(ScoreRecord::scored).collect();
    Ok((evaluate(&scored)?, records))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: Cell,
    pub seed: u64,
    pub run_id: String,
    pub report: MetricReport,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub log: Vec<EpochLog>,
    /// Test accuracy of the final-epoch parameters, next to the selected ones.
    pub final_epoch_id_acc: f64,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Trains and evaluates one (cell, seed); writes artifacts under
/// `out/<run_id>/` when `out` is given.
pub fn run_one(
    spec: &RunSpec,
    corpus: &LabeledCorpus,
    cell: &Cell,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunResult> {
    let few = few_shot_sample(corpus, cell.shots, seed)?;
    let cfg = spec.train_config(cell, seed);
    let learner = Learner::init(
        &few,
        cell.method,
        &spec.proto_options(cell.variant)?,
        &spec.encoder.config(few.vocab.len()),
        spec.backbone_seed,
        seed,
    )?;
    let outcome = train(learner, &few, &cfg)?;
    let with_protos = spec.bank_include_prototypes;
    let (report, records) = evaluate_learner(&outcome.best, &few, with_protos)?;
    let final_epoch_id_acc = evaluate_learner(&outcome.last, &few, with_protos)?.0.id_acc;
    let run_id = cell.run_id(seed);
    if let Some(out) = out {
        let dir = out.join(&run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let resolved = json!({
            "run_id": run_id,
            "cell": cell,
            "seed": seed,
            "manifest": spec.manifest,
            "backbone_seed": spec.backbone_seed,
            "encoder": spec.encoder.config(few.vocab.len()),
            "prototypes": spec.proto_options(cell.variant)?,
            "bank_include_prototypes": with_protos,
            "train": cfg,
        });
        write(&dir.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
        outcome.best.save(
            &dir.join(format!("{run_id}.best.ckpt")),
            json!({
                "label": cell.label(),
                "shots": cell.shots,
                "seed": seed,
                "best_epoch": outcome.best_epoch,
                "bank_include_prototypes": with_protos,
            }),
        )?;
        let mut log = serde_json::to_string(&json!({ "config": cfg }))? + "\n";
        log.push_str(&jsonl(&outcome.log)?);
        write(&dir.join("train_log.jsonl"), log)?;
        write_eval_artifacts(&dir, &report, &records, &cell.shots.to_string(), &cell.label(), &seed.to_string())?;
    }
    Ok(RunResult {
        cell: cell.clone(),
        seed,
        run_id,
        report,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        initial_train_loss: outcome.initial_train_loss,
        final_train_loss: outcome.final_train_loss,
        log: outcome.log,
        final_epoch_id_acc,
    })
}

/// Writes `scores.jsonl`, `metrics.json`, `metrics.csv` and the ROC, PR and
/// histogram SVGs.
pub fn write_eval_artifacts(
    dir: &Path,
    report: &MetricReport,
    records: &[ScoreRecord],
    shot: &str,
    method: &str,
    seed: &str,
) -> Result<()> {
    write(&dir.join("scores.jsonl"), jsonl(records)?)?;
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    write(
        &dir.join("metrics.csv"),
        format!("{CSV_HEADER}\n{}\n", report.csv_row(shot, method, seed)),
    )?;
    let scored: Vec<ScoredSample> = records.iter().map(ScoreRecord::scored).collect();
    let roc = [Series {
        name: method,
        points: roc_curve(&scored)?,
    }];
    write(&dir.join("roc.svg"), line_chart("ROC", "FAR", "TPR", &roc, (0.0, 1.0), (0.0, 1.0)))?;
    let pr = [Series {
        name: method,
        points: pr_curve(&scored)?,
    }];
    write(&dir.join("pr.svg"), line_chart("Precision-recall", "recall", "precision", &pr, (0.0, 1.0), (0.0, 1.0)))?;
    let id: Vec<f64> = records.iter().filter(|r| r.is_id).map(|r| r.score).collect();
    let ood: Vec<f64> = records.iter().filter(|r| !r.is_id).map(|r| r.score).collect();
    write(&dir.join("scores_hist.svg"), score_histogram("Cosine scores", &id, &ood))
}

/// Re-evaluates a saved checkpoint. Shots, seed and the bank setting default
/// to the values stored in the checkpoint so the validation bank is rebuilt
/// exactly.
pub fn eval_checkpoint(
    ckpt: &Path,
    manifest: &Path,
    shots: Option<Shots>,
    seed: Option<u64>,
    include_prototypes: Option<bool>,
) -> Result<(MetricReport, Vec<ScoreRecord>, Shots, u64)> {
    let archive = crate::archive::Archive::load(ckpt)?;
    let learner = Learner::from_archive(&archive)?;
    let run = &archive.meta["run"];
    let shots = match shots {
        Some(s) => s,
        None => serde_json::from_value(run["shots"].clone())
            .map_err(|_| Error::Config("checkpoint has no shot count; pass --shots".into()))?,
    };
    let seed = match seed {
        Some(s) => s,
        None => run["seed"]
            .as_u64()
            .ok_or_else(|| Error::Config("checkpoint has no seed; pass --seed".into()))?,
    };
    let mut corpus = load_corpus(&DatasetManifest::load(manifest)?)?;
    if corpus.class_names() != learner.class_names.as_slice() {
        return Err(Error::Compatibility(
            "manifest ID classes differ from the checkpoint's".into(),
        ));
    }
    for s in &mut corpus.samples {
        s.tokens = learner.vocab.encode(&s.text);
    }
    let few = few_shot_sample(&corpus, shots, seed)?;
    let include = include_prototypes
        .unwrap_or_else(|| run["bank_include_prototypes"].as_bool().unwrap_or(false));
    let (report, records) = evaluate_learner(&learner, &few, include)?;
    Ok((report, records, shots, seed))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub shot: String,
    pub method: String,
    pub seed: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub run_id: String,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub means: Vec<ReportRow>,
    pub failures: Vec<CellFailure>,
    /// Seed-mean validation accuracy per epoch, per cell label.
    pub val_acc_curves: Vec<(String, Vec<f64>)>,
}

impl ExperimentReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(&self.means) {
            out.push_str(&r.report.csv_row(&r.shot, &r.method, &r.seed));
            out.push('\n');
        }
        out
    }
}

fn mean_report(rs: &[&MetricReport]) -> MetricReport {
    let n = rs.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
    MetricReport {
        id_acc: avg(|r| r.id_acc),
        auroc: avg(|r| r.auroc),
        far_at_95: avg(|r| r.far_at_95),
        aupr: avg(|r| r.aupr),
        n_id: rs.iter().map(|r| r.n_id).sum::<usize>() / rs.len(),
        n_ood: rs.iter().map(|r| r.n_ood).sum::<usize>() / rs.len(),
        threshold_at_95: avg(|r| r.threshold_at_95),
    }
}

/// Runs every (cell, seed) pair, `parallel` at a time, and aggregates.
/// Failed runs are recorded and skipped; the report covers completed runs.
pub fn run_grid(
    spec: &RunSpec,
    corpus: &LabeledCorpus,
    out: Option<&Path>,
    parallel: usize,
) -> Result<(ExperimentReport, Vec<RunResult>)> {
    let jobs: Vec<(Cell, u64)> = spec
        .cells()
        .into_iter()
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let mut results: Vec<Option<Result<RunResult>>> = (0..jobs.len()).map(|_| None).collect();
    let workers = parallel.max(1).min(jobs.len().max(1));
    if workers == 1 {
        for (i, (cell, seed)) in jobs.iter().enumerate() {
            results[i] = Some(run_one(spec, corpus, cell, *seed, out));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<RunResult>>>> =
            (0..jobs.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some((cell, seed)) = jobs.get(i) else { break };
                    let r = run_one(spec, corpus, cell, *seed, out);
                    *slots[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        for (i, s) in slots.into_iter().enumerate() {
            results[i] = s.into_inner().expect("result slot");
        }
    }

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for ((cell, seed), r) in jobs.iter().zip(results) {
        match r.expect("every job ran") {
            Ok(r) => done.push(r),
            Err(e) => {
                let run_id = cell.run_id(*seed);
                eprintln!("warning: run {run_id} failed: {e}");
                failures.push(CellFailure {
                    run_id,
                    error: e.to_string(),
                });
            }
        }
    }
    if done.is_empty() {
        return Err(Error::State("every run of the grid failed".into()));
    }

    let rows: Vec<ReportRow> = done
        .iter()
        .map(|r| ReportRow {
            shot: r.cell.shots.to_string(),
            method: r.cell.label(),
            seed: r.seed.to_string(),
            report: r.report.clone(),
        })
        .collect();
    let mut means = Vec::new();
    let mut curves = Vec::new();
    for cell in spec.cells() {
        let members: Vec<&RunResult> = done.iter().filter(|r| r.cell == cell).collect();
        if members.is_empty() {
            continue;
        }
        means.push(ReportRow {
            shot: cell.shots.to_string(),
            method: cell.label(),
            seed: "mean".into(),
            report: mean_report(&members.iter().map(|r| &r.report).collect::<Vec<_>>()),
        });
        let epochs = members[0].log.len();
        let curve: Vec<f64> = (0..epochs)
            .map(|e| members.iter().map(|r| r.log[e].val_acc).sum::<f64>() / members.len() as f64)
            .collect();
        curves.push((format!("{} {}shot", cell.label(), cell.shots), curve));
    }

    let spec_json = serde_json::to_string(spec)?;
    let provenance = json!({
        "config_hash": hex::encode(Sha256::digest(spec_json.as_bytes())),
        "code_version": env!("CARGO_PKG_VERSION"),
        "spec": spec,
    });
    let report = ExperimentReport {
        provenance,
        rows,
        means,
        failures,
        val_acc_curves: curves,
    };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write(&out.join("report.csv"), report.csv())?;
        write(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        let series: Vec<Series<'_>> = report
            .val_acc_curves
            .iter()
            .map(|(name, c)| Series {
                name,
                points: c.iter().enumerate().map(|(e, &a)| ((e + 1) as f64, a)).collect(),
            })
            .collect();
        let epochs = spec.train.epochs as f64;
        write(
            &out.join("val_acc.svg"),
            line_chart("Validation accuracy", "epoch", "accuracy", &series, (1.0, epochs.max(2.0)), (0.0, 1.0)),
        )?;
    }
    Ok((report, done))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_and_labels() {
        let spec = RunSpec {
            methods: vec![Method::SemanticMatching, Method::Discriminative],
            lambdas: vec![0.0, 0.2],
            ..RunSpec::default()
        };
        let cells = spec.cells();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0].label(), "semantic-matching/scenario/lambda0");
        assert_eq!(cells[1].run_id(3), "semantic-matching-scenario-lambda0.2-5shot-seed3");
        assert_eq!(cells[2].label(), "discriminative");
    }

    #[test]
    fn name_only_defaults_to_no_soft_tokens() {
        let spec = RunSpec::default();
        assert_eq!(spec.proto_options(PrototypeVariant::NameOnly).unwrap().num_soft_tokens, 0);
        assert_eq!(spec.proto_options(PrototypeVariant::RandomOnly).unwrap().num_soft_tokens, DEFAULT_SOFT_TOKENS);
        let forced = RunSpec {
            soft_tokens: Some(2),
            ..RunSpec::default()
        };
        assert!(forced.proto_options(PrototypeVariant::NameOnly).is_err());
    }

    #[test]
    fn seed_lists_parse() {
        assert_eq!(parse_seed_list("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seed_list("").is_err());
        assert!(parse_seed_list("x").is_err());
    }
}
