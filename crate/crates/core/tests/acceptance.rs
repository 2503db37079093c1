//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-3, 7 and 9 are exact checks; a failure there exits non-zero.
//! Criteria 4, 5, 6 and 8 are directional measurements on synthetic data and
//! are reported without failing the process unless `ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use protomatch::data::{synth_corpus, LabeledCorpus, Shots, SynthConfig};
use protomatch::experiment::{run_grid, run_one, Cell, RunResult, RunSpec};
use protomatch::gradcheck::run_suite;
use protomatch::learner::Method;
use protomatch::losses::{discriminative_loss, diversity_loss, joint_loss, match_loss};
use protomatch::metrics::{aupr, auroc, far_at_tpr, id_accuracy};
use protomatch::numerics::{Tape, Tensor};
use protomatch::prototypes::PrototypeVariant;
use protomatch::scoring::classify;
use protomatch::training::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_INSTANCES: usize = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const LOSS_TOL: f64 = 1e-9;
const METRIC_SETS: usize = 1000;
const METRIC_MAX_LEN: usize = 50;
const METRIC_BUDGET: Duration = Duration::from_secs(30);
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const SEPARABLE_MIN_AUROC: f64 = 0.99;
const CONSISTENCY_DRAWS: usize = 500;

/// Data seed of every synthetic corpus below.
const CORPUS_SEED: u64 = 1;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let outcomes = match run_suite(GRADCHECK_INSTANCES, 0) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = t.elapsed();
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.case).collect();
    let worst = outcomes.iter().map(|o| o.worst_rel_err).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} cases x {GRADCHECK_INSTANCES} instances, worst rel err {worst:.2e}, failed {failed:?}, {:.1}s",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_examples() -> Outcome {
    let rows = |r: &[&[f64]]| Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap();
    let div = |r: &[&[f64]]| {
        let tape = Tape::new();
        diversity_loss(tape.constant(rows(r))).unwrap().item()
    };
    let matching = |z: &[f64], p: &[&[f64]], target: usize, tau: f64| {
        let tape = Tape::new();
        let zv = tape.constant(rows(&[z]));
        match_loss(zv, tape.constant(rows(p)), target, tau).unwrap().item()
    };
    let joint = |m: f64, d: f64, lambda: f64| {
        let tape = Tape::new();
        joint_loss(tape.constant(Tensor::scalar(m)), tape.constant(Tensor::scalar(d)), lambda)
            .unwrap()
            .item()
    };
    let disc = |w: &[&[f64]], b: &[f64], z: &[f64], target: usize| {
        let tape = Tape::new();
        let (wv, bv) = (tape.constant(rows(w)), tape.constant(Tensor::vector(b.to_vec())));
        discriminative_loss(tape.constant(rows(&[z])), wv, bv, &[target]).unwrap().item()
    };
    let ln2 = 2f64.ln();
    let cases: Vec<(&str, f64, f64)> = vec![
        ("diversity K=2 identical", div(&[&[1.0, 2.0], &[1.0, 2.0]]), 0.5),
        ("diversity K=2 orthogonal", div(&[&[1.0, 0.0], &[0.0, 3.0]]), 0.0),
        ("diversity K=3 cos 0.5", div(&[&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]]), 6.0 * 0.25 / 9.0),
        ("match K=1", matching(&[0.3, -0.7], &[&[1.0, 1.0]], 0, 0.01), 0.0),
        ("match K=2 symmetric t0", matching(&[1.0, 0.0], &[&[1.0, 1.0], &[1.0, -1.0]], 0, 0.01), ln2),
        ("match K=2 symmetric t1", matching(&[1.0, 0.0], &[&[1.0, 1.0], &[1.0, -1.0]], 1, 0.01), ln2),
        ("match K=2 tau=1", matching(&[1.0, 0.0], &[&[2.0, 0.0], &[0.0, 5.0]], 0, 1.0), (1.0 + (-1f64).exp()).ln()),
        ("joint lambda=0", joint(0.42, 0.9, 0.0), 0.42),
        ("joint lambda=0.2", joint(0.693147, 0.5, 0.2), 0.793147),
        ("joint lambda=1 zero diversity", joint(1.7, 0.0, 1.0), 1.7),
        ("discriminative zero head K=4", disc(&[&[0.0; 3][..]; 4], &[0.0; 4], &[0.3, 1.0, -2.0], 2), 4f64.ln()),
        ("discriminative logits (1,0)", disc(&[&[1.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0], &[1.0, 5.0], 0), (1.0 + (-1f64).exp()).ln()),
    ];
    let mut bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > LOSS_TOL)
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (k, d) = (rng.random_range(1..6), rng.random_range(2..8));
        let p: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = rng.random_range(0..k);
        let refs: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
        let (gd, wd) = (div(&refs), common::diversity(&p));
        let (gm, wm) = (matching(&z, &refs, target, 0.01), common::match_loss(&z, &p, target, 0.01));
        if (gd - wd).abs() > LOSS_TOL || (gm - wm).abs() > LOSS_TOL * wm.abs().max(1.0) {
            bad.push(format!("random instance: div {gd} vs {wd}, match {gm} vs {wm}"));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} hand examples + 200 random instances within {LOSS_TOL:e}; mismatches {bad:?}", cases.len()),
    )
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..METRIC_SETS {
        let set = common::random_scored_set(&mut rng, METRIC_MAX_LEN);
        let same = auroc(&set).unwrap() == common::auroc(&set)
            && far_at_tpr(&set, 0.95).unwrap() == common::far_at_tpr(&set, 0.95)
            && aupr(&set).unwrap() == common::average_precision(&set)
            && id_accuracy(&set).unwrap() == common::accuracy(&set);
        mismatches += (!same) as usize;
    }
    let elapsed = t.elapsed();
    outcome(
        mismatches == 0 && elapsed < METRIC_BUDGET,
        format!("{METRIC_SETS} sets of <= {METRIC_MAX_LEN} samples, {mismatches} inexact, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn corpus(overlap: f64) -> LabeledCorpus {
    synth_corpus(&SynthConfig::new(8, 8, 40, overlap, CORPUS_SEED)).unwrap().corpus
}

fn desk_spec() -> RunSpec {
    RunSpec {
        train: TrainConfig::desk(),
        ..RunSpec::default()
    }
}

fn sm_cell(shots: usize, lambda: f64, variant: PrototypeVariant) -> Cell {
    Cell {
        method: Method::SemanticMatching,
        shots: Shots::Count(shots),
        lambda,
        variant,
    }
}

/// Every seed of one cell.
fn runs(spec: &RunSpec, corpus: &LabeledCorpus, cell: &Cell) -> Vec<RunResult> {
    SEEDS.iter().map(|&s| run_one(spec, corpus, cell, s, None).unwrap()).collect()
}

fn mean(rs: &[RunResult], f: impl Fn(&RunResult) -> f64) -> f64 {
    rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

/// First epoch (1-based) at which the seed-mean validation accuracy peaks.
fn epochs_to_best(rs: &[RunResult]) -> (usize, f64) {
    let epochs = rs[0].log.len();
    let curve: Vec<f64> = (0..epochs).map(|e| mean(rs, |r| r.log[e].val_acc)).collect();
    let best = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (curve.iter().position(|&a| a == best).unwrap() + 1, best)
}

struct Directional {
    ablation: Outcome,
    methods: Outcome,
    variants: Outcome,
    notes: Vec<String>,
}

fn directional() -> Directional {
    let t = Instant::now();
    let spec = desk_spec();
    let data = corpus(0.5);
    let joint = runs(&spec, &data, &sm_cell(5, 0.2, PrototypeVariant::ScenarioPromptPlusName));
    let match_only = runs(&spec, &data, &sm_cell(5, 0.0, PrototypeVariant::ScenarioPromptPlusName));
    let ablation_time = t.elapsed();
    let name_only = runs(&spec, &data, &sm_cell(5, 0.2, PrototypeVariant::NameOnly));
    let disc_cell = Cell {
        method: Method::Discriminative,
        ..sm_cell(5, 0.0, PrototypeVariant::ScenarioPromptPlusName)
    };
    let disc = runs(&spec, &data, &disc_cell);

    let acc = |rs: &[RunResult]| mean(rs, |r| r.report.id_acc);
    let far = |rs: &[RunResult]| mean(rs, |r| r.report.far_at_95);
    let ablation = outcome(
        far(&joint) < far(&match_only) && acc(&joint) >= acc(&match_only) && ablation_time < ABLATION_BUDGET,
        format!(
            "lambda 0.2: FAR@95 {:.4} ID ACC {:.4}; lambda 0: FAR@95 {:.4} ID ACC {:.4}; {:.0}s",
            far(&joint),
            acc(&joint),
            far(&match_only),
            acc(&match_only),
            ablation_time.as_secs_f64()
        ),
    );
    let methods = outcome(
        acc(&joint) >= acc(&disc),
        format!(
            "semantic matching ID ACC {:.4} vs discriminative {:.4} (per seed {:?} vs {:?})",
            acc(&joint),
            acc(&disc),
            joint.iter().map(|r| r.report.id_acc).collect::<Vec<_>>(),
            disc.iter().map(|r| r.report.id_acc).collect::<Vec<_>>()
        ),
    );
    let (scen_ep, scen_best) = epochs_to_best(&joint);
    let (name_ep, name_best) = epochs_to_best(&name_only);
    let variants = outcome(
        scen_ep <= name_ep && acc(&joint) >= acc(&name_only),
        format!(
            "scenario+name: best val acc {scen_best:.4} at epoch {scen_ep}, test ID ACC {:.4}; \
             name-only: best val acc {name_best:.4} at epoch {name_ep}, test ID ACC {:.4}",
            acc(&joint),
            acc(&name_only)
        ),
    );
    let descent = joint.iter().filter(|r| r.final_train_loss <= 0.5 * r.initial_train_loss).count();
    let notes = vec![
        format!(
            "note: semantic matching ID ACC {:.4} against the 5x-chance bar {:.4}",
            acc(&joint),
            5.0 / 8.0
        ),
        format!("note: training loss halved on {descent}/{} seeds", joint.len()),
        format!(
            "note: discriminative FAR@95 {:.4}, name-only FAR@95 {:.4}, total {:.0}s",
            far(&disc),
            far(&name_only),
            t.elapsed().as_secs_f64()
        ),
    ];
    Directional {
        ablation,
        methods,
        variants,
        notes,
    }
}

fn determinism() -> Outcome {
    let spec = RunSpec {
        methods: vec![Method::SemanticMatching, Method::Discriminative],
        seeds: vec![1, 2],
        train: TrainConfig {
            epochs: 4,
            ..TrainConfig::desk()
        },
        ..RunSpec::default()
    };
    let data = synth_corpus(&SynthConfig::new(4, 4, 10, 0.5, CORPUS_SEED)).unwrap().corpus;
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_grid(&spec, &data, Some(&a), 2).unwrap();
    run_grid(&spec, &data, Some(&b), 1).unwrap();
    let files = |root: &Path| -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        out.insert("report.csv".into(), fs::read(root.join("report.csv")).unwrap());
        for entry in fs::read_dir(root).unwrap() {
            let dir = entry.unwrap().path();
            if dir.is_dir() {
                for f in fs::read_dir(&dir).unwrap() {
                    let f = f.unwrap().path();
                    if f.extension().is_some_and(|e| e == "ckpt") {
                        out.insert(f.file_name().unwrap().to_string_lossy().into(), fs::read(&f).unwrap());
                    }
                }
            }
        }
        out
    };
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    outcome(
        fa.len() == 5 && fa.keys().eq(fb.keys()) && differing.is_empty(),
        format!("{} files compared (report.csv + checkpoints), differing {differing:?}", fa.len()),
    )
}

fn separable() -> Outcome {
    let spec = desk_spec();
    let data = corpus(0.0);
    let rs = runs(&spec, &data, &sm_cell(10, 0.2, PrototypeVariant::ScenarioPromptPlusName));
    let pass = rs.iter().all(|r| r.report.id_acc == 1.0 && r.report.auroc >= SEPARABLE_MIN_AUROC);
    outcome(
        pass,
        format!(
            "per seed ID ACC {:?}, AUROC {:?}",
            rs.iter().map(|r| r.report.id_acc).collect::<Vec<_>>(),
            rs.iter().map(|r| (r.report.auroc * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut disagreements = 0;
    for _ in 0..CONSISTENCY_DRAWS {
        let (k, d) = (rng.random_range(1..9), rng.random_range(2..10));
        let p: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = rng.random_range(0.005..2.0);
        let pt = Tensor::from_rows(&p).unwrap();
        let predicted = classify(&Tensor::vector(z.clone()), &pt).unwrap();
        let losses: Vec<f64> = (0..k)
            .map(|t| {
                let tape = Tape::new();
                let zv = tape.constant(Tensor::vector(z.clone()).reshape(&[1, d]).unwrap());
                match_loss(zv, tape.constant(pt.clone()), t, tau).unwrap().item()
            })
            .collect();
        // First minimum, matching the lowest-index tie rule of `classify`.
        let argmin = (0..k).fold(0, |best, t| if losses[t] < losses[best] { t } else { best });
        disagreements += (argmin != predicted) as usize;
    }
    outcome(disagreements == 0, format!("{CONSISTENCY_DRAWS} draws, {disagreements} disagreements"))
}

fn main() -> ExitCode {
    // Exact criteria, whose failure is a defect.
    let mut exact = Vec::new();
    // Directional measurements.
    let mut measured = Vec::new();

    let report = |n: usize, name: &str, o: &Outcome| {
        println!("CRITERION {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    let o = gradient_suite();
    report(1, "gradient suite", &o);
    exact.push(o.pass);
    let o = loss_examples();
    report(2, "loss oracles", &o);
    exact.push(o.pass);
    let o = metric_oracles();
    report(3, "metric oracles", &o);
    exact.push(o.pass);
    let d = directional();
    report(4, "diversity ablation", &d.ablation);
    report(5, "semantic matching vs discriminative", &d.methods);
    report(6, "prompt-initialized vs name-only prototypes", &d.variants);
    measured.extend([d.ablation.pass, d.methods.pass, d.variants.pass]);
    let o = determinism();
    report(7, "determinism", &o);
    exact.push(o.pass);
    let o = separable();
    report(8, "separable ceiling", &o);
    measured.push(o.pass);
    let o = consistency();
    report(9, "classify/match-loss consistency", &o);
    exact.push(o.pass);
    for n in &d.notes {
        println!("{n}");
    }

    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let passed = exact.iter().chain(&measured).filter(|&&p| p).count();
    println!("acceptance: {passed}/9 criteria pass");
    if exact.iter().all(|&p| p) && (!strict || measured.iter().all(|&p| p)) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
