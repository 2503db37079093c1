//! Corpus ingestion: tokenization, JSONL splits described by a manifest,
//! seeded few-shot sampling, and a synthetic corpus generator.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Lowercases and splits on whitespace; every other non-alphanumeric
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '_' {
            current.push(ch);
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// The prompt whose embeddings seed scenario-initialized soft tokens.
pub fn scenario_prompt(scenario: &str) -> String {
    format!("{scenario} intent of")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary in first-appearance order; id 0 is the unknown token.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), UNK_ID)]),
        };
        for text in texts {
            for tok in tokenize(text) {
                if !vocab.index.contains_key(&tok) {
                    vocab.index.insert(tok.clone(), vocab.tokens.len());
                    vocab.tokens.push(tok);
                }
            }
        }
        vocab
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Checkpoint("vocabulary must start with <unk>".into()));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Checkpoint("duplicate vocabulary entries".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// JSON description of a dataset: class split plus paths to the three JSONL files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenario: String,
    pub id_classes: Vec<String>,
    pub ood_classes: Vec<String>,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub test_path: PathBuf,
}

impl DatasetManifest {
    /// Reads a manifest; relative split paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut manifest.train_path,
            &mut manifest.val_path,
            &mut manifest.test_path,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_classes.is_empty() {
            return Err(Error::Manifest("no ID classes".into()));
        }
        let id: BTreeSet<&String> = self.id_classes.iter().collect();
        let ood: BTreeSet<&String> = self.ood_classes.iter().collect();
        if id.len() != self.id_classes.len() || ood.len() != self.ood_classes.len() {
            return Err(Error::Manifest("duplicate class names".into()));
        }
        if let Some(shared) = id.intersection(&ood).next() {
            return Err(Error::Manifest(format!(
                "class {shared:?} is listed as both ID and OOD"
            )));
        }
        Ok(())
    }
}

/// One JSONL record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub text: String,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `<split>:<row>`, unique across the corpus.
    pub id: String,
    pub text: String,
    pub tokens: Vec<usize>,
    pub label: String,
    /// Index into the manifest's ID classes; `None` for OOD samples.
    pub class_index: Option<usize>,
    pub split: Split,
}

impl Sample {
    pub fn is_id(&self) -> bool {
        self.class_index.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub manifest: DatasetManifest,
    pub vocab: Vocab,
    pub samples: Vec<Sample>,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CorpusRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "file contains no rows".into(),
        });
    }
    Ok(rows)
}

pub fn write_jsonl(path: &Path, rows: &[CorpusRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads and tokenizes the three splits named by `manifest`.
pub fn load_corpus(manifest: &DatasetManifest) -> Result<LabeledCorpus> {
    manifest.validate()?;
    let train = read_jsonl(&manifest.train_path)?;
    let val = read_jsonl(&manifest.val_path)?;
    let test = read_jsonl(&manifest.test_path)?;
    LabeledCorpus::from_rows(manifest.clone(), &train, &val, &test)
}

impl LabeledCorpus {
    /// Validates labels, builds the vocabulary from ID training text (plus the
    /// scenario prompt and ID class names), and tokenizes every split.
    pub fn from_rows(
        manifest: DatasetManifest,
        train: &[CorpusRow],
        val: &[CorpusRow],
        test: &[CorpusRow],
    ) -> Result<Self> {
        manifest.validate()?;
        let id_index: HashMap<&str, usize> = manifest
            .id_classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let ood: BTreeSet<&str> = manifest.ood_classes.iter().map(String::as_str).collect();
        for (split, rows) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
            for row in rows {
                let label = row.label.as_str();
                if ood.contains(label) {
                    if split != Split::Test {
                        return Err(Error::SplitViolation {
                            label: row.label.clone(),
                            split: split.name().into(),
                        });
                    }
                } else if !id_index.contains_key(label) {
                    return Err(Error::Manifest(format!(
                        "unknown label {label:?} in {} split",
                        split.name()
                    )));
                }
            }
        }

        let prompt = scenario_prompt(&manifest.scenario);
        let vocab = Vocab::build(
            std::iter::once(prompt.as_str())
                .chain(manifest.id_classes.iter().map(String::as_str))
                .chain(train.iter().map(|r| r.text.as_str())),
        );

        let mut samples = Vec::with_capacity(train.len() + val.len() + test.len());
        for (split, rows) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
            for (i, row) in rows.iter().enumerate() {
                let tokens = vocab.encode(&row.text);
                if tokens.is_empty() {
                    return Err(Error::Input(format!(
                        "{} row {} has no tokens",
                        split.name(),
                        i + 1
                    )));
                }
                samples.push(Sample {
                    id: format!("{}:{i}", split.name()),
                    text: row.text.clone(),
                    tokens,
                    label: row.label.clone(),
                    class_index: id_index.get(row.label.as_str()).copied(),
                    split,
                });
            }
        }
        Ok(Self {
            manifest,
            vocab,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.id_classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.id_classes
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Per-class sample budget for the training and validation splits.
/// Serialized as the same string the CLI accepts: `"5"` or `"full"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Shots {
    Count(usize),
    Full,
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shots::Count(n) => write!(f, "{n}"),
            Shots::Full => f.write_str("full"),
        }
    }
}

impl From<Shots> for String {
    fn from(s: Shots) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Shots {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Shots::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Shots::Count(n)),
            _ => Err(Error::Config(format!("shots must be a positive count or 'full', got {s:?}"))),
        }
    }
}

/// Mixes a run seed with a stream tag into an independent RNG seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps `shots` train and `shots` val samples per ID class.
///
/// Each class's samples are shuffled with a seed derived from `(seed, split,
/// class)` and a prefix is kept, so a larger shot count always selects a
/// superset of a smaller one. Test samples are untouched.
pub fn few_shot_sample(corpus: &LabeledCorpus, shots: Shots, seed: u64) -> Result<LabeledCorpus> {
    let Shots::Count(n) = shots else {
        return Ok(corpus.clone());
    };
    let mut keep = vec![true; corpus.samples.len()];
    for (split_tag, split) in [(1u64, Split::Train), (2, Split::Val)] {
        for class in 0..corpus.num_classes() {
            let mut members: Vec<usize> = corpus
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.split == split && s.class_index == Some(class))
                .map(|(i, _)| i)
                .collect();
            if members.len() < n {
                return Err(Error::Sampling(format!(
                    "class {:?} has {} {} samples, {n} requested",
                    corpus.manifest.id_classes[class],
                    members.len(),
                    split.name()
                )));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, split_tag << 32 | class as u64));
            members.shuffle(&mut rng);
            for &i in &members[n..] {
                keep[i] = false;
            }
        }
    }
    let samples = corpus
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(LabeledCorpus {
        manifest: corpus.manifest.clone(),
        vocab: corpus.vocab.clone(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub k_id: usize,
    pub k_ood: usize,
    /// Training utterances per ID class.
    pub per_class: usize,
    pub val_per_class: usize,
    /// Test utterances per class, for ID and OOD classes alike.
    pub test_per_class: usize,
    pub vocab_size: usize,
    /// Probability that a token is drawn from the shared pool.
    pub overlap: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(k_id: usize, k_ood: usize, per_class: usize, overlap: f64, seed: u64) -> Self {
        Self {
            k_id,
            k_ood,
            per_class,
            val_per_class: per_class.div_ceil(2),
            test_per_class: per_class.div_ceil(2),
            vocab_size: DEFAULT_POOL_WORDS * (k_id + k_ood + 1),
            overlap,
            seed,
        }
    }
}

/// Words per class pool (and in the shared pool) under the default vocabulary
/// size. Small pools keep test utterances inside the few-shot vocabulary; the
/// frozen random backbone cannot relate unseen words to seen ones.
pub const DEFAULT_POOL_WORDS: usize = 4;

pub const SYNTH_MIN_LEN: usize = 4;
pub const SYNTH_MAX_LEN: usize = 12;

/// Generated corpus plus the rows it was built from.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub corpus: LabeledCorpus,
    pub train: Vec<CorpusRow>,
    pub val: Vec<CorpusRow>,
    pub test: Vec<CorpusRow>,
}

impl SynthCorpus {
    /// Writes `manifest.json` and the three JSONL splits into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("val.jsonl"), &self.val)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

/// Synthetic near-OOD intent corpus.
///
/// The word list `w0000..` is cut into one private pool per class plus a shared
/// pool. Utterances of 4–12 tokens draw each token from the shared pool with
/// probability `overlap` and from their class's pool otherwise. A class's name
/// is the first two words of its pool.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let groups = cfg.k_id + cfg.k_ood;
    if cfg.k_id == 0 {
        return Err(Error::Config("k_id must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("overlap {} outside [0, 1]", cfg.overlap)));
    }
    if cfg.per_class == 0 || cfg.val_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Config("per-class counts must be positive".into()));
    }
    let pool = cfg.vocab_size / (groups + 1);
    let shared = cfg.vocab_size.saturating_sub(pool * groups);
    if pool < 2 || (cfg.overlap > 0.0 && shared == 0) {
        return Err(Error::Config(format!(
            "vocab_size {} cannot hold {groups} disjoint class pools of at least 2 words plus a \
             shared pool; need vocab_size >= {}",
            cfg.vocab_size,
            2 * (groups + 1)
        )));
    }
    let word = |i: usize| format!("w{i:04}");
    let class_pool = |g: usize| (g * pool..(g + 1) * pool).collect::<Vec<_>>();
    let shared_pool: Vec<usize> = (pool * groups..cfg.vocab_size).collect();
    let name = |g: usize| format!("{} {}", word(g * pool), word(g * pool + 1));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let utterance = |g: usize, rng: &mut ChaCha8Rng| -> String {
        let own = class_pool(g);
        let len = rng.random_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
        (0..len)
            .map(|_| {
                let from_shared = !shared_pool.is_empty() && rng.random_bool(cfg.overlap);
                let pick = if from_shared {
                    shared_pool[rng.random_range(0..shared_pool.len())]
                } else {
                    own[rng.random_range(0..own.len())]
                };
                word(pick)
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let id_classes: Vec<String> = (0..cfg.k_id).map(name).collect();
    let ood_classes: Vec<String> = (cfg.k_id..groups).map(name).collect();
    let rows = |classes: std::ops::Range<usize>, n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for g in classes {
            for _ in 0..n {
                out.push(CorpusRow {
                    text: utterance(g, rng),
                    label: name(g),
                });
            }
        }
        out
    };
    let train = rows(0..cfg.k_id, cfg.per_class, &mut rng);
    let val = rows(0..cfg.k_id, cfg.val_per_class, &mut rng);
    let test = rows(0..groups, cfg.test_per_class, &mut rng);

    let manifest = DatasetManifest {
        scenario: "synthetic".into(),
        id_classes,
        ood_classes,
        train_path: "train.jsonl".into(),
        val_path: "val.jsonl".into(),
        test_path: "test.jsonl".into(),
    };
    let corpus = LabeledCorpus::from_rows(manifest.clone(), &train, &val, &test)?;
    Ok(SynthCorpus {
        manifest,
        corpus,
        train,
        val,
        test,
    })
}
