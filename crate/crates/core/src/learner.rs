//! A trainable classifier: adapted encoder plus either class prototypes or a
//! linear head, together with the vocabulary and class list it was built for.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::data::{derive_seed, LabeledCorpus, Vocab};
use crate::error::{Error, Result};
use crate::losses::head_logits;
use crate::model::{EncoderConfig, EncoderModel, INIT_STD};
use crate::numerics::{argmax, ParamStore, Tape, Tensor};
use crate::prototypes::{init_prototype_set, ClassPrototypeSet, PrototypeVariant};
use crate::scoring::classify;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SemanticMatching,
    Discriminative,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SemanticMatching => "semantic-matching",
            Method::Discriminative => "discriminative",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic-matching" => Ok(Method::SemanticMatching),
            "discriminative" => Ok(Method::Discriminative),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// How class prototypes are built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeOptions {
    pub variant: PrototypeVariant,
    pub num_soft_tokens: usize,
    #[serde(default)]
    pub shared_soft_tokens: bool,
}

impl Default for PrototypeOptions {
    fn default() -> Self {
        Self {
            variant: PrototypeVariant::ScenarioPromptPlusName,
            num_soft_tokens: crate::prototypes::DEFAULT_SOFT_TOKENS,
            shared_soft_tokens: false,
        }
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Stream tags for seeds derived from a run seed.
pub const LORA_SEED_TAG: u64 = 0x4c4f5241;
pub const HEAD_SEED_TAG: u64 = 0x48454144;
pub const PROTO_SEED_TAG: u64 = 0x50524f31;

#[derive(Clone, Debug)]
pub enum Classifier {
    Prototypes(ClassPrototypeSet),
    /// `head.weight` [K×d] and `head.bias` [K].
    Head(ParamStore),
}

impl Classifier {
    pub fn params(&self) -> &ParamStore {
        match self {
            Classifier::Prototypes(p) => p.params(),
            Classifier::Head(h) => h,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Classifier::Prototypes(p) => p.params_mut(),
            Classifier::Head(h) => h,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Learner {
    pub encoder: EncoderModel,
    pub classifier: Classifier,
    pub vocab: Vocab,
    pub scenario: String,
    pub class_names: Vec<String>,
}

impl Learner {
    /// Fresh learner for `corpus`: backbone from `backbone_seed`, adapters and
    /// classifier from streams derived from `seed`.
    pub fn init(
        corpus: &LabeledCorpus,
        method: Method,
        protos: &PrototypeOptions,
        encoder: &EncoderConfig,
        backbone_seed: u64,
        seed: u64,
    ) -> Result<Self> {
        let config = EncoderConfig {
            vocab_size: corpus.vocab.len(),
            ..encoder.clone()
        };
        let model = EncoderModel::new(config, backbone_seed, derive_seed(seed, LORA_SEED_TAG))?;
        let classes = corpus.class_names().to_vec();
        let classifier = match method {
            Method::SemanticMatching => Classifier::Prototypes(init_prototype_set(
                &classes,
                protos.variant,
                &corpus.manifest.scenario,
                protos.num_soft_tokens,
                protos.shared_soft_tokens,
                &model,
                &corpus.vocab,
                derive_seed(seed, PROTO_SEED_TAG),
            )?),
            Method::Discriminative => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, HEAD_SEED_TAG));
                let (k, d) = (classes.len(), model.config().embed_dim);
                let mut head = ParamStore::new();
                head.insert(HEAD_WEIGHT, Tensor::randn(&[k, d], INIT_STD, &mut rng), true);
                head.insert(HEAD_BIAS, Tensor::zeros(&[k]), true);
                Classifier::Head(head)
            }
        };
        Ok(Self {
            encoder: model,
            classifier,
            vocab: corpus.vocab.clone(),
            scenario: corpus.manifest.scenario.clone(),
            class_names: classes,
        })
    }

    pub fn method(&self) -> Method {
        match self.classifier {
            Classifier::Prototypes(_) => Method::SemanticMatching,
            Classifier::Head(_) => Method::Discriminative,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Prototype matrix for semantic matching; `None` for a linear head.
    pub fn prototypes(&self) -> Result<Option<Tensor>> {
        match &self.classifier {
            Classifier::Prototypes(p) => Ok(Some(p.compute_values(&self.encoder)?)),
            Classifier::Head(_) => Ok(None),
        }
    }

    /// Predicted class for representation `z`. `prototypes` must come from
    /// [`Learner::prototypes`] when the method is semantic matching.
    pub fn predict(&self, z: &Tensor, prototypes: Option<&Tensor>) -> Result<usize> {
        match (&self.classifier, prototypes) {
            (Classifier::Prototypes(_), Some(p)) => classify(z, p),
            (Classifier::Prototypes(_), None) => {
                Err(Error::State("prototype matrix required for prediction".into()))
            }
            (Classifier::Head(h), _) => {
                let tape = Tape::new();
                let bound = h.bind(&tape);
                let w = bound.var(h.slot(HEAD_WEIGHT).expect("head weight"));
                let b = bound.var(h.slot(HEAD_BIAS).expect("head bias"));
                let logits = head_logits(tape.constant(z.clone()), w, b)?;
                Ok(argmax(logits.value().data()))
            }
        }
    }

    pub fn to_archive(&self, extra_meta: Value) -> Archive {
        let (method, protos) = match &self.classifier {
            Classifier::Prototypes(p) => (
                Method::SemanticMatching,
                json!({
                    "variant": p.variant(),
                    "num_soft_tokens": p.num_soft_tokens(),
                    "shared_soft_tokens": p.shared(),
                    "name_token_ids": p.name_token_ids(),
                }),
            ),
            Classifier::Head(_) => (Method::Discriminative, Value::Null),
        };
        let mut a = Archive::new(
            json!({ "encoder": self.encoder.config(), "method": method, "prototypes": protos }),
            json!({
                "scenario": self.scenario,
                "class_names": self.class_names,
                "vocab": self.vocab.tokens(),
                "run": extra_meta,
            }),
        );
        a.extend_from(self.encoder.params());
        a.extend_from(self.classifier.params());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: EncoderConfig = decode(&a.config, "encoder")?;
        let method: Method = decode(&a.config, "method")?;
        let scenario: String = decode(&a.meta, "scenario")?;
        let class_names: Vec<String> = decode(&a.meta, "class_names")?;
        let tokens: Vec<String> = decode(&a.meta, "vocab")?;
        let vocab = Vocab::from_tokens(tokens)?;

        let encoder = EncoderModel::from_store(
            config,
            &a.select(|n| !n.starts_with("proto.") && !n.starts_with("head.")),
        )?;
        let classifier = match method {
            Method::SemanticMatching => {
                #[derive(Deserialize)]
                struct Stored {
                    variant: PrototypeVariant,
                    num_soft_tokens: usize,
                    shared_soft_tokens: bool,
                    name_token_ids: Vec<Vec<usize>>,
                }
                let s: Stored = decode(&a.config, "prototypes")?;
                Classifier::Prototypes(ClassPrototypeSet::from_parts(
                    s.variant,
                    class_names.clone(),
                    s.name_token_ids,
                    s.num_soft_tokens,
                    s.shared_soft_tokens,
                    a.select(|n| n.starts_with("proto.")),
                )?)
            }
            Method::Discriminative => {
                let head = a.select(|n| n.starts_with("head."));
                let (k, d) = (class_names.len(), encoder.config().embed_dim);
                let ok = head.len() == 2
                    && head.get(HEAD_WEIGHT).map(|t| t.shape() == [k, d]) == Some(true)
                    && head.get(HEAD_BIAS).map(|t| t.shape() == [k]) == Some(true);
                if !ok {
                    return Err(Error::Checkpoint("malformed classification head".into()));
                }
                Classifier::Head(head)
            }
        };
        Ok(Self {
            encoder,
            classifier,
            vocab,
            scenario,
            class_names,
        })
    }

    pub fn save(&self, path: &Path, extra_meta: Value) -> Result<()> {
        self.to_archive(extra_meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn decode<T: DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    let field = v
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {key:?}")))?;
    serde_json::from_value(field.clone())
        .map_err(|e| Error::Checkpoint(format!("bad {key:?} entry: {e}")))
}
