//! Learnable class prototypes.
//!
//! Class `i` is described by the sequence `[S]_1 … [S]_M NAME_i`, where the
//! `[S]_j` are trainable vectors in embedding space and `NAME_i` are the frozen
//! embedding rows of the class name's tokens. The prototype `p_i` is the
//! encoder's representation of that sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, scenario_prompt, Vocab, UNK_ID};
use crate::error::{Error, Result};
use crate::model::{BoundEncoder, EncoderModel, INIT_STD};
use crate::numerics::{concat_rows, BoundParams, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_SOFT_TOKENS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrototypeVariant {
    /// Soft tokens seeded from "<scenario> intent of", followed by the name.
    #[serde(rename = "scenario")]
    ScenarioPromptPlusName,
    /// Gaussian soft tokens followed by the name.
    #[serde(rename = "random-name")]
    RandomPlusName,
    /// Gaussian soft tokens only.
    #[serde(rename = "random")]
    RandomOnly,
    /// Frozen name embeddings only; nothing prototype-specific is trained.
    #[serde(rename = "name-only")]
    NameOnly,
}

impl PrototypeVariant {
    pub const ALL: [PrototypeVariant; 4] = [
        PrototypeVariant::ScenarioPromptPlusName,
        PrototypeVariant::RandomPlusName,
        PrototypeVariant::RandomOnly,
        PrototypeVariant::NameOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrototypeVariant::ScenarioPromptPlusName => "scenario",
            PrototypeVariant::RandomPlusName => "random-name",
            PrototypeVariant::RandomOnly => "random",
            PrototypeVariant::NameOnly => "name-only",
        }
    }

    pub fn uses_soft_tokens(self) -> bool {
        self != PrototypeVariant::NameOnly
    }

    pub fn uses_name(self) -> bool {
        self != PrototypeVariant::RandomOnly
    }
}

impl std::fmt::Display for PrototypeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PrototypeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prototype variant {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct ClassPrototypeSet {
    variant: PrototypeVariant,
    class_names: Vec<String>,
    name_token_ids: Vec<Vec<usize>>,
    num_soft_tokens: usize,
    shared: bool,
    /// Soft-token blocks, one per class (`proto.soft.<i>`) or a single
    /// `proto.soft.shared` block.
    params: ParamStore,
}

pub fn soft_block_name(class: usize) -> String {
    format!("proto.soft.{class}")
}

pub const SHARED_BLOCK_NAME: &str = "proto.soft.shared";

/// Builds the per-class sequences and initial soft tokens.
#[allow(clippy::too_many_arguments)]
pub fn init_prototype_set(
    classes: &[String],
    variant: PrototypeVariant,
    scenario: &str,
    num_soft_tokens: usize,
    shared: bool,
    model: &EncoderModel,
    vocab: &Vocab,
    seed: u64,
) -> Result<ClassPrototypeSet> {
    if classes.is_empty() {
        return Err(Error::Input("empty class list".into()));
    }
    match (variant.uses_soft_tokens(), num_soft_tokens) {
        (false, m) if m > 0 => {
            return Err(Error::Config(format!(
                "name-only prototypes take no soft tokens, got M={m}"
            )))
        }
        (true, 0) => {
            return Err(Error::Config(format!(
                "variant {variant} needs at least one soft token"
            )))
        }
        _ => {}
    }
    if shared && variant == PrototypeVariant::RandomOnly {
        return Err(Error::Config(
            "shared soft tokens without class names make every prototype identical".into(),
        ));
    }

    let name_token_ids: Vec<Vec<usize>> = classes.iter().map(|c| vocab.encode(c)).collect();
    for (c, ids) in classes.iter().zip(&name_token_ids) {
        if ids.is_empty() {
            return Err(Error::Input(format!("class name {c:?} has no tokens")));
        }
    }

    let d = model.config().embed_dim;
    let mut params = ParamStore::new();
    if num_soft_tokens > 0 {
        let blocks = if shared { 1 } else { classes.len() };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5052_4f54));
        let scenario_block = if variant == PrototypeVariant::ScenarioPromptPlusName {
            let prompt = vocab.encode(&scenario_prompt(scenario));
            if prompt.is_empty() || prompt.iter().all(|&i| i == UNK_ID) {
                return Err(Error::Config(format!(
                    "scenario prompt for {scenario:?} has no known tokens"
                )));
            }
            let table = model.embedding_table();
            let rows: Vec<Vec<f64>> = (0..num_soft_tokens)
                .map(|j| table.row(prompt[j % prompt.len()]).to_vec())
                .collect();
            Some(Tensor::from_rows(&rows)?)
        } else {
            None
        };
        for b in 0..blocks {
            let block = match &scenario_block {
                Some(t) => t.clone(),
                None => Tensor::randn(&[num_soft_tokens, d], INIT_STD, &mut rng),
            };
            let name = if shared {
                SHARED_BLOCK_NAME.to_string()
            } else {
                soft_block_name(b)
            };
            params.insert(name, block, true);
        }
    }

    Ok(ClassPrototypeSet {
        variant,
        class_names: classes.to_vec(),
        name_token_ids,
        num_soft_tokens,
        shared,
        params,
    })
}

impl ClassPrototypeSet {
    /// Reassembles a set from stored parts, checking the soft-token layout.
    pub fn from_parts(
        variant: PrototypeVariant,
        class_names: Vec<String>,
        name_token_ids: Vec<Vec<usize>>,
        num_soft_tokens: usize,
        shared: bool,
        params: ParamStore,
    ) -> Result<Self> {
        let expected = match (num_soft_tokens, shared) {
            (0, _) => 0,
            (_, true) => 1,
            (_, false) => class_names.len(),
        };
        if params.len() != expected || name_token_ids.len() != class_names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {expected} soft-token blocks for {} classes, found {}",
                class_names.len(),
                params.len()
            )));
        }
        Ok(Self {
            variant,
            class_names,
            name_token_ids,
            num_soft_tokens,
            shared,
            params,
        })
    }

    pub fn variant(&self) -> PrototypeVariant {
        self.variant
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn name_token_ids(&self) -> &[Vec<usize>] {
        &self.name_token_ids
    }

    pub fn num_soft_tokens(&self) -> usize {
        self.num_soft_tokens
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of positions in class `i`'s sequence.
    pub fn sequence_len(&self, class: usize) -> usize {
        let name = if self.variant.uses_name() {
            self.name_token_ids[class].len()
        } else {
            0
        };
        self.num_soft_tokens + name
    }

    /// Prototype matrix [K×d], recomputed from the current parameters.
    pub fn compute<'t>(
        &self,
        encoder: &BoundEncoder<'t, '_>,
        soft: &BoundParams<'t>,
    ) -> Result<Var<'t>> {
        let mut rows = Vec::with_capacity(self.num_classes());
        for class in 0..self.num_classes() {
            let mut parts = Vec::with_capacity(2);
            if self.num_soft_tokens > 0 {
                parts.push(soft.var(if self.shared { 0 } else { class }));
            }
            if self.variant.uses_name() {
                parts.push(encoder.embed(&self.name_token_ids[class])?);
            }
            let seq = if parts.len() == 1 {
                parts[0]
            } else {
                concat_rows(&parts)?
            };
            rows.push(encoder.encode_embeddings(seq)?);
        }
        concat_rows(&rows)
    }

    /// Prototype values without gradient tracking.
    pub fn compute_values(&self, model: &EncoderModel) -> Result<Tensor> {
        let tape = Tape::new();
        let encoder = model.bind(&tape);
        let soft = self.params.bind(&tape);
        Ok((*self.compute(&encoder, &soft)?.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, RepLayer};

    fn setup() -> (EncoderModel, Vocab) {
        let vocab = Vocab::build([
            "banking intent of",
            "transactions",
            "book flight",
            "pay my bill please",
        ]);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            max_seq_len: 8,
            rep_layer: RepLayer::Final,
        };
        (EncoderModel::new(cfg, 1, 2).unwrap(), vocab)
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn name_only_reduces_to_token_path() {
        let (model, vocab) = setup();
        let classes = names(&["transactions", "book flight"]);
        let set = init_prototype_set(
            &classes,
            PrototypeVariant::NameOnly,
            "banking",
            0,
            false,
            &model,
            &vocab,
            1,
        )
        .unwrap();
        assert_eq!(set.sequence_len(0), 1);
        assert_eq!(set.name_token_ids()[0], vocab.encode("transactions"));
        let protos = set.compute_values(&model).unwrap();
        for (i, c) in classes.iter().enumerate() {
            let direct = model.represent(&vocab.encode(c)).unwrap();
            assert_eq!(protos.row(i), direct.data());
        }
    }

    #[test]
    fn scenario_init_copies_prompt_embeddings() {
        let (model, vocab) = setup();
        let classes = names(&["transactions", "book flight"]);
        let set = init_prototype_set(
            &classes,
            PrototypeVariant::ScenarioPromptPlusName,
            "banking",
            4,
            false,
            &model,
            &vocab,
            1,
        )
        .unwrap();
        let block = set.params().get(&soft_block_name(1)).unwrap();
        let table = model.embedding_table();
        assert_eq!(block.row(0), table.row(vocab.id("banking")));
        assert_eq!(block.row(2), table.row(vocab.id("of")));
        // cycled: the fourth slot wraps to the first prompt token
        assert_eq!(block.row(3), table.row(vocab.id("banking")));
        assert_eq!(set.sequence_len(1), 4 + 2);
    }

    #[test]
    fn random_init_is_seeded() {
        let (model, vocab) = setup();
        let classes = names(&["transactions", "book flight"]);
        let make = |seed| {
            init_prototype_set(
                &classes,
                PrototypeVariant::RandomPlusName,
                "banking",
                3,
                false,
                &model,
                &vocab,
                seed,
            )
            .unwrap()
        };
        let (a, b, c) = (make(5), make(5), make(6));
        let get = |s: &ClassPrototypeSet| s.params().get(&soft_block_name(0)).unwrap().clone();
        assert_eq!(get(&a), get(&b));
        assert_ne!(get(&a), get(&c));
    }

    #[test]
    fn identical_classes_give_identical_rows() {
        let (model, vocab) = setup();
        let classes = names(&["transactions", "transactions"]);
        let set = init_prototype_set(
            &classes,
            PrototypeVariant::ScenarioPromptPlusName,
            "banking",
            2,
            false,
            &model,
            &vocab,
            1,
        )
        .unwrap();
        let p = set.compute_values(&model).unwrap();
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn contract_errors() {
        let (model, vocab) = setup();
        let init = |classes: &[String], variant, m, shared| {
            init_prototype_set(classes, variant, "banking", m, shared, &model, &vocab, 1)
        };
        let one = names(&["transactions"]);
        assert!(matches!(
            init(&[], PrototypeVariant::NameOnly, 0, false),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            init(&one, PrototypeVariant::NameOnly, 4, false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init(&one, PrototypeVariant::RandomPlusName, 0, false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init(&one, PrototypeVariant::RandomOnly, 2, true),
            Err(Error::Config(_))
        ));
        let long = init(&one, PrototypeVariant::RandomPlusName, 8, false).unwrap();
        assert!(matches!(
            long.compute_values(&model),
            Err(Error::Length { len: 9, max: 8 })
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PrototypeVariant::ALL {
            assert_eq!(v.name().parse::<PrototypeVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
    }
}
