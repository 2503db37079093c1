//! Tiny causal transformer encoder with low-rank adapters on the attention
//! projections.
//!
//! Layout per block: RMS pre-norm, causal multi-head attention whose four
//! projections are [`LoraLinear`] layers, a residual add, RMS pre-norm, a gated
//! SiLU feed-forward block and a second residual add. The sequence
//! representation is the hidden state of the last position.
//!
//! Base weights are drawn once from a seeded Gaussian and stay frozen; only the
//! adapter matrices are trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{concat_cols, BoundParams, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Which hidden state serves as the sequence representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RepLayer {
    /// Output of the last block after the final normalization.
    #[default]
    Final,
    /// Output of the second-to-last block (the input to the last block).
    Penultimate,
}

impl std::str::FromStr for RepLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(RepLayer::Final),
            "penultimate" => Ok(RepLayer::Penultimate),
            other => Err(Error::Config(format!("unknown rep layer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_seq_len: usize,
    #[serde(default)]
    pub rep_layer: RepLayer,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            max_seq_len: 64,
            rep_layer: RepLayer::Final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.n_layers == 0 {
            return fail("vocab_size, embed_dim and n_layers must be positive".into());
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim {
            return fail(format!(
                "lora_rank {} must be in 1..={}",
                self.lora_rank, self.embed_dim
            ));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return fail(format!("lora_alpha {} must be positive", self.lora_alpha));
        }
        if self.mlp_ratio == 0 || self.max_seq_len == 0 {
            return fail("mlp_ratio and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub a: usize,
    pub b: usize,
    pub scale: f64,
}

/// Frozen linear map `W` (out×in) with an optional low-rank update `scale·B·A`.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub weight: usize,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn bind<'t>(&self, params: &BoundParams<'t>) -> BoundLinear<'t> {
        BoundLinear {
            weight: params.var(self.weight),
            adapter: self
                .adapter
                .map(|ad| (params.var(ad.a), params.var(ad.b), ad.scale)),
        }
    }
}

/// A [`LoraLinear`] whose tensors live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    /// `(A: r×in, B: out×r, scale)`
    pub adapter: Option<(Var<'t>, Var<'t>, f64)>,
}

impl<'t> BoundLinear<'t> {
    /// `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ` for `x` of shape [L×in] or [in].
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let x2 = if shape.len() == 1 {
            x.reshape(&[1, shape[0]])?
        } else {
            x
        };
        let mut out = x2.matmul_t(self.weight)?;
        if let Some((a, b, scale)) = self.adapter {
            let delta = x2.matmul_t(a)?.matmul_t(b)?.scale(scale);
            out = out.add(delta)?;
        }
        if shape.len() == 1 {
            let d_out = out.shape()[1];
            out = out.reshape(&[d_out])?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    gate: usize,
    up: usize,
    down: usize,
}

const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParamStore,
    embedding: usize,
    blocks: Vec<Block>,
}

impl EncoderModel {
    /// Frozen backbone without adapters, drawn from `backbone_seed`.
    pub fn new_base(config: EncoderConfig, backbone_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(backbone_seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut params = ParamStore::new();
        let embedding = params.insert(
            "embedding",
            Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng),
            false,
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let proj: Vec<LoraLinear> = PROJECTIONS
                .iter()
                .map(|p| LoraLinear {
                    weight: params.insert(
                        format!("blocks.{layer}.attn.{p}.weight"),
                        Tensor::randn(&[d, d], INIT_STD, &mut rng),
                        false,
                    ),
                    adapter: None,
                })
                .collect();
            let [q, k, v, o]: [LoraLinear; 4] = proj.try_into().expect("four projections");
            let gate = params.insert(
                format!("blocks.{layer}.mlp.gate.weight"),
                Tensor::randn(&[hidden, d], INIT_STD, &mut rng),
                false,
            );
            let up = params.insert(
                format!("blocks.{layer}.mlp.up.weight"),
                Tensor::randn(&[hidden, d], INIT_STD, &mut rng),
                false,
            );
            let down = params.insert(
                format!("blocks.{layer}.mlp.down.weight"),
                Tensor::randn(&[d, hidden], INIT_STD, &mut rng),
                false,
            );
            blocks.push(Block {
                q,
                k,
                v,
                o,
                gate,
                up,
                down,
            });
        }
        Ok(Self {
            config,
            params,
            embedding,
            blocks,
        })
    }

    /// Adds trainable adapters to W_q, W_k, W_v, W_o of every block.
    /// A ~ N(0, 0.02²), B = 0, so the model's outputs are unchanged.
    pub fn inject_lora(&mut self, seed: u64) -> Result<()> {
        if self.has_adapters() {
            return Err(Error::Config("adapters already injected".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (self.config.embed_dim, self.config.lora_rank);
        let scale = self.config.lora_scale();
        for (layer, block) in self.blocks.iter_mut().enumerate() {
            for (name, lin) in PROJECTIONS
                .iter()
                .zip([&mut block.q, &mut block.k, &mut block.v, &mut block.o])
            {
                let a = self.params.insert(
                    format!("blocks.{layer}.attn.{name}.lora_a"),
                    Tensor::randn(&[r, d], INIT_STD, &mut rng),
                    true,
                );
                let b = self.params.insert(
                    format!("blocks.{layer}.attn.{name}.lora_b"),
                    Tensor::zeros(&[d, r]),
                    true,
                );
                lin.adapter = Some(LoraAdapter { a, b, scale });
            }
        }
        Ok(())
    }

    /// Backbone from `backbone_seed` with freshly injected adapters from `lora_seed`.
    pub fn new(config: EncoderConfig, backbone_seed: u64, lora_seed: u64) -> Result<Self> {
        let mut model = Self::new_base(config, backbone_seed)?;
        model.inject_lora(lora_seed)?;
        Ok(model)
    }

    /// Rebuilds an adapted model from stored tensors; names and shapes must match exactly.
    pub fn from_store(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0, 0)?;
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} encoder tensors, found {}",
                model.params.len(),
                store.len()
            )));
        }
        for p in store.iter() {
            model.params.set(&p.name, (*p.value).clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Switches the representation layer without touching any weights.
    pub fn set_rep_layer(&mut self, rep_layer: RepLayer) {
        self.config.rep_layer = rep_layer;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.q.adapter.is_some())
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.params.by_slot(self.embedding)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t, '_> {
        BoundEncoder {
            model: self,
            params: self.params.bind(tape),
            tape,
        }
    }

    /// Like [`EncoderModel::bind`], but the listed slots use the given vars.
    pub fn bind_with<'t>(&self, tape: &'t Tape, overrides: &[(usize, Var<'t>)]) -> BoundEncoder<'t, '_> {
        BoundEncoder {
            model: self,
            params: self.params.bind_with(tape, overrides),
            tape,
        }
    }

    /// Convenience: representation of a token sequence on a throwaway tape.
    pub fn represent(&self, ids: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let z = self.bind(&tape).encode_tokens(ids)?;
        Ok((*z.value()).clone())
    }
}

/// An [`EncoderModel`] whose parameters are recorded on a tape.
pub struct BoundEncoder<'t, 'm> {
    model: &'m EncoderModel,
    params: BoundParams<'t>,
    tape: &'t Tape,
}

impl<'t> BoundEncoder<'t, '_> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &BoundParams<'t> {
        &self.params
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    fn check_length(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        if len > self.model.config.max_seq_len {
            return Err(Error::Length {
                len,
                max: self.model.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Embedding rows for `ids`, shape [L×d].
    pub fn embed(&self, ids: &[usize]) -> Result<Var<'t>> {
        self.check_length(ids.len())?;
        self.params.var(self.model.embedding).gather_rows(ids)
    }

    /// Hidden states `h_0` (the input) through `h_n` (last block output, before
    /// the final normalization), each [L×d].
    pub fn hidden_states(&self, embeds: Var<'t>) -> Result<Vec<Var<'t>>> {
        let cfg = &self.model.config;
        let shape = embeds.shape();
        if shape.len() != 2 || shape[1] != cfg.embed_dim {
            return Err(Error::shape("encode_embeddings", &shape, &[0, cfg.embed_dim]));
        }
        self.check_length(shape[0])?;
        let mut states = Vec::with_capacity(cfg.n_layers + 1);
        let mut h = embeds;
        states.push(h);
        for block in &self.model.blocks {
            h = self.block_forward(block, h)?;
            states.push(h);
        }
        Ok(states)
    }

    fn block_forward(&self, block: &Block, h: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let n = h.rms_norm();
        let q = block.q.bind(&self.params).forward(n)?;
        let k = block.k.bind(&self.params).forward(n)?;
        let v = block.v.bind(&self.params).forward(n)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = q.slice_cols(head * dh, dh)?;
            let kh = k.slice_cols(head * dh, dh)?;
            let vh = v.slice_cols(head * dh, dh)?;
            let weights = qh.matmul_t(kh)?.scale(inv_sqrt).causal_softmax()?;
            heads.push(weights.matmul(vh)?);
        }
        let attn = block.o.bind(&self.params).forward(concat_cols(&heads)?)?;
        let h = h.add(attn)?;

        let n = h.rms_norm();
        let gate = n.matmul_t(self.params.var(block.gate))?.silu();
        let up = n.matmul_t(self.params.var(block.up))?;
        let mlp = gate.mul(up)?.matmul_t(self.params.var(block.down))?;
        h.add(mlp)
    }

    /// Last-position representation of an embedded sequence, shape [d].
    pub fn encode_embeddings(&self, embeds: Var<'t>) -> Result<Var<'t>> {
        let states = self.hidden_states(embeds)?;
        let last = embeds.shape()[0] - 1;
        match self.model.config.rep_layer {
            RepLayer::Final => states[states.len() - 1].rms_norm().row(last),
            RepLayer::Penultimate => states[states.len() - 2].row(last),
        }
    }

    pub fn encode_tokens(&self, ids: &[usize]) -> Result<Var<'t>> {
        let embeds = self.embed(ids)?;
        self.encode_embeddings(embeds)
    }
}
