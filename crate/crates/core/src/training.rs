//! AdamW with linear learning-rate decay, epoch loop with validation-loss
//! model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, LabeledCorpus, Sample, Split};
use crate::error::{Error, Result};
use crate::learner::{Classifier, Learner, Method, HEAD_BIAS, HEAD_WEIGHT};
use crate::losses::{discriminative_loss, diversity_loss, match_loss_batch, LossWeights};
use crate::model::BoundEncoder;
use crate::numerics::{concat_rows, BoundParams, Gradients, ParamStore, Tape, Tensor, Var};
use crate::scoring::classify;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 25,
            batch_size: 16,
            lambda: 0.2,
            tau: 0.01,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            method: Method::SemanticMatching,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the tiny random-backbone encoder: a larger step
    /// size, since the default 1e-4 leaves the adapters nearly untouched in
    /// the few dozen steps a few-shot run takes, and a softer temperature
    /// picked on validation data.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            tau: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("AdamW betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            tau: self.tau,
        }
    }
}

/// `base_lr · (1 − step/total_steps)`.
pub fn lr_at_step(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Schedule {
            step,
            total: total_steps,
        });
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    /// Number of updates applied so far.
    pub step: u64,
    /// Keyed by parameter name; only trainable parameters get an entry.
    pub moments: BTreeMap<String, Moments>,
}

/// Advances the shared step counter; call once per update before
/// [`adamw_update`] on each parameter store.
pub fn adamw_begin_step(state: &mut AdamWState) {
    state.step += 1;
}

/// Decoupled weight decay followed by a bias-corrected Adam step, for every
/// trainable parameter of `store`. `grads[slot]` must hold a gradient for each
/// trainable slot.
pub fn adamw_update(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.step == 0 {
        return Err(Error::Optimizer("adamw_update before adamw_begin_step".into()));
    }
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let slots: Vec<usize> = store.trainable_slots().collect();
    for slot in slots {
        let name = store.iter().nth(slot).expect("slot").name.clone();
        let g = grads
            .get(slot)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Optimizer(format!("missing gradient for {name}")))?;
        let p = store.value_mut(slot);
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_update", p.shape(), g.shape()));
        }
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
        });
        let decay = 1.0 - lr * cfg.weight_decay;
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (mom.m.data_mut(), mom.v.data_mut());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] = pd[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Per-slot gradients of a bound store, in slot order.
fn collect_grads(store: &ParamStore, bound: &BoundParams<'_>, grads: &Gradients) -> Vec<Option<Tensor>> {
    (0..store.len())
        .map(|s| {
            if store.is_trainable(s) {
                bound.grad(grads, s).cloned()
            } else {
                None
            }
        })
        .collect()
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Matching term of the validation objective; `None` for a linear head.
    pub val_match: Option<f64>,
    pub val_diversity: Option<f64>,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Learner,
    /// Parameters after the last epoch.
    pub last: Learner,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
    pub total_steps: usize,
    /// Mean training objective over the whole train split before the first
    /// update and after the last one.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

/// Loss of a batch and the pieces needed to update parameters from it.
struct Objective<'t> {
    total: Var<'t>,
    matching: Option<f64>,
    diversity: Option<f64>,
    /// Predicted class per batch row.
    predictions: Vec<usize>,
}

fn objective<'t>(
    learner: &Learner,
    encoder: &BoundEncoder<'t, '_>,
    head: &BoundParams<'t>,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<Objective<'t>> {
    let targets: Vec<usize> = batch
        .iter()
        .map(|s| {
            s.class_index
                .ok_or_else(|| Error::State(format!("OOD sample {} in a training split", s.id)))
        })
        .collect::<Result<_>>()?;
    let reps: Vec<Var<'t>> = batch
        .iter()
        .map(|s| encoder.encode_tokens(&s.tokens))
        .collect::<Result<_>>()?;
    let z = concat_rows(&reps)?;
    match &learner.classifier {
        Classifier::Prototypes(protos) => {
            let p = protos.compute(encoder, head)?;
            let m = match_loss_batch(z, p, &targets, cfg.tau)?;
            let d = diversity_loss(p)?;
            let predictions = (0..batch.len())
                .map(|i| classify(&Tensor::vector(z.value().row(i).to_vec()), &p.value()))
                .collect::<Result<_>>()?;
            Ok(Objective {
                total: m.add(d.scale(cfg.lambda))?,
                matching: Some(m.item()),
                diversity: Some(d.item()),
                predictions,
            })
        }
        Classifier::Head(store) => {
            let w = head.var(store.slot(HEAD_WEIGHT).expect("head weight"));
            let b = head.var(store.slot(HEAD_BIAS).expect("head bias"));
            let loss = discriminative_loss(z, w, b, &targets)?;
            let logits = crate::losses::head_logits(z, w, b)?.value();
            let k = store.get(HEAD_BIAS).expect("head bias").numel();
            let predictions = (0..batch.len())
                .map(|i| crate::numerics::argmax(&logits.data()[i * k..(i + 1) * k]))
                .collect();
            Ok(Objective {
                total: loss,
                matching: None,
                diversity: None,
                predictions,
            })
        }
    }
}

/// Full-split objective and accuracy without gradient tracking.
pub fn evaluate_split(learner: &Learner, samples: &[&Sample], cfg: &TrainConfig) -> Result<(f64, Option<f64>, Option<f64>, f64)> {
    if samples.is_empty() {
        return Err(Error::State("cannot evaluate an empty split".into()));
    }
    let tape = Tape::new();
    let encoder = learner.encoder.bind(&tape);
    let head = learner.classifier.params().bind(&tape);
    let obj = objective(learner, &encoder, &head, samples, cfg)?;
    let correct = obj
        .predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| Some(**p) == s.class_index)
        .count();
    Ok((
        obj.total.item(),
        obj.matching,
        obj.diversity,
        correct as f64 / samples.len() as f64,
    ))
}

/// One optimizer update on `batch`; returns the batch loss before the update.
pub fn train_step(
    learner: &mut Learner,
    batch: &[&Sample],
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let (loss, enc_grads, head_grads) = {
        let encoder = learner.encoder.bind(&tape);
        let head = learner.classifier.params().bind(&tape);
        let obj = objective(learner, &encoder, &head, batch, cfg)?;
        let loss = obj.total.item();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: state.step as usize,
            });
        }
        let grads = tape.backward(obj.total)?;
        (
            loss,
            collect_grads(learner.encoder.params(), encoder.params(), &grads),
            collect_grads(learner.classifier.params(), &head, &grads),
        )
    };
    adamw_begin_step(state);
    adamw_update(learner.encoder.params_mut(), &enc_grads, state, lr, cfg)?;
    adamw_update(learner.classifier.params_mut(), &head_grads, state, lr, cfg)?;
    Ok(loss)
}

/// Trains `learner` on the train split of `corpus` and selects the epoch with
/// the lowest validation loss.
pub fn train(learner: Learner, corpus: &LabeledCorpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(learner, corpus, cfg, |_| {})
}

/// [`train`] with a callback invoked after each epoch's log record.
pub fn train_with(
    mut learner: Learner,
    corpus: &LabeledCorpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if learner.method() != cfg.method {
        return Err(Error::Config(format!(
            "learner is set up for {} but the config asks for {}",
            learner.method(),
            cfg.method
        )));
    }
    let train_set: Vec<&Sample> = corpus.split(Split::Train).collect();
    let val_set: Vec<&Sample> = corpus.split(Split::Val).collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::State("training needs non-empty train and val splits".into()));
    }
    let batch_size = cfg.batch_size.min(train_set.len());
    let steps_per_epoch = train_set.len().div_ceil(batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let initial_train_loss = evaluate_split(&learner, &train_set, cfg)?.0;
    let mut state = AdamWState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Learner, usize, f64)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train_set.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let (mut sum, mut lr) = (0.0, 0.0);
        for batch in order.chunks(batch_size) {
            lr = lr_at_step(state.step as usize, total_steps, cfg.lr)?;
            sum += train_step(&mut learner, batch, &mut state, lr, cfg)?;
        }
        let (val_loss, val_match, val_diversity, val_acc) = evaluate_split(&learner, &val_set, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                step: state.step as usize,
            });
        }
        let record = EpochLog {
            epoch,
            train_loss: sum / steps_per_epoch as f64,
            val_loss,
            val_match,
            val_diversity,
            lr,
            val_acc,
        };
        on_epoch(&record);
        log.push(record);
        if best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((learner.clone(), epoch, val_loss));
        }
    }
    let final_train_loss = evaluate_split(&learner, &train_set, cfg)?.0;
    let (best, best_epoch, best_val_loss) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        last: learner,
        best_epoch,
        best_val_loss,
        log,
        total_steps,
        initial_train_loss,
        final_train_loss,
    })
}
