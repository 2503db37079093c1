//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Each case builds a scalar function of a few tensors. The analytic gradient
//! comes from one backward pass; the numeric one from `(f(x+h) − f(x−h)) / 2h`
//! evaluated on fresh tapes with every input held constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{diversity_loss, discriminative_loss, joint_loss, match_loss_batch};
use crate::model::{BoundLinear, EncoderConfig, EncoderModel, RepLayer};
use crate::numerics::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub case: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub worst_abs_err: f64,
    pub passed: bool,
}

/// Worst-case comparison of analytic and numeric gradients of `f` at `inputs`.
///
/// A coordinate passes when its absolute error is below [`ABS_TOL`] or its
/// relative error is below [`REL_TOL`].
pub fn compare<F>(inputs: &[Tensor], f: F) -> Result<(f64, f64, bool)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let (mut worst_rel, mut worst_abs, mut ok) = (0.0f64, 0.0f64, true);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param grad").clone();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            if abs > ABS_TOL {
                worst_rel = worst_rel.max(rel);
                ok &= rel < REL_TOL;
            }
            worst_abs = worst_abs.max(abs);
        }
    }
    Ok((worst_rel, worst_abs, ok))
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<(f64, f64, bool)>;

/// Every differentiable building block, one entry per case.
pub const CASES: &[(&str, CaseFn)] = &[
    ("matmul", case_matmul),
    ("matmul_t", case_matmul_t),
    ("cosine", case_cosine),
    ("rms_norm+silu", case_norm_silu),
    ("attention", case_attention),
    ("lora_forward", case_lora),
    ("diversity_loss", case_diversity),
    ("match_loss", case_match),
    ("joint_loss", case_joint),
    ("discriminative_loss", case_discriminative),
    ("encoder", case_encoder),
];

/// Runs `instances` seeded draws of every case.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (idx, (case, f)) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64 * 7919));
        let (mut rel, mut abs, mut ok) = (0.0f64, 0.0f64, true);
        for _ in 0..instances {
            let (r, a, pass) = f(&mut rng)?;
            rel = rel.max(r);
            abs = abs.max(a);
            ok &= pass;
        }
        out.push(CheckOutcome {
            case,
            instances,
            worst_rel_err: rel,
            worst_abs_err: abs,
            passed: ok,
        });
    }
    Ok(out)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Contracts an output with a fixed random tensor so every coordinate matters.
fn project<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = out.tape().constant(weights.clone().reshape(&out.shape())?);
    Ok(out.mul(w)?.sum())
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let r = randn(rng, &[3, 2]);
    compare(&[randn(rng, &[3, 4]), randn(rng, &[4, 2])], |_, v| {
        project(v[0].matmul(v[1])?, &r)
    })
}

fn case_matmul_t(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let r = randn(rng, &[3, 5]);
    compare(&[randn(rng, &[3, 4]), randn(rng, &[5, 4])], |_, v| {
        project(v[0].matmul_t(v[1])?, &r)
    })
}

/// Gaussian rows rescaled to a root-mean-square in [0.5, 1.5]. Near the
/// origin cosines and normalizations bend too sharply for a step-1e-3
/// central difference.
fn rows_away_from_origin(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::Rng;
    let mut t = randn(rng, shape);
    let cols = *shape.last().expect("non-empty shape");
    for row in t.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let target = rng.random_range(0.5..1.5) * (cols as f64).sqrt();
        row.iter_mut().for_each(|x| *x *= target / norm);
    }
    t
}

fn case_cosine(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let r = randn(rng, &[3, 4]);
    let (a, b) = (rows_away_from_origin(rng, &[5]), rows_away_from_origin(rng, &[5]));
    let (rel1, abs1, ok1) = compare(&[a, b], |_, v| v[0].cosine(v[1]))?;
    let (p, q) = (rows_away_from_origin(rng, &[3, 5]), rows_away_from_origin(rng, &[4, 5]));
    let (rel2, abs2, ok2) = compare(&[p, q], |_, v| project(v[0].cosine_matrix(v[1])?, &r))?;
    Ok((rel1.max(rel2), abs1.max(abs2), ok1 && ok2))
}

fn case_norm_silu(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let r = randn(rng, &[3, 6]);
    compare(&[rows_away_from_origin(rng, &[3, 6])], |_, v| {
        project(v[0].rms_norm().silu(), &r)
    })
}

fn case_attention(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let r = randn(rng, &[4, 3]);
    compare(
        &[randn(rng, &[4, 3]), randn(rng, &[4, 3]), randn(rng, &[4, 3])],
        |_, v| {
            let scores = v[0].matmul_t(v[1])?.scale(1.0 / 3f64.sqrt());
            project(scores.causal_softmax()?.matmul(v[2])?, &r)
        },
    )
}

fn case_lora(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let r = randn(rng, &[3, 5]);
    compare(
        &[
            randn(rng, &[3, 4]),
            randn(rng, &[5, 4]),
            randn(rng, &[2, 4]),
            randn(rng, &[5, 2]),
        ],
        |_, v| {
            let lin = BoundLinear {
                weight: v[1],
                adapter: Some((v[2], v[3], 1.5)),
            };
            project(lin.forward(v[0])?, &r)
        },
    )
}

fn case_diversity(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    compare(&[randn(rng, &[4, 5])], |_, v| diversity_loss(v[0]))
}

fn tau(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    rng.random_range(0.1..1.0)
}

fn case_match(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let t = tau(rng);
    compare(&[randn(rng, &[3, 5]), randn(rng, &[4, 5])], |_, v| {
        match_loss_batch(v[0], v[1], &[0, 3, 1], t)
    })
}

fn case_joint(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    let t = tau(rng);
    compare(&[randn(rng, &[2, 5]), randn(rng, &[3, 5])], |_, v| {
        let m = match_loss_batch(v[0], v[1], &[2, 0], t)?;
        joint_loss(m, diversity_loss(v[1])?, 0.2)
    })
}

fn case_discriminative(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    compare(
        &[randn(rng, &[3, 5]), randn(rng, &[4, 5]), randn(rng, &[4])],
        |_, v| discriminative_loss(v[0], v[1], v[2], &[1, 3, 0]),
    )
}

fn case_encoder(rng: &mut ChaCha8Rng) -> Result<(f64, f64, bool)> {
    use rand::Rng;
    let config = EncoderConfig {
        vocab_size: 10,
        embed_dim: 8,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        lora_rank: 2,
        lora_alpha: 2.0,
        max_seq_len: 8,
        rep_layer: RepLayer::Final,
    };
    let mut model = EncoderModel::new(config, rng.random(), rng.random())?;
    // Larger-than-init weights so every path carries signal, small enough
    // that the step-1e-3 central difference stays accurate.
    let slots: Vec<usize> = (0..model.params().len()).collect();
    for s in slots {
        let shape = model.params().by_slot(s).shape().to_vec();
        *model.params_mut().value_mut(s) = Tensor::randn(&shape, 0.25, rng);
    }
    let lora: Vec<(usize, Tensor)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, p)| (i, (*p.value).clone()))
        .collect();
    let target = randn(rng, &[8]);
    let mut inputs = vec![rows_away_from_origin(rng, &[4, 8])];
    inputs.extend(lora.iter().map(|(_, t)| t.clone()));
    compare(&inputs, |tape, v| {
        let overrides: Vec<(usize, Var<'_>)> =
            lora.iter().map(|(s, _)| *s).zip(v[1..].iter().copied()).collect();
        let z = model.bind_with(tape, &overrides).encode_embeddings(v[0])?;
        z.cosine(tape.constant(target.clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_agrees() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let (_, _, ok) = compare(std::slice::from_ref(&x), |_, v| Ok(v[0].square().sum())).unwrap();
        assert!(ok);
    }

    #[test]
    fn every_case_passes_a_few_draws() {
        for outcome in run_suite(2, 99).unwrap() {
            assert!(outcome.passed, "{outcome:?}");
        }
    }
}
