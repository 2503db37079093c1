//! Training objectives: prototype diversity, temperature-scaled matching, their
//! weighted sum, and cross-entropy over a linear head for the discriminative
//! baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the diversity term.
    pub lambda: f64,
    /// Softmax temperature of the matching term.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean squared off-diagonal cosine between prototype rows,
/// `(1/K²) Σ_i Σ_{j≠i} cos(p_i, p_j)²`. Exactly zero for a single prototype.
pub fn diversity_loss<'t>(prototypes: Var<'t>) -> Result<Var<'t>> {
    let shape = prototypes.shape();
    if shape.len() != 2 {
        return Err(Error::shape("diversity_loss", &shape, &[0, 0]));
    }
    let k = shape[0];
    let mut mask = Tensor::full(&[k, k], 1.0);
    for i in 0..k {
        mask.data_mut()[i * k + i] = 0.0;
    }
    let mask = prototypes.tape().constant(mask);
    let sq = prototypes.cosine_matrix(prototypes)?.square();
    Ok(sq.mul(mask)?.sum().scale(1.0 / (k * k) as f64))
}

/// Temperature-scaled logits `cos(z_b, p_k) / τ`, shape [B×K].
pub fn match_logits<'t>(z: Var<'t>, prototypes: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(z.cosine_matrix(prototypes)?.scale(1.0 / tau))
}

/// `−log softmax_k(cos(z, p_k)/τ)[target]` for one representation `z` [d].
pub fn match_loss<'t>(z: Var<'t>, prototypes: Var<'t>, target: usize, tau: f64) -> Result<Var<'t>> {
    match_loss_batch(z, prototypes, &[target], tau)
}

/// Mean matching loss over a batch of representations `z` [B×d].
pub fn match_loss_batch<'t>(
    z: Var<'t>,
    prototypes: Var<'t>,
    targets: &[usize],
    tau: f64,
) -> Result<Var<'t>> {
    match_logits(z, prototypes, tau)?.cross_entropy(targets)
}

/// `match + λ·diversity`.
pub fn joint_loss<'t>(matching: Var<'t>, diversity: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    let (m, d) = (matching.item(), diversity.item());
    if !m.is_finite() || !d.is_finite() || !lambda.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite joint loss input: match={m}, diversity={d}, lambda={lambda}"
        )));
    }
    matching.add(diversity.scale(lambda))
}

/// Mean softmax cross-entropy over `z·Wᵀ + b` with `W` [K×d] and `b` [K].
pub fn discriminative_loss<'t>(
    z: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    targets: &[usize],
) -> Result<Var<'t>> {
    head_logits(z, weight, bias)?.cross_entropy(targets)
}

/// Linear-head logits, shape [B×K].
pub fn head_logits<'t>(z: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let shape = z.shape();
    let z2 = if shape.len() == 1 {
        z.reshape(&[1, shape[0]])?
    } else {
        z
    };
    z2.matmul_t(weight)?.add_row(bias)
}
