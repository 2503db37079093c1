//! Brute-force reference implementations shared by the integration tests and
//! the acceptance suite. Each one follows the plain definition with no sorting
//! tricks, so it shares no code path with the library.
#![allow(dead_code)]

use protomatch::metrics::ScoredSample;
use rand::Rng;

/// Pair counting: every (ID, OOD) pair, ties worth one half.
pub fn auroc(samples: &[ScoredSample]) -> f64 {
    let (mut half_wins, mut pairs) = (0u64, 0u64);
    for a in samples.iter().filter(|s| s.is_id) {
        for b in samples.iter().filter(|s| !s.is_id) {
            pairs += 1;
            half_wins += if a.score > b.score {
                2
            } else if a.score == b.score {
                1
            } else {
                0
            };
        }
    }
    (half_wins as f64 / 2.0) / pairs as f64
}

/// Exhaustive sweep over every observed score as a candidate threshold; keeps
/// the largest one whose ID acceptance rate reaches the target.
pub fn far_at_tpr(samples: &[ScoredSample], target: f64) -> (f64, f64) {
    let n_id = samples.iter().filter(|s| s.is_id).count();
    let n_ood = samples.len() - n_id;
    let mut best: Option<f64> = None;
    for t in samples.iter().map(|s| s.score) {
        let tpr = samples.iter().filter(|s| s.is_id && s.score >= t).count() as f64 / n_id as f64;
        if tpr >= target && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the lowest score always qualifies");
    let far = samples.iter().filter(|s| !s.is_id && s.score >= t).count() as f64 / n_ood as f64;
    (far, t)
}

/// Average precision: for each ID sample, the precision of the set of samples
/// scoring at least as high; averaged in descending score order.
pub fn average_precision(samples: &[ScoredSample]) -> f64 {
    let mut positives: Vec<f64> = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
    positives.sort_by(|a, b| b.total_cmp(a));
    let mut sum = 0.0;
    for &t in &positives {
        let tp = samples.iter().filter(|s| s.is_id && s.score >= t).count();
        let all = samples.iter().filter(|s| s.score >= t).count();
        sum += tp as f64 / all as f64;
    }
    sum / positives.len() as f64
}

pub fn accuracy(samples: &[ScoredSample]) -> f64 {
    let id: Vec<_> = samples.iter().filter(|s| s.is_id).collect();
    id.iter().filter(|s| s.predicted_class == s.true_class).count() as f64 / id.len() as f64
}

/// Random scored set of at most `max_len` samples with both classes present.
/// Scores come from a coarse grid so ties are common.
pub fn random_scored_set(rng: &mut impl Rng, max_len: usize) -> Vec<ScoredSample> {
    let n = rng.random_range(2..=max_len);
    let levels = rng.random_range(2..=20);
    let mut out: Vec<ScoredSample> = (0..n)
        .map(|_| {
            let score = rng.random_range(0..levels) as f64 / levels as f64 * 2.0 - 1.0;
            if rng.random_bool(0.5) {
                let truth = rng.random_range(0..4);
                let pred = if rng.random_bool(0.6) { truth } else { rng.random_range(0..4) };
                ScoredSample::id(score, pred, truth)
            } else {
                ScoredSample::ood(score)
            }
        })
        .collect();
    out[0] = ScoredSample::id(out[0].score, 0, 0);
    out[1] = ScoredSample::ood(out[1].score);
    out
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `(1/K²) Σ_{i≠j} cos(p_i, p_j)²` by direct double loop.
pub fn diversity(p: &[Vec<f64>]) -> f64 {
    let k = p.len();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                s += cos(&p[i], &p[j]).powi(2);
            }
        }
    }
    s / (k * k) as f64
}

/// `−log(exp(c_t/τ) / Σ_k exp(c_k/τ))` evaluated literally, in a form that
/// cannot overflow: the numerator term is divided through first.
pub fn match_loss(z: &[f64], p: &[Vec<f64>], target: usize, tau: f64) -> f64 {
    let ct = cos(z, &p[target]);
    let denom: f64 = p.iter().map(|pk| ((cos(z, pk) - ct) / tau).exp()).sum();
    denom.ln()
}
