//! Exact evaluation metrics with ID as the positive class.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<usize>,
}

impl ScoredSample {
    pub fn id(score: f64, predicted: usize, truth: usize) -> Self {
        Self {
            score,
            is_id: true,
            predicted_class: Some(predicted),
            true_class: Some(truth),
        }
    }

    pub fn ood(score: f64) -> Self {
        Self {
            score,
            is_id: false,
            predicted_class: None,
            true_class: None,
        }
    }

    /// Score-only sample, for the OOD metrics that ignore class predictions.
    pub fn bare(score: f64, is_id: bool) -> Self {
        Self {
            score,
            is_id,
            predicted_class: None,
            true_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id_acc: f64,
    pub auroc: f64,
    pub far_at_95: f64,
    pub aupr: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold_at_95: f64,
}

pub const CSV_HEADER: &str = "shot,method,seed,id_acc,auroc,far95,aupr";

impl MetricReport {
    pub fn csv_row(&self, shot: &str, method: &str, seed: &str) -> String {
        format!(
            "{shot},{method},{seed},{},{},{},{}",
            self.id_acc, self.auroc, self.far_at_95, self.aupr
        )
    }
}

/// All four metrics at the 95% TPR operating point.
pub fn evaluate(samples: &[ScoredSample]) -> Result<MetricReport> {
    let (far_at_95, threshold_at_95) = far_at_tpr(samples, 0.95)?;
    Ok(MetricReport {
        id_acc: id_accuracy(samples)?,
        auroc: auroc(samples)?,
        far_at_95,
        aupr: aupr(samples)?,
        n_id: samples.iter().filter(|s| s.is_id).count(),
        n_ood: samples.iter().filter(|s| !s.is_id).count(),
        threshold_at_95,
    })
}

fn check_scores(samples: &[ScoredSample]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {}", s.score)));
    }
    Ok(())
}

fn split_scores(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_scores(samples)?;
    let (id, ood): (Vec<&ScoredSample>, Vec<&ScoredSample>) = samples.iter().partition(|s| s.is_id);
    if id.is_empty() || ood.is_empty() {
        return Err(Error::MetricUndefined(format!(
            "need at least one ID and one OOD sample, got {} and {}",
            id.len(),
            ood.len()
        )));
    }
    Ok((
        id.iter().map(|s| s.score).collect(),
        ood.iter().map(|s| s.score).collect(),
    ))
}

/// Indices sorted by descending score.
fn descending(samples: &[ScoredSample]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[b]
            .score
            .partial_cmp(&samples[a].score)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Consecutive tie blocks of a descending order, as (n_id, n_ood) counts.
fn tie_blocks(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for i in descending(samples) {
        let s = &samples[i];
        match blocks.last_mut() {
            Some(b) if b.0 == s.score => {
                if s.is_id {
                    b.1 += 1
                } else {
                    b.2 += 1
                }
            }
            _ => blocks.push((s.score, s.is_id as usize, (!s.is_id) as usize)),
        }
    }
    blocks
}

/// Probability that a random ID sample outscores a random OOD one, ties ½.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (id, ood) = split_scores(samples)?;
    // Walk tie blocks from low to high, counting OOD scores strictly below.
    let mut blocks = tie_blocks(samples);
    blocks.reverse();
    let (mut ood_below, mut wins) = (0usize, 0.0f64);
    for (_, n_id, n_ood) in blocks {
        wins += n_id as f64 * (ood_below as f64 + 0.5 * n_ood as f64);
        ood_below += n_ood;
    }
    Ok(wins / (id.len() as f64 * ood.len() as f64))
}

/// FAR at the largest threshold keeping at least `tpr_target` of ID samples.
/// Returns `(far, threshold)`.
pub fn far_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<(f64, f64)> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Config(format!(
            "tpr target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let (mut id, ood) = split_scores(samples)?;
    id.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let n = id.len();
    let k = (1..=n)
        .find(|&k| k as f64 / n as f64 >= tpr_target)
        .unwrap_or(n);
    let threshold = id[k - 1];
    let accepted = ood.iter().filter(|&&s| s >= threshold).count();
    Ok((accepted as f64 / ood.len() as f64, threshold))
}

/// Step-wise average precision; tied scores enter as one block.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let positives = samples.iter().filter(|s| s.is_id).count();
    if positives == 0 {
        return Err(Error::MetricUndefined("AUPR needs at least one ID sample".into()));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0f64);
    for (_, n_id, n_ood) in tie_blocks(samples) {
        tp += n_id;
        fp += n_ood;
        // One term per recalled positive, so the sum has a fixed order.
        let precision = tp as f64 / (tp + fp) as f64;
        for _ in 0..n_id {
            ap += precision;
        }
    }
    Ok(ap / positives as f64)
}

/// Fraction of ID samples classified correctly; OOD rows are ignored.
pub fn id_accuracy(samples: &[ScoredSample]) -> Result<f64> {
    let (mut n, mut correct) = (0usize, 0usize);
    for s in samples.iter().filter(|s| s.is_id) {
        match (s.predicted_class, s.true_class) {
            (Some(p), Some(t)) => {
                n += 1;
                correct += (p == t) as usize;
            }
            _ => {
                return Err(Error::Input(
                    "ID sample without predicted and true class".into(),
                ))
            }
        }
    }
    if n == 0 {
        return Err(Error::MetricUndefined("accuracy needs at least one ID sample".into()));
    }
    Ok(correct as f64 / n as f64)
}

/// ROC polyline `(FAR, TPR)` from the exact threshold sweep, starting at (0, 0).
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>> {
    let (id, ood) = split_scores(samples)?;
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, a, b) in tie_blocks(samples) {
        tp += a;
        fp += b;
        points.push((fp as f64 / n_ood, tp as f64 / n_id));
    }
    Ok(points)
}

/// PR points `(recall, precision)`, one per tie block.
pub fn pr_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>> {
    let (id, _) = split_scores(samples)?;
    let n_id = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (_, a, b) in tie_blocks(samples) {
        tp += a;
        fp += b;
        points.push((tp as f64 / n_id, tp as f64 / (tp + fp) as f64));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(id: &[f64], ood: &[f64]) -> Vec<ScoredSample> {
        id.iter()
            .map(|&s| ScoredSample::bare(s, true))
            .chain(ood.iter().map(|&s| ScoredSample::bare(s, false)))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.5], &[0.5])).unwrap(), 0.5);
        assert_eq!(auroc(&set(&[0.9, 0.3], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(matches!(auroc(&set(&[0.5], &[])), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn far_examples() {
        assert_eq!(far_at_tpr(&set(&[0.9, 0.8], &[0.2, 0.1]), 0.95).unwrap().0, 0.0);
        let id: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
        let (far, t) = far_at_tpr(&set(&id, &[0.12, 0.08, 0.04]), 0.95).unwrap();
        assert_eq!(t, id[1]);
        assert!((far - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(far_at_tpr(&set(&[0.4; 3], &[0.4; 2]), 0.95).unwrap().0, 1.0);
        assert!(far_at_tpr(&set(&[0.4], &[0.1]), 0.0).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&set(&[0.9, 0.8], &[0.2])).unwrap(), 1.0);
        assert_eq!(aupr(&set(&[0.9], &[0.8])).unwrap(), 1.0);
        let v = aupr(&set(&[0.9, 0.4], &[0.6])).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(aupr(&set(&[], &[0.3])), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn accuracy_examples() {
        let all = vec![ScoredSample::id(0.5, 1, 1), ScoredSample::id(0.4, 0, 0)];
        assert_eq!(id_accuracy(&all).unwrap(), 1.0);
        let mut half = vec![
            ScoredSample::id(0.5, 1, 1),
            ScoredSample::id(0.4, 0, 1),
            ScoredSample::id(0.4, 2, 2),
            ScoredSample::id(0.4, 2, 3),
        ];
        assert_eq!(id_accuracy(&half).unwrap(), 0.5);
        half.push(ScoredSample::ood(0.9));
        half.push(ScoredSample::ood(0.1));
        assert_eq!(id_accuracy(&half).unwrap(), 0.5);
        assert!(matches!(
            id_accuracy(&[ScoredSample::ood(0.2)]),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn report_row_layout() {
        let samples = vec![
            ScoredSample::id(0.9, 0, 0),
            ScoredSample::id(0.8, 1, 0),
            ScoredSample::ood(0.1),
        ];
        let r = evaluate(&samples).unwrap();
        assert_eq!(r.csv_row("5", "semantic-matching", "1"), "5,semantic-matching,1,0.5,1,0,1");
        assert_eq!((r.n_id, r.n_ood), (2, 1));
        let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn roc_curve_ends_at_one() {
        let pts = roc_curve(&set(&[0.9, 0.3], &[0.5, 0.1])).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    fn scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
        // Coarse grid so ties are frequent.
        prop::collection::vec(((0u32..20).prop_map(|x| x as f64 / 20.0), any::<bool>()), 2..40)
            .prop_filter("both classes", |v| v.iter().any(|s| s.1) && v.iter().any(|s| !s.1))
    }

    proptest! {
        #[test]
        fn auroc_monotone_transform_and_flip(v in scores()) {
            let base: Vec<ScoredSample> = v.iter().map(|&(s, id)| ScoredSample::bare(s, id)).collect();
            let a = auroc(&base).unwrap();
            let mapped: Vec<ScoredSample> = v.iter().map(|&(s, id)| ScoredSample::bare((3.0 * s).exp() - 7.0, id)).collect();
            prop_assert_eq!(auroc(&mapped).unwrap(), a);
            let flipped: Vec<ScoredSample> = v.iter().map(|&(s, id)| ScoredSample::bare(s, !id)).collect();
            // Holds with ties too, since ties contribute ½ to both sides.
            prop_assert!((auroc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        }

        #[test]
        fn far_non_increasing_as_target_drops(v in scores(), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
            let s: Vec<ScoredSample> = v.iter().map(|&(s, id)| ScoredSample::bare(s, id)).collect();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(far_at_tpr(&s, lo).unwrap().0 <= far_at_tpr(&s, hi).unwrap().0);
        }
    }
}
