//! Library metrics and losses against the brute-force references.

mod common;

use protomatch::losses::{diversity_loss, match_loss};
use protomatch::metrics::{aupr, auroc, evaluate, far_at_tpr, id_accuracy};
use protomatch::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_equal_brute_force_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let set = common::random_scored_set(&mut rng, 50);
        assert_eq!(auroc(&set).unwrap(), common::auroc(&set));
        assert_eq!(far_at_tpr(&set, 0.95).unwrap(), common::far_at_tpr(&set, 0.95));
        assert_eq!(aupr(&set).unwrap(), common::average_precision(&set));
        assert_eq!(id_accuracy(&set).unwrap(), common::accuracy(&set));
        let target = rng.random_range(0.05..=1.0);
        assert_eq!(far_at_tpr(&set, target).unwrap(), common::far_at_tpr(&set, target));
    }
}

#[test]
fn report_bundles_the_individual_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let set = common::random_scored_set(&mut rng, 40);
    let r = evaluate(&set).unwrap();
    assert_eq!(r.auroc, common::auroc(&set));
    assert_eq!((r.far_at_95, r.threshold_at_95), common::far_at_tpr(&set, 0.95));
    assert_eq!(r.n_id + r.n_ood, set.len());
}

fn random_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn losses_equal_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let (k, d) = (rng.random_range(1..7), rng.random_range(2..9));
        let p = random_rows(&mut rng, k, d);
        let z = random_rows(&mut rng, 1, d).remove(0);
        let tau = [0.01, 0.05, 0.1, 1.0][rng.random_range(0..4)];
        let target = rng.random_range(0..k);

        let tape = Tape::new();
        let pv = tape.constant(Tensor::from_rows(&p).unwrap());
        let zv = tape.constant(Tensor::vector(z.clone()).reshape(&[1, d]).unwrap());
        let div = diversity_loss(pv).unwrap().item();
        assert!((div - common::diversity(&p)).abs() < 1e-12);
        let m = match_loss(zv, pv, target, tau).unwrap().item();
        let want = common::match_loss(&z, &p, target, tau);
        assert!((m - want).abs() <= 1e-9 * want.abs().max(1.0), "{m} vs {want}");
    }
}
