use lleb::metrics::{auroc, ece, epistemic_variance, predictive, ECE_BINS};
use lleb::rng;
use proptest::prelude::*;
use rand::Rng;

mod common;
use common::auroc_oracle;

fn prob_row(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn calibrated_labels_give_small_ece() {
    let mut r = rng::seeded(0);
    let n = 100_000;
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p = prob_row(&[
            r.random::<f64>() + 0.01,
            r.random::<f64>() + 0.01,
            r.random::<f64>() + 0.01,
        ]);
        let u: f64 = r.random();
        let y = if u < p[0] {
            0
        } else if u < p[0] + p[1] {
            1
        } else {
            2
        };
        probs.push(p);
        labels.push(y);
    }
    assert!(ece(&probs, &labels, ECE_BINS).unwrap() < 0.01);
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // A coarse grid makes ties common.
    prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 10.0), 1..30)
}

proptest! {
    #[test]
    fn auroc_matches_enumeration_and_is_antisymmetric(a in scores(), b in scores()) {
        let x = auroc(&a, &b).unwrap();
        prop_assert_eq!(x, auroc_oracle(&a, &b));
        prop_assert_eq!(x + auroc(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn auroc_is_invariant_to_increasing_maps(a in scores(), b in scores()) {
        let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&a, &b).unwrap(), auroc(&f(&a), &f(&b)).unwrap());
    }

    #[test]
    fn predictive_is_permutation_equivariant(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..8),
        seed in 0u64..1000,
    ) {
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| prob_row(r)).collect();
        let mut shuffled = rows.clone();
        let perm = rng::permutation(&mut rng::seeded(seed), rows.len());
        for (i, &p) in perm.iter().enumerate() {
            shuffled[i] = rows[p].clone();
        }
        let (a, b) = (predictive(&rows).unwrap(), predictive(&shuffled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ece_ignores_dataset_order(
        raw in prop::collection::vec((prop::collection::vec(0.01f64..1.0, 3), 0usize..3), 1..40),
        seed in 0u64..1000,
    ) {
        let probs: Vec<Vec<f64>> = raw.iter().map(|(r, _)| prob_row(r)).collect();
        let labels: Vec<usize> = raw.iter().map(|(_, y)| *y).collect();
        let perm = rng::permutation(&mut rng::seeded(seed), probs.len());
        let p2: Vec<Vec<f64>> = perm.iter().map(|&i| probs[i].clone()).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (a, b) = (ece(&probs, &labels, 15).unwrap(), ece(&p2, &l2, 15).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn epistemic_variance_ignores_class_relabeling(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..8),
    ) {
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| prob_row(r)).collect();
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[2], r[0], r[3], r[1]]).collect();
        prop_assert!((epistemic_variance(&rows) - epistemic_variance(&permuted)).abs() < 1e-12);
    }
}
