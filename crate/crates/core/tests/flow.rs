use lleb::autodiff::Graph;
use lleb::flow::{FlowConfig, NeuralSplineFlow};
use lleb::rng;
use lleb::Tensor;
use rand::Rng;

mod common;
use common::flows::{
    density_mass_1d, identity_entropy_gap, randn, random_flow, worst_log_det_error,
    worst_round_trip,
};
#[test]
fn forward_then_inverse_is_identity() {
    for d in [1, 2, 8, 32] {
        let err = worst_round_trip(d, 40, 250);
        assert!(err < 1e-6, "d = {d}: {err:.3e}");
    }
}

#[test]
fn log_det_matches_numerical_jacobian() {
    let err = worst_log_det_error(5);
    assert!(err < 1e-3, "{err:.3e}");
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    for seed in 0..3 {
        let f = random_flow(1, seed, 0.05);
        let mass = density_mass_1d(&f, 100_000);
        assert!((mass - 1.0).abs() < 1e-3, "seed {seed}: {mass}");
    }
}

fn identity_flow(d: usize) -> NeuralSplineFlow {
    NeuralSplineFlow::new(d, &FlowConfig::default(), &mut rng::seeded(0)).unwrap()
}

#[test]
fn identity_flow_entropy_within_three_standard_errors() {
    for d in [1, 3] {
        let (gap, se) = identity_entropy_gap(d, 100_000, d as u64);
        assert!(gap < 3.0 * se, "d = {d}: {gap} vs {se}");
    }
}

#[test]
fn identity_flow_sample_mean() {
    let n = 100_000;
    let (theta, _) = identity_flow(2).sample(n, &mut rng::seeded(3)).unwrap();
    for j in 0..2 {
        let mean = (0..n).map(|i| theta.at(i, j)).sum::<f64>() / n as f64;
        assert!(
            mean.abs() < 3.0 / (n as f64).sqrt(),
            "coordinate {j}: {mean}"
        );
    }
}

#[test]
fn sampling_is_reproducible() {
    let f = random_flow(3, 9, 0.1);
    let a = f.sample(50, &mut rng::seeded(4)).unwrap();
    let b = f.sample(50, &mut rng::seeded(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn log_density_is_finite_everywhere() {
    let f = random_flow(4, 3, 0.3);
    let theta = Tensor::new(
        vec![3, 4],
        vec![
            0.0, 1e3, -1e3, 9.999, 1e8, -1e-8, 10.0, -10.0, 5.0, 5.0, -5.0, 0.5,
        ],
    )
    .unwrap();
    assert!(f.log_prob(&theta).unwrap().iter().all(|v| v.is_finite()));
}

/// `mean_s sum_j w_j theta_sj^2` at fixed base noise.
fn mc_objective(f: &NeuralSplineFlow, z: &Tensor, w: &Tensor) -> f64 {
    let (theta, _) = f.transform(z).unwrap();
    let s = z.rows();
    (0..s)
        .map(|i| {
            theta
                .row(i)
                .iter()
                .zip(w.data())
                .map(|(t, w)| w * t * t)
                .sum::<f64>()
        })
        .sum::<f64>()
        / s as f64
}

#[test]
fn reparameterization_gradient_matches_finite_differences() {
    let d = 5;
    let mut f = random_flow(d, 21, 0.1);
    let mut rng = rng::seeded(22);
    let z = randn(&mut rng, 8, d);
    let w = Tensor::vector(rng::normal_vec(&mut rng, d));

    let mut g = Graph::new();
    let ids = f.bind(&mut g, true);
    let draw = f.sample_graph(&mut g, &ids, &z).unwrap();
    let sq = g.mul(draw.theta, draw.theta).unwrap();
    let wc = g.constant(w.clone());
    let weighted = g.mul_bcast(sq, wc).unwrap();
    let total = g.sum(weighted).unwrap();
    let obj = g.scale(total, 1.0 / z.rows() as f64).unwrap();
    assert!((g.value(obj).item() - mc_objective(&f, &z, &w)).abs() < 1e-12);
    let grads = g.backward(obj).unwrap().collect(&ids).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (t, grad) in grads.iter().enumerate() {
        for _ in 0..6 {
            let i = rng.random_range(0..grad.numel());
            let orig = f.tensors()[t].data()[i];
            f.tensors_mut()[t].data_mut()[i] = orig + h;
            let up = mc_objective(&f, &z, &w);
            f.tensors_mut()[t].data_mut()[i] = orig - h;
            let down = mc_objective(&f, &z, &w);
            f.tensors_mut()[t].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max((grad.data()[i] - num).abs() / num.abs().max(1.0));
        }
    }
    assert!(worst < 1e-4, "{worst:.3e}");
}
