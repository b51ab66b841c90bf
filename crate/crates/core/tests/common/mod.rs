//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod autodiff;
pub mod laplace;

/// Regroups `out[s][i]` from `prob_rows` into per-input sample rows `[i][s]`.
pub fn per_input(rows: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    (0..rows[0].len())
        .map(|i| rows.iter().map(|s| s[i].clone()).collect())
        .collect()
}

/// Brute-force pair enumeration with ties worth one half.
pub fn auroc_oracle(inn: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in inn {
        for b in ood {
            s += if b > a {
                1.0
            } else if b == a {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (inn.len() * ood.len()) as f64
}

pub mod flows {
    use lleb::flow::{standard_normal_log_prob, FlowConfig, NeuralSplineFlow};
    use lleb::rng::{self, Prng};
    use lleb::Tensor;
    use nalgebra::DMatrix;

    /// Noise of this size on every flow parameter moves samples by about one
    /// standard deviation while keeping per-dimension log-dets within about 1.
    /// Much larger noise gives flows that contract regions by e^-8 per
    /// coordinate, where round trips lose digits to conditioning, not to bugs.
    pub const RANDOM_FLOW_SCALE: f64 = 0.03;

    pub fn random_flow(d: usize, seed: u64, scale: f64) -> NeuralSplineFlow {
        let mut rng = rng::seeded(seed);
        let mut f = NeuralSplineFlow::new(d, &FlowConfig::default(), &mut rng).unwrap();
        f.perturb(&mut rng, scale);
        f
    }

    pub fn randn(rng: &mut Prng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], rng::normal_vec(rng, n * d)).unwrap()
    }

    /// `(|estimate - d ln(2 pi e) / 2|, MC standard error)` for the
    /// identity flow; the standard error comes from the same draws.
    pub fn identity_entropy_gap(d: usize, n: usize, seed: u64) -> (f64, f64) {
        let f = NeuralSplineFlow::new(d, &FlowConfig::default(), &mut rng::seeded(0)).unwrap();
        let est = f.entropy_estimate(n, &mut rng::seeded(seed)).unwrap();
        let (_, log_q) = f.sample(n, &mut rng::seeded(seed)).unwrap();
        let mean = -log_q.iter().sum::<f64>() / n as f64;
        let var = log_q.iter().map(|v| (-v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let truth = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        ((est - truth).abs(), (var / n as f64).sqrt())
    }

    /// Max absolute round-trip error over `flows * per_flow` random pairs.
    pub fn worst_round_trip(d: usize, flows: u64, per_flow: usize) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..flows {
            let f = random_flow(d, 1000 * d as u64 + k, RANDOM_FLOW_SCALE);
            let mut rng = rng::seeded(k);
            // Spread inputs well into the tails, beyond the spline interval.
            let x = randn(&mut rng, per_flow, d).map(|v| 4.0 * v);
            let (y, _) = f.transform(&x).unwrap();
            let (back, _) = f.inverse(&y).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// `ln |det J|` of `z -> f(z)` by central differences.
    fn numeric_log_det(f: &NeuralSplineFlow, z: &[f64]) -> f64 {
        let d = z.len();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut plus = z.to_vec();
            plus[j] += h;
            let mut minus = z.to_vec();
            minus[j] -= h;
            let (yp, _) = f
                .transform(&Tensor::new(vec![1, d], plus).unwrap())
                .unwrap();
            let (ym, _) = f
                .transform(&Tensor::new(vec![1, d], minus).unwrap())
                .unwrap();
            for i in 0..d {
                jac[(i, j)] = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    pub fn worst_log_det_error(trials: u64) -> f64 {
        let mut worst = 0.0f64;
        for d in 1..=6 {
            for k in 0..trials {
                let f = random_flow(d, 50 + k, RANDOM_FLOW_SCALE);
                let mut rng = rng::seeded(k);
                let z = randn(&mut rng, 1, d);
                let (_, log_q) = f.transform(&z).unwrap();
                let log_det = standard_normal_log_prob(&z)[0] - log_q[0];
                // Relative error of |det| is |exp(delta) - 1| for a log gap delta.
                let gap = (log_det - numeric_log_det(&f, z.data())).abs();
                worst = worst.max(gap.exp_m1());
            }
        }
        worst
    }

    /// Trapezoid rule for `exp(log q)` over `[-30, 30]` with `n` points.
    pub fn density_mass_1d(f: &NeuralSplineFlow, n: usize) -> f64 {
        let (a, b) = (-30.0, 30.0);
        let h = (b - a) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| a + i as f64 * h).collect();
        let lp = f.log_prob(&Tensor::new(vec![n, 1], grid).unwrap()).unwrap();
        let inner: f64 = lp.iter().map(|v| v.exp()).sum();
        h * (inner - 0.5 * (lp[0].exp() + lp[n - 1].exp()))
    }
}
