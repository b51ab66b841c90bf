//! Laplace oracles: finite-difference Hessians and sample covariances.

use lleb::baselines::{ggn, laplace_from_features};
use lleb::nets::{Architecture, ClassifierParams, Layer};
use lleb::rng;
use nalgebra::DMatrix;

pub fn linear(h: usize, c: usize) -> Architecture {
    Architecture {
        input_shape: vec![h],
        layers: vec![
            Layer::Flatten,
            Layer::Linear {
                in_features: h,
                out_features: c,
            },
        ],
    }
}

/// Summed cross-entropy of a linear-softmax layer, `head = [W (h x c), b]`.
fn loss(features: &[f64], labels: &[usize], h: usize, c: usize, head: &[f64]) -> f64 {
    features
        .chunks(h)
        .zip(labels)
        .map(|(f, &y)| {
            let z: Vec<f64> = (0..c)
                .map(|k| head[h * c + k] + (0..h).map(|j| f[j] * head[j * c + k]).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
        })
        .sum()
}

fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> DMatrix<f64> {
    let d = x.len();
    let at = |i: usize, si: f64, j: usize, sj: f64| {
        let mut p = x.to_vec();
        p[i] += si * step;
        p[j] += sj * step;
        f(&p)
    };
    DMatrix::from_fn(d, d, |i, j| {
        (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0) + at(i, -1.0, j, -1.0))
            / (4.0 * step * step)
    })
}

pub fn ggn_vs_hessian_error() -> f64 {
    let (h, c) = (2, 2);
    let mut r = rng::seeded(3);
    let feats = rng::normal_vec(&mut r, 2 * 20);
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    // For linear-softmax the GGN equals the Hessian at any head, MAP or not.
    let head = rng::normal_vec(&mut r, h * c + c);
    let g = ggn(&feats, h, c, &head);
    let fd = fd_hessian(|p| loss(&feats, &labels, h, c, p), &head, 1e-4);
    (&g - &fd).norm() / fd.norm()
}

pub fn laplace_covariance_error(draws: usize) -> f64 {
    // One feature, two classes: d = 1 * 2 + 2 = 4.
    let p = ClassifierParams::init(&linear(1, 2), &mut rng::seeded(0)).unwrap();
    let feats = rng::normal_vec(&mut rng::seeded(1), 30);
    let post = laplace_from_features(&p, &feats, 1.0).unwrap();
    let heads = post.sample_heads(draws, &mut rng::seeded(2));
    let d = 4;
    let n = draws as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| heads.iter().map(|h| h[j]).sum::<f64>() / n)
        .collect();
    let sample = DMatrix::from_fn(d, d, |i, j| {
        heads
            .iter()
            .map(|h| (h[i] - mean[i]) * (h[j] - mean[j]))
            .sum::<f64>()
            / (n - 1.0)
    });
    let truth = post.covariance();
    (&sample - &truth).norm() / truth.norm()
}
