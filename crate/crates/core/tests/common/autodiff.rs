//! Per-op gradient trials: every supported op against central differences.

use lleb::autodiff::{Graph, NodeId, OpKind};
use lleb::gradcheck::{finite_diff_check, ScalarFn};
use lleb::rng::{self, Prng};
use lleb::{Result, Tensor};
use rand::Rng;

pub const TRIALS: usize = 100;
pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

pub fn randn(rng: &mut Prng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(rng, n)).unwrap()
}

/// Uniform in `[lo, hi]` with random sign, kept away from zero.
fn away_from_zero(rng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(w * y)` for a fixed random `w`, so every output coordinate matters.
pub fn weighted(g: &mut Graph, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn dims(rng: &mut Prng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// Worst relative finite-difference error seen per op, in first-seen order.
#[derive(Default)]
pub struct Worst(pub Vec<(String, f64)>);

impl Worst {
    fn record(&mut self, name: &str, f: &impl ScalarFn, x: &Tensor) {
        let err = finite_diff_check(f, x, STEP).unwrap();
        match self.0.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => self.0.push((name.to_string(), err)),
        }
    }
}

/// Checks a unary op tag, mapping input shape to output weights.
fn unary_trials(
    worst: &mut Worst,
    kind: OpKind,
    make_x: impl Fn(&mut Prng) -> Tensor,
    out_shape: impl Fn(&[usize]) -> Vec<usize>,
) {
    let mut rng = rng::seeded(0xAD);
    for _ in 0..TRIALS {
        let x = make_x(&mut rng);
        let w = randn(&mut rng, &out_shape(x.shape()));
        let f = |g: &mut Graph, x: NodeId| {
            let y = g.apply(&kind, &[x])?;
            weighted(g, y, &w)
        };
        worst.record(&format!("{kind:?}"), &f, &x);
    }
}

fn same(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

pub fn elementwise_unary_ops(worst: &mut Worst) {
    let shape = |r: &mut Prng| {
        let (a, b) = dims(r);
        vec![a, b]
    };
    unary_trials(
        worst,
        OpKind::Relu,
        |r| {
            let s = shape(r);
            away_from_zero(r, &s, 0.05, 2.0)
        },
        same,
    );
    unary_trials(
        worst,
        OpKind::Exp,
        |r| {
            let s = shape(r);
            randn(r, &s)
        },
        same,
    );
    unary_trials(
        worst,
        OpKind::Log,
        |r| {
            let s = shape(r);
            away_from_zero(r, &s, 0.2, 3.0).map(f64::abs)
        },
        same,
    );
    let wide = |r: &mut Prng| {
        let s = shape(r);
        randn(r, &s).map(|v| 3.0 * v)
    };
    unary_trials(worst, OpKind::Softplus, wide, same);
    unary_trials(worst, OpKind::Sigmoid, wide, same);
}

pub fn reductions_and_shape_ops(worst: &mut Worst) {
    let mat = |r: &mut Prng| {
        let (a, b) = dims(r);
        randn(r, &[a, b])
    };
    unary_trials(worst, OpKind::Sum, mat, |_| vec![1]);
    unary_trials(worst, OpKind::Mean, mat, |_| vec![1]);
    unary_trials(
        worst,
        OpKind::LogSumExp,
        |r| mat(r).map(|v| 4.0 * v),
        |s| vec![s[0]],
    );
    unary_trials(worst, OpKind::Broadcast(3), mat, |s| [&[3][..], s].concat());
    unary_trials(
        worst,
        OpKind::Reshape(vec![4, 3]),
        |r| randn(r, &[2, 6]),
        |_| vec![4, 3],
    );
    unary_trials(
        worst,
        OpKind::Reshape(vec![12]),
        |r| randn(r, &[3, 4]),
        |_| vec![12],
    );
    unary_trials(
        worst,
        OpKind::Slice {
            axis: 1,
            start: 1,
            end: 3,
        },
        |r| randn(r, &[3, 4]),
        |_| vec![3, 2],
    );
    unary_trials(
        worst,
        OpKind::Slice {
            axis: 0,
            start: 0,
            end: 2,
        },
        |r| randn(r, &[3, 4]),
        |_| vec![2, 4],
    );
}

/// Gradient with respect to each operand of a binary op in turn.
fn binary_trials(worst: &mut Worst, kind: OpKind, make: impl Fn(&mut Prng) -> (Tensor, Tensor)) {
    let mut rng = rng::seeded(0xB1);
    for _ in 0..TRIALS {
        let (a, b) = make(&mut rng);
        let mut g = Graph::new();
        let (ca, cb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.apply(&kind, &[ca, cb]).unwrap();
        let out_shape = g.shape(out).to_vec();
        let w = randn(&mut rng, &out_shape);
        let left = |g: &mut Graph, x: NodeId| {
            let c = g.constant(b.clone());
            let y = g.apply(&kind, &[x, c])?;
            weighted(g, y, &w)
        };
        let right = |g: &mut Graph, x: NodeId| {
            let c = g.constant(a.clone());
            let y = g.apply(&kind, &[c, x])?;
            weighted(g, y, &w)
        };
        worst.record(&format!("{kind:?} lhs"), &left, &a);
        worst.record(&format!("{kind:?} rhs"), &right, &b);
    }
}

pub fn binary_ops(worst: &mut Worst) {
    let pair = |r: &mut Prng| {
        let (m, n) = dims(r);
        (randn(r, &[m, n]), randn(r, &[m, n]))
    };
    binary_trials(worst, OpKind::Add, pair);
    binary_trials(worst, OpKind::Sub, pair);
    binary_trials(worst, OpKind::Mul, pair);
    binary_trials(worst, OpKind::Add, |r| {
        let (m, n) = dims(r);
        (randn(r, &[m, n]), randn(r, &[n]))
    });
    binary_trials(worst, OpKind::MatMul, |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..5);
        (randn(r, &[m, k]), randn(r, &[k, n]))
    });
    binary_trials(worst, OpKind::Concat { axis: 0 }, |r| {
        let (m, n) = dims(r);
        let p = r.random_range(1..4);
        (randn(r, &[m, n]), randn(r, &[p, n]))
    });
    binary_trials(worst, OpKind::Concat { axis: 1 }, |r| {
        let (m, n) = dims(r);
        let p = r.random_range(1..4);
        (randn(r, &[m, n]), randn(r, &[m, p]))
    });
}

pub fn helper_ops(worst: &mut Worst) {
    let mut rng = rng::seeded(0xC3);
    for _ in 0..TRIALS {
        let (m, n) = dims(&mut rng);
        let x = randn(&mut rng, &[m, n]);
        let v = randn(&mut rng, &[n]);
        let w = randn(&mut rng, &[m, n]);
        let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let c = rng.random_range(-2.0..2.0);
        let wt = randn(&mut rng, &[n, m]);
        let wr = randn(&mut rng, &[m]);
        let wp = randn(&mut rng, &[m]);
        let wrow = randn(&mut rng, &[1, n]);

        let scale = |g: &mut Graph, x: NodeId| {
            let y = g.scale(x, c)?;
            weighted(g, y, &w)
        };
        let neg = |g: &mut Graph, x: NodeId| {
            let y = g.neg(x)?;
            weighted(g, y, &w)
        };
        let transpose = |g: &mut Graph, x: NodeId| {
            let y = g.transpose(x)?;
            weighted(g, y, &wt)
        };
        let sum_last = |g: &mut Graph, x: NodeId| {
            let y = g.sum_last(x)?;
            weighted(g, y, &wr)
        };
        let pick = |g: &mut Graph, x: NodeId| {
            let y = g.pick(x, &idx)?;
            weighted(g, y, &wp)
        };
        let row = |g: &mut Graph, x: NodeId| {
            let y = g.row(x, m - 1)?;
            weighted(g, y, &wrow)
        };
        let mul_bcast_lhs = |g: &mut Graph, x: NodeId| {
            let b = g.constant(v.clone());
            let y = g.mul_bcast(x, b)?;
            weighted(g, y, &w)
        };
        let mul_bcast_rhs = |g: &mut Graph, b: NodeId| {
            let a = g.constant(x.clone());
            let y = g.mul_bcast(a, b)?;
            weighted(g, y, &w)
        };
        let add_bcast_rhs = |g: &mut Graph, b: NodeId| {
            let a = g.constant(x.clone());
            let y = g.add_bcast(a, b)?;
            weighted(g, y, &w)
        };
        for (name, f) in [
            (
                "scale",
                &scale as &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
            ),
            ("neg", &neg),
            ("transpose", &transpose),
            ("sum_last", &sum_last),
            ("pick", &pick),
            ("row", &row),
            ("mul_bcast lhs", &mul_bcast_lhs),
        ] {
            worst.record(name, &f, &x);
        }
        worst.record("mul_bcast rhs", &mul_bcast_rhs, &v);
        worst.record("add_bcast rhs", &add_bcast_rhs, &v);
    }
}

pub fn convolution_ops(worst: &mut Worst) {
    let mut rng = rng::seeded(0xC0);
    for _ in 0..TRIALS {
        let b = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let x = randn(&mut rng, &[b, 5, 5, c]);
        let k = rng.random_range(1..4);
        let o = 6 - k;
        let w_cols = randn(&mut rng, &[b * o * o, k * k * c]);
        let im2col = |g: &mut Graph, x: NodeId| {
            let y = g.im2col(x, k)?;
            weighted(g, y, &w_cols)
        };
        worst.record("im2col", &im2col, &x);
        let w_pool = randn(&mut rng, &[b, 2, 2, c]);
        let pool = |g: &mut Graph, x: NodeId| {
            let y = g.maxpool2d(x, 2, 2)?;
            weighted(g, y, &w_pool)
        };
        // Continuous draws make window ties (and so kinks) measure-zero.
        worst.record("maxpool2d", &pool, &x);
    }
}

/// Runs every op family and returns the worst error per op.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut worst = Worst::default();
    elementwise_unary_ops(&mut worst);
    reductions_and_shape_ops(&mut worst);
    binary_ops(&mut worst);
    helper_ops(&mut worst);
    convolution_ops(&mut worst);
    worst.0
}
