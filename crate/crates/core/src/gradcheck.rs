//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-input comparison of autodiff against finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// `max|a - n| / max(max|a|, max|n|, SCALE_FLOOR)` per input.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Gradients smaller than this are compared in absolute terms. Central
/// differences carry round-off of order `1e-16 · |loss| / step` per op, so an
/// analytically zero gradient reads as ~1e-11 rather than 0.
pub const SCALE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(SCALE_FLOOR, f64::max);
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    diff / scale
}

fn eval<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.value(loss).item()
}

/// Differentiate `build` with respect to every tensor in `inputs`, both by the
/// tape and by central differences with the given `step`.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradients are always populated"))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work, &build)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work, &build)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        numeric.push(grad);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradReport {
        analytic,
        numeric,
        rel_errors,
    })
}

/// One differentiable graph operation with fixed sample inputs, reduced to a
/// scalar by a weighted sum.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
}

impl OpCase {
    pub fn check(&self) -> Result<GradReport> {
        check_gradients(&self.inputs, self.build, DEFAULT_STEP)
    }
}

/// Fixed, uneven weights so that the scalar probe sees every output element.
pub fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i * 37 + 11) % 23) as f64 / 11.0 - 1.0);
    let w = g.constant(w);
    let y = g.mul(v, w)?;
    Ok(g.sum(y))
}

fn sample(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Like [`sample`] but bounded away from zero, for ops with a kink there.
fn sample_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = sample(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + v.abs());
    }
    t
}

/// Every differentiable operation of [`Graph`].
pub fn registered_ops() -> Vec<OpCase> {
    let s = |shape: &[usize], seed| sample(shape, seed);
    vec![
        OpCase {
            name: "add",
            inputs: vec![s(&[3, 4], 1), s(&[3, 4], 2)],
            build: |g, v| {
                let y = g.add(v[0], v[1])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "sub",
            inputs: vec![s(&[3, 4], 3), s(&[3, 4], 4)],
            build: |g, v| {
                let y = g.sub(v[0], v[1])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "mul",
            inputs: vec![s(&[3, 4], 5), s(&[3, 4], 6)],
            build: |g, v| {
                let y = g.mul(v[0], v[1])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "scale",
            inputs: vec![s(&[5], 7)],
            build: |g, v| {
                let y = g.scale(v[0], -2.5);
                probe(g, y)
            },
        },
        OpCase {
            name: "add_row",
            inputs: vec![s(&[2, 3, 4], 8), s(&[4], 9)],
            build: |g, v| {
                let y = g.add_row(v[0], v[1])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "matmul",
            inputs: vec![s(&[3, 4], 10), s(&[4, 5], 11)],
            build: |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "matmul_batched",
            inputs: vec![s(&[2, 3, 4], 12), s(&[2, 4, 2], 13)],
            build: |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "transpose",
            inputs: vec![s(&[2, 3, 4], 14)],
            build: |g, v| {
                let y = g.transpose(v[0])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "reshape",
            inputs: vec![s(&[2, 6], 15)],
            build: |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "gather",
            inputs: vec![s(&[6], 16)],
            build: |g, v| {
                let y = g.gather(v[0], vec![5, 0, 0, 3, 2, 5, 1, 1], &[2, 4])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "slice",
            inputs: vec![s(&[3, 5, 2], 17)],
            build: |g, v| {
                let y = g.slice(v[0], 1, 1, 3)?;
                probe(g, y)
            },
        },
        OpCase {
            name: "concat",
            inputs: vec![s(&[2, 3], 18), s(&[2, 1], 19), s(&[2, 2], 20)],
            build: |g, v| {
                let y = g.concat(&[v[0], v[1], v[2]], 1)?;
                probe(g, y)
            },
        },
        OpCase {
            name: "sum",
            inputs: vec![s(&[4, 3], 21)],
            build: |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
        },
        OpCase {
            name: "mean",
            inputs: vec![s(&[4, 3], 22)],
            build: |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.mean(y))
            },
        },
        OpCase {
            name: "sum_axis",
            inputs: vec![s(&[2, 3, 4], 23)],
            build: |g, v| {
                let y = g.sum_axis(v[0], 1)?;
                probe(g, y)
            },
        },
        OpCase {
            name: "softmax",
            inputs: vec![s(&[3, 5], 24)],
            build: |g, v| {
                let y = g.softmax_lastdim(v[0])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "log_softmax",
            inputs: vec![s(&[3, 5], 25)],
            build: |g, v| {
                let y = g.log_softmax_lastdim(v[0])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "layernorm",
            inputs: vec![s(&[4, 6], 26), s(&[6], 27), s(&[6], 28)],
            build: |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                probe(g, y)
            },
        },
        OpCase {
            name: "gelu",
            inputs: vec![s(&[7], 29)],
            build: |g, v| {
                let y = g.gelu(v[0]);
                probe(g, y)
            },
        },
        OpCase {
            name: "abs",
            inputs: vec![sample_away_from_zero(&[7], 30)],
            build: |g, v| {
                let y = g.abs(v[0]);
                probe(g, y)
            },
        },
        OpCase {
            name: "depthwise_conv2d",
            inputs: vec![s(&[2, 5, 4], 31), s(&[2, 3, 3], 32)],
            build: |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], 1)?;
                probe(g, y)
            },
        },
        OpCase {
            name: "normalize_rows",
            inputs: vec![s(&[3, 4], 33)],
            build: |g, v| {
                let y = g.normalize_rows(v[0])?;
                probe(g, y)
            },
        },
        OpCase {
            name: "l1_loss",
            inputs: vec![sample_away_from_zero(&[2, 5], 34), Tensor::zeros([2, 5])],
            build: |g, v| g.l1_loss(v[0], v[1]),
        },
        OpCase {
            name: "l2_loss",
            inputs: vec![s(&[2, 5], 35), s(&[2, 5], 36)],
            build: |g, v| g.l2_loss(v[0], v[1]),
        },
    ]
}
