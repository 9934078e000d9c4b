//! Central finite-difference checks of tape gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

fn eval_loss<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the backward pass of the scalar function `f` against central
/// differences with step `eps` at every input element.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_scaled(inputs, eps, 1.0, f)
}

/// As [`check_gradients`], expecting `analytic = factor · numeric`. A
/// gradient-reversal node with coefficient `c` gives `factor = −c`.
pub fn check_gradients_scaled<F>(inputs: &[Tensor], eps: f64, factor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + eps;
            let plus = eval_loss(&probe, &f)?;
            probe[i].values_mut()[j] = orig - eps;
            let minus = eval_loss(&probe, &f)?;
            probe[i].values_mut()[j] = orig;
            let numeric = factor * (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > out.max_rel_error || !rel.is_finite() {
                out.max_rel_error = rel;
                out.worst = (i, j);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Every differentiable operation the tape records.
pub const OPS: &[&str] = &[
    "dense",
    "relu",
    "dropout",
    "sigmoid",
    "softmax_temp",
    "log_clamped",
    "row_entropy",
    "cross_entropy",
    "add",
    "sub",
    "mul",
    "affine",
    "scale",
    "grad_reverse",
    "concat_cols",
    "slice_rows",
    "reshape",
    "sum",
    "mean",
    "weighted_sum",
    "abs_pow",
    "stack_mean",
    "stack_variance",
    "row_mean",
];

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, v).expect("positive dims")
}

/// Entries bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, v).expect("positive dims")
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.random_range(0.05..2.0)).collect();
    Tensor::matrix(rows, cols, v).expect("positive dims")
}

/// Contracts any output with fixed random weights to a scalar.
fn reduce(t: &mut Tape, y: Var, w: &[f64]) -> Result<Var> {
    let n = t.value(y).len();
    let flat = t.reshape(y, vec![n])?;
    t.weighted_sum(flat, &w[..n])
}

/// One finite-difference check of `op` at random inputs drawn from `rng`.
pub fn check_op(op: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<GradCheck> {
    let r = rng.random_range(1..4);
    let c = rng.random_range(2..5);
    let w: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = w.as_slice();
    match op {
        "dense" => {
            let k = rng.random_range(1..4);
            let inputs = [normal(rng, r, k), normal(rng, k, c), Tensor::vector((0..c).map(|i| w[i + 32]).collect())?];
            check_gradients(&inputs, eps, |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                reduce(t, y, w)
            })
        }
        "relu" => check_gradients(&[away_from_zero(rng, r, c)], eps, |t, v| {
            let y = t.relu(v[0])?;
            reduce(t, y, w)
        }),
        "dropout" => {
            let mask: Vec<f64> = (0..r * c).map(|_| if rng.random::<bool>() { 2.0 } else { 0.0 }).collect();
            check_gradients(&[normal(rng, r, c)], eps, |t, v| {
                let y = t.dropout(v[0], mask.clone())?;
                reduce(t, y, w)
            })
        }
        "sigmoid" => check_gradients(&[normal(rng, r, c)], eps, |t, v| {
            let y = t.sigmoid(v[0])?;
            reduce(t, y, w)
        }),
        "softmax_temp" => {
            let tau = rng.random_range(0.5..3.0);
            check_gradients(&[normal(rng, r, c)], eps, |t, v| {
                let y = t.softmax_temp(v[0], tau)?;
                reduce(t, y, w)
            })
        }
        "log_clamped" => check_gradients(&[positive(rng, r, c)], eps, |t, v| {
            let y = t.log_clamped(v[0])?;
            reduce(t, y, w)
        }),
        "row_entropy" => check_gradients(&[positive(rng, r, c)], eps, |t, v| {
            let y = t.row_entropy(v[0])?;
            reduce(t, y, w)
        }),
        "cross_entropy" => {
            // Labels need valid distributions, so probabilities come from a softmax.
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let tau = rng.random_range(0.5..3.0);
            check_gradients(&[normal(rng, r, c)], eps, |t, v| {
                let p = t.softmax_temp(v[0], tau)?;
                t.cross_entropy(p, &labels)
            })
        }
        "add" | "sub" | "mul" => check_gradients(&[normal(rng, r, c), normal(rng, r, c)], eps, |t, v| {
            let y = match op {
                "add" => t.add(v[0], v[1])?,
                "sub" => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            reduce(t, y, w)
        }),
        "affine" => {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            check_gradients(&[normal(rng, r, c)], eps, |t, v| {
                let y = t.affine(v[0], a, b)?;
                reduce(t, y, w)
            })
        }
        "scale" => {
            let a = rng.random_range(-2.0..2.0);
            check_gradients(&[normal(rng, r, c)], eps, |t, v| {
                let y = t.scale(v[0], a)?;
                reduce(t, y, w)
            })
        }
        "grad_reverse" => {
            let coeff = rng.random_range(0.1..2.0);
            check_gradients_scaled(&[normal(rng, r, c)], eps, -coeff, |t, v| {
                let y = t.grad_reverse(v[0], coeff)?;
                let sq = t.mul(y, y)?;
                reduce(t, sq, w)
            })
        }
        "concat_cols" => {
            let c2 = rng.random_range(1..4);
            check_gradients(&[normal(rng, r, c), normal(rng, r, c2)], eps, |t, v| {
                let y = t.concat_cols(v[0], v[1])?;
                reduce(t, y, w)
            })
        }
        "slice_rows" => {
            let rows = r + 2;
            let start = rng.random_range(0..rows);
            let len = rng.random_range(1..=rows - start);
            check_gradients(&[normal(rng, rows, c)], eps, |t, v| {
                let y = t.slice_rows(v[0], start, len)?;
                reduce(t, y, w)
            })
        }
        "reshape" => check_gradients(&[normal(rng, r, c)], eps, |t, v| {
            let y = t.reshape(v[0], vec![c, r])?;
            let sq = t.mul(y, y)?;
            reduce(t, sq, w)
        }),
        "sum" | "mean" => check_gradients(&[normal(rng, r, c)], eps, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            if op == "sum" {
                t.sum(sq)
            } else {
                t.mean(sq)
            }
        }),
        "weighted_sum" => check_gradients(&[normal(rng, 1, r * c)], eps, |t, v| {
            let flat = t.reshape(v[0], vec![r * c])?;
            let sq = t.mul(flat, flat)?;
            t.weighted_sum(sq, &w[..r * c])
        }),
        "abs_pow" => {
            let q = rng.random_range(1.0..3.0);
            check_gradients(&[away_from_zero(rng, r, c)], eps, |t, v| {
                let y = t.abs_pow(v[0], q)?;
                reduce(t, y, w)
            })
        }
        "stack_mean" | "stack_variance" => {
            let inputs = [normal(rng, r, c), normal(rng, r, c), normal(rng, r, c)];
            check_gradients(&inputs, eps, |t, v| {
                let y = if op == "stack_mean" {
                    t.stack_mean(v)?
                } else {
                    t.stack_variance(v)?
                };
                reduce(t, y, w)
            })
        }
        "row_mean" => check_gradients(&[normal(rng, r, c)], eps, |t, v| {
            let y = t.row_mean(v[0])?;
            let sq = t.mul(y, y)?;
            reduce(t, sq, w)
        }),
        other => Err(Error::invalid("op", format!("no gradient check for `{other}`"))),
    }
}

/// Checks every op in [`OPS`] at `samples` random inputs each and returns
/// the worst relative error per op.
pub fn check_all_ops(samples: usize, seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = rng_from(&[seed, i as u64]);
            let mut worst = 0.0f64;
            for _ in 0..samples {
                worst = worst.max(check_op(op, &mut rng, eps)?.max_rel_error);
            }
            Ok((op, worst))
        })
        .collect()
}

/// A random three-layer network (dense, ReLU, dropout, dense, sigmoid,
/// dense, tempered softmax, cross-entropy), checked with respect to the input
/// and all six parameter tensors.
pub fn check_composite(rng: &mut ChaCha8Rng, eps: f64) -> Result<GradCheck> {
    let b = rng.random_range(1..5);
    let d: Vec<usize> = (0..4).map(|_| rng.random_range(2..6)).collect();
    let mut inputs = vec![normal(rng, b, d[0])];
    for l in 0..3 {
        inputs.push(normal(rng, d[l], d[l + 1]));
        inputs.push(Tensor::vector(normal(rng, 1, d[l + 1]).into_values())?);
    }
    let mask: Vec<f64> = (0..b * d[1]).map(|_| if rng.random::<bool>() { 2.0 } else { 0.0 }).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..d[3])).collect();
    let tau = rng.random_range(0.5..2.0);
    check_gradients(&inputs, eps, |t, v| {
        let h1 = t.dense(v[0], v[1], v[2])?;
        let h1 = t.relu(h1)?;
        let h1 = t.dropout(h1, mask.clone())?;
        let h2 = t.dense(h1, v[3], v[4])?;
        let h2 = t.sigmoid(h2)?;
        let logits = t.dense(h2, v[5], v[6])?;
        let p = t.softmax_temp(logits, tau)?;
        t.cross_entropy(p, &labels)
    })
}
