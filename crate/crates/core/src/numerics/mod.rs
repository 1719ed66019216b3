//! Dense tensors, reverse-mode differentiation, AdamW and the LBT1 file format.

mod graph;
pub mod lbt;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
pub(crate) use tensor::matmul_into as tensor_matmul;

use crate::error::{Error, Result};

/// Numerically stable softmax in double precision.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input is not finite"));
    }
    Ok(graph::softmax_f64(logits.iter().copied()))
}

/// Mean of squared element differences, accumulated in `f64`.
pub fn mse_loss(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "mse_loss shapes {:?} and {:?} differ",
            prediction.shape(),
            target.shape()
        )));
    }
    if prediction.is_empty() {
        return Err(Error::invalid("mse_loss of empty tensors"));
    }
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let v = sum / prediction.len() as f64;
    if !v.is_finite() {
        return Err(Error::invalid("mse_loss is not finite"));
    }
    Ok(v)
}

/// Mean over rows of `-log softmax(row)[target]`. A rank-1 input is one row.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, v) = if logits.rank() == 1 {
        (1, logits.len())
    } else {
        (logits.rows(), logits.cols())
    };
    if rows != targets.len() {
        return Err(Error::invalid(format!(
            "{rows} logit rows but {} targets",
            targets.len()
        )));
    }
    if rows == 0 {
        return Err(Error::invalid("cross_entropy over zero positions"));
    }
    logits.ensure_finite("logits")?;
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::invalid(format!("target {t} out of range for {v} classes")));
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[t] as f64;
    }
    Ok(total / rows as f64)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
