//! Per-element activations and row-wise normalisations. Each counts one op
//! per output element.

use super::Tensor;
use crate::error::Result;
use crate::opcount;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn counted(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    opcount::record(t.len() as u64);
    t.map(f)
}

pub fn silu(t: &Tensor) -> Tensor {
    counted(t, silu_scalar)
}

pub fn gelu(t: &Tensor) -> Tensor {
    counted(t, gelu_scalar)
}

pub fn softplus_t(t: &Tensor) -> Tensor {
    counted(t, softplus)
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Softmax over the last axis.
pub fn softmax(t: &Tensor) -> Tensor {
    opcount::record(t.len() as u64);
    let n = *t.shape().last().unwrap_or(&1);
    let data = t.data().chunks(n.max(1)).flat_map(softmax_row).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

pub const RMS_EPS: f64 = 1e-6;

/// RMS normalisation over the last axis of a 2-D tensor, scaled by `weight`.
pub fn rms_norm(x: &Tensor, weight: &[f64]) -> Result<Tensor> {
    let [rows, d] = x.dims2("rms_norm")?;
    if weight.len() != d {
        return crate::error::shape_err("rms_norm", &[d], &[weight.len()]);
    }
    opcount::record((rows * d) as u64);
    let mut out = x.clone();
    for r in 0..rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, w) in row.iter_mut().zip(weight) {
            *v *= inv * w;
        }
    }
    Ok(out)
}

/// `x · w + b` for `x: n×in`, `w: in×out`, optional `b: out`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&[f64]>) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        let n = y.dim(1);
        if b.len() != n {
            return crate::error::shape_err("linear bias", &[n], &[b.len()]);
        }
        for r in 0..y.dim(0) {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Ok(y)
}
