//! One bidirectional layer: `h + out_proj(g_f·O_f + g_b·O_b)`.
//!
//! The per-token part (norm, input projection, timescale/`B`/`C`
//! projections) is shared; each direction then runs a causal convolution
//! and a selective scan over every segment of the sequence independently.
//! The backward direction reverses each segment, so a segment never sees
//! tokens outside itself in either direction.

use std::ops::Range;

use super::config::ModelConfig;
use super::weights::{DirectionWeights, LayerWeights};
use crate::error::Result;
use crate::numerics::nn::{linear, rms_norm, silu, softplus_t};
use crate::numerics::Tensor;
use crate::opcount::{self, scope, OpKind};
use crate::ssm::{discretize, scan_recurrent, SsmParams, StateMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }

    fn op_kind(self) -> OpKind {
        match self {
            Direction::Forward => OpKind::ForwardBlock,
            Direction::Backward => OpKind::BackwardBlock,
        }
    }
}

/// Per-direction selective parameters, one row per token.
#[derive(Clone, Debug)]
pub struct DirectionInputs {
    /// `L×E`, after softplus.
    pub delta: Tensor,
    /// `L×N`.
    pub b: Tensor,
    /// `L×N`.
    pub c: Tensor,
}

/// Everything a layer computes per token before the blocks.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Block input, `L×E`.
    pub x: Tensor,
    /// Output gate input, `L×E`.
    pub z: Tensor,
    pub dirs: [DirectionInputs; 2],
}

fn split_cols(t: &Tensor, ranges: &[Range<usize>]) -> Vec<Tensor> {
    let rows = t.dim(0);
    ranges
        .iter()
        .map(|r| {
            let w = r.len();
            Tensor::from_fn(&[rows, w], |i| t.row(i / w)[r.start + i % w])
        })
        .collect()
}

/// `Δ`, `B`, `C` for one direction from the block input `x: L×E`.
pub fn direction_inputs(cfg: &ModelConfig, dw: &DirectionWeights, x: &Tensor) -> Result<DirectionInputs> {
    let (r, n) = (cfg.dt_rank(), cfg.n_state);
    let dbc = linear(x, &dw.x_proj, None)?;
    let mut parts = split_cols(&dbc, &[0..r, r..r + n, r + n..r + 2 * n]).into_iter();
    let (dt_in, b, c) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    let delta = softplus_t(&linear(&dt_in, &dw.dt_proj, Some(&dw.dt_bias))?);
    Ok(DirectionInputs { delta, b, c })
}

pub fn prepare(cfg: &ModelConfig, lw: &LayerWeights, h: &Tensor) -> Result<Prepared> {
    let e = cfg.inner_dim();
    let normed = {
        let _s = scope(OpKind::Norm);
        rms_norm(h, &lw.norm)?
    };
    let xz = {
        let _s = scope(OpKind::InProj);
        linear(&normed, &lw.in_proj, None)?
    };
    let mut parts = split_cols(&xz, &[0..e, e..2 * e]).into_iter();
    let (x, z) = (parts.next().unwrap(), parts.next().unwrap());
    let _s = scope(OpKind::ParamProj);
    let dirs = [
        direction_inputs(cfg, &lw.dirs[0], &x)?,
        direction_inputs(cfg, &lw.dirs[1], &x)?,
    ];
    Ok(Prepared { x, z, dirs })
}

/// Depthwise causal convolution over the rows of `x: L×E` with `w: E×k`.
fn causal_conv(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (l, e) = (x.dim(0), x.dim(1));
    let k = w.dim(1);
    opcount::record((l * e * k) as u64);
    let mut y = Tensor::zeros(&[l, e]);
    for t in 0..l {
        for ch in 0..e {
            let mut acc = b[ch];
            for j in 0..k {
                // Tap k−1 multiplies the current token.
                if let Some(src) = (t + j + 1).checked_sub(k) {
                    acc += w.at(&[ch, j]) * x.at(&[src, ch]);
                }
            }
            y.set(&[t, ch], acc);
        }
    }
    y
}

/// Gated block on one segment given in scan order.
fn block_segment(cfg: &ModelConfig, dw: &DirectionWeights, x: &Tensor, z: &Tensor, inp: &DirectionInputs) -> Result<Tensor> {
    let (l, e, n) = (x.dim(0), cfg.inner_dim(), cfg.n_state);
    let u = silu(&causal_conv(x, &dw.conv_w, &dw.conv_b));
    let per_channel = |m: &Tensor| Tensor::from_fn(&[l, e, n], |i| m.at(&[i / (e * n), i % n]));
    let params = SsmParams {
        a: StateMatrix::Diagonal(dw.a()),
        b: per_channel(&inp.b),
        c: per_channel(&inp.c),
        delta: inp.delta.clone(),
    };
    let disc = discretize(&params)?;
    let mut y = scan_recurrent(&disc, &params.c, &u)?;
    opcount::record((l * e) as u64);
    for t in 0..l {
        for (ch, v) in y.row_mut(t).iter_mut().enumerate() {
            *v += dw.d_skip[ch] * u.at(&[t, ch]);
        }
    }
    y.mul(&silu(z))
}

/// Runs one direction's block over every segment and returns its output in
/// sequence order, `L×E`. Empty segments are skipped.
pub fn run_block(
    cfg: &ModelConfig,
    lw: &LayerWeights,
    pre: &Prepared,
    dir: Direction,
    segments: &[Range<usize>],
) -> Result<Tensor> {
    let _s = scope(dir.op_kind());
    let dw = &lw.dirs[dir.index()];
    let inp = &pre.dirs[dir.index()];
    let mut out = Tensor::zeros(pre.x.shape());
    for seg in segments.iter().filter(|s| !s.is_empty()) {
        let mut rows: Vec<usize> = seg.clone().collect();
        if dir == Direction::Backward {
            rows.reverse();
        }
        let sub = DirectionInputs {
            delta: inp.delta.gather_rows(&rows),
            b: inp.b.gather_rows(&rows),
            c: inp.c.gather_rows(&rows),
        };
        let y = block_segment(cfg, dw, &pre.x.gather_rows(&rows), &pre.z.gather_rows(&rows), &sub)?;
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(y.row(r));
        }
    }
    Ok(out)
}

/// `h + out_proj(Σ gate·O)`. Gates multiply exactly, so a gate of 1 leaves
/// the block output bit-for-bit unchanged and 0 removes it.
pub fn combine(lw: &LayerWeights, h: &Tensor, fwd: &Tensor, bwd: &Tensor, gates: [f64; 2]) -> Result<Tensor> {
    let mixed = fwd.zip_map(bwd, |f, b| f * gates[0] + b * gates[1])?;
    finish(lw, h, &mixed)
}

/// `h + out_proj(O_f + O_b)` without gating.
pub fn combine_ungated(lw: &LayerWeights, h: &Tensor, fwd: &Tensor, bwd: &Tensor) -> Result<Tensor> {
    let mixed = fwd.zip_map(bwd, |f, b| f + b)?;
    finish(lw, h, &mixed)
}

fn finish(lw: &LayerWeights, h: &Tensor, mixed: &Tensor) -> Result<Tensor> {
    let o = {
        let _s = scope(OpKind::OutProj);
        linear(mixed, &lw.out_proj, None)?
    };
    h.zip_map(&o, |a, b| a + b)
}

/// Full layer on a single `L×D` sequence with the given segments and gates.
pub fn layer_forward(
    cfg: &ModelConfig,
    lw: &LayerWeights,
    h: &Tensor,
    segments: &[Range<usize>],
    gates: [bool; 2],
) -> Result<Tensor> {
    let pre = prepare(cfg, lw, h)?;
    let fwd = run_block(cfg, lw, &pre, Direction::Forward, segments)?;
    let bwd = run_block(cfg, lw, &pre, Direction::Backward, segments)?;
    let g = gates.map(|on| if on { 1.0 } else { 0.0 });
    combine(lw, h, &fwd, &bwd, g)
}

/// Batched [`layer_forward`] over `B×L×D` with one gate pair per sample.
pub fn layer_forward_batch(cfg: &ModelConfig, lw: &LayerWeights, h: &Tensor, gates: &[[bool; 2]]) -> Result<Tensor> {
    let [b, l, _] = h.dims3("layer_forward")?;
    if gates.len() != b {
        return crate::error::shape_err("layer gates", &[b], &[gates.len()]);
    }
    let rows = (0..b)
        .map(|i| layer_forward(cfg, lw, &h.index(i), &[0..l], gates[i]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}
