//! Per-sample gating of the forward and backward blocks of each layer.
//!
//! Each layer's selector maps the class token to one score per block. A
//! gate is a two-class Gumbel-softmax over `(score, 0)`, so its soft value
//! is `sigmoid(score)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{linear, sigmoid};
use crate::numerics::{Rng, Tensor};
use crate::opcount;

/// Initial selector bias; keeps both blocks on for every sample.
pub const SELECTOR_INIT_BIAS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorWeights {
    /// `D×2`; column 0 scores the forward block, column 1 the backward block.
    pub w: Tensor,
    pub b: [f64; 2],
}

impl SelectorWeights {
    pub fn init(dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: Tensor::randn(&[dim, 2], std, rng),
            b: [SELECTOR_INIT_BIAS; 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    Train { tau: f64 },
    Infer { threshold: f64 },
}

/// Gates of one layer for a batch: `hard[b] = [forward, backward]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub hard: Vec<[bool; 2]>,
    /// `B×2` relaxed gate values.
    pub soft: Tensor,
}

impl GateRow {
    pub fn all_on(batch: usize) -> Self {
        Self {
            hard: vec![[true; 2]; batch],
            soft: Tensor::full(&[batch, 2], 1.0),
        }
    }

    pub fn from_hard(hard: Vec<[bool; 2]>) -> Self {
        let soft = Tensor::from_fn(&[hard.len(), 2], |i| if hard[i / 2][i % 2] { 1.0 } else { 0.0 });
        Self { hard, soft }
    }

    pub fn column(&self, block: usize) -> Vec<bool> {
        self.hard.iter().map(|g| g[block]).collect()
    }

    pub fn gate(&self, b: usize, block: usize) -> f64 {
        if self.hard[b][block] {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockPolicy {
    pub layers: Vec<GateRow>,
}

impl BlockPolicy {
    /// Mean over layers and samples of `(Q₀ + Q₁)/2`.
    pub fn active_ratio(&self) -> f64 {
        let (on, total) = self.layers.iter().flat_map(|r| &r.hard).fold((0usize, 0usize), |(on, t), g| {
            (on + g[0] as usize + g[1] as usize, t + 2)
        });
        if total == 0 {
            1.0
        } else {
            on as f64 / total as f64
        }
    }

    /// Per-layer fraction of active blocks.
    pub fn layer_ratios(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|r| {
                let on: usize = r.hard.iter().map(|g| g[0] as usize + g[1] as usize).sum();
                on as f64 / (2 * r.hard.len().max(1)) as f64
            })
            .collect()
    }
}

/// Scores `class_tokens: B×D` and draws one [`GateRow`].
pub fn select_blocks(w: &SelectorWeights, class_tokens: &Tensor, rng: &mut Rng, mode: GateMode) -> Result<GateRow> {
    let [b, d] = class_tokens.dims2("select_blocks")?;
    if w.w.shape() != [d, 2] {
        return shape_err("selector weights", &[d, 2], w.w.shape());
    }
    let scores = linear(class_tokens, &w.w, Some(&w.b))?;
    opcount::record(scores.len() as u64);
    let mut hard = Vec::with_capacity(b);
    let mut soft = Tensor::zeros(&[b, 2]);
    for s in 0..b {
        let mut g = [false; 2];
        for k in 0..2 {
            let score = scores.at(&[s, k]);
            match mode {
                GateMode::Train { tau } => {
                    if !(tau > 0.0) {
                        return Err(Error::InvalidArgument("gumbel temperature must be positive".into()));
                    }
                    let z = score + rng.gumbel() - rng.gumbel();
                    g[k] = z > 0.0;
                    soft.set(&[s, k], sigmoid(z / tau));
                }
                GateMode::Infer { threshold } => {
                    let p = sigmoid(score);
                    g[k] = p >= threshold;
                    soft.set(&[s, k], p);
                }
            }
        }
        hard.push(g);
    }
    Ok(GateRow { hard, soft })
}

/// How many samples a routed block actually processed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteStats {
    pub sub_batch: usize,
    pub invocations: usize,
}

/// Runs `block` once on the gated-on items, in order, and scatters results
/// back. Gated-off slots are `None`.
pub fn route<T, F>(gates: &[bool], items: &[T], block: F) -> Result<(Vec<Option<Tensor>>, RouteStats)>
where
    F: FnOnce(&[&T]) -> Result<Vec<Tensor>>,
{
    if gates.len() != items.len() {
        return shape_err("route gates", &[items.len()], &[gates.len()]);
    }
    let picked: Vec<&T> = items.iter().zip(gates).filter(|(_, &g)| g).map(|(t, _)| t).collect();
    let mut out = vec![None; items.len()];
    if picked.is_empty() {
        return Ok((out, RouteStats::default()));
    }
    let sub_batch = picked.len();
    let results = block(&picked)?;
    if results.len() != sub_batch {
        return shape_err("route results", &[sub_batch], &[results.len()]);
    }
    let mut it = results.into_iter();
    for (slot, &g) in out.iter_mut().zip(gates) {
        if g {
            *slot = it.next();
        }
    }
    Ok((out, RouteStats { sub_batch, invocations: 1 }))
}

/// [`route`] over a dense `B×L×D` batch; gated-off rows are zero.
pub fn route_infer<F>(gates: &[bool], batch: &Tensor, block: F) -> Result<(Tensor, RouteStats)>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let [b, _, _] = batch.dims3("route_infer")?;
    if gates.len() != b {
        return shape_err("route_infer gates", &[b], &[gates.len()]);
    }
    let rows: Vec<usize> = (0..b).filter(|&i| gates[i]).collect();
    let mut out = Tensor::zeros(batch.shape());
    if rows.is_empty() {
        return Ok((out, RouteStats::default()));
    }
    let sub = batch.gather_rows(&rows);
    let y = block(&sub)?;
    if y.shape() != sub.shape() {
        return shape_err("route_infer block output", sub.shape(), y.shape());
    }
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(y.row(r));
    }
    Ok((out, RouteStats { sub_batch: rows.len(), invocations: 1 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_block(x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| v.tanh() * 3.0 - 1.0))
    }

    #[test]
    fn initial_bias_keeps_everything_on() {
        let mut rng = Rng::new(1);
        let w = SelectorWeights::init(8, 0.02, &mut rng);
        let c = Tensor::randn(&[16, 8], 1.0, &mut rng);
        for mode in [GateMode::Train { tau: 1.0 }, GateMode::Infer { threshold: 0.5 }] {
            let row = select_blocks(&w, &c, &mut rng, mode).unwrap();
            assert!(row.hard.iter().all(|g| g[0] && g[1]));
        }
    }

    #[test]
    fn zero_score_gate_frequency_is_half() {
        let w = SelectorWeights { w: Tensor::zeros(&[3, 2]), b: [0.0; 2] };
        let c = Tensor::zeros(&[1, 3]);
        let mut rng = Rng::new(2);
        let draws = 100_000;
        let mut on = [0usize; 2];
        for _ in 0..draws {
            let row = select_blocks(&w, &c, &mut rng, GateMode::Train { tau: 1.0 }).unwrap();
            on[0] += row.hard[0][0] as usize;
            on[1] += row.hard[0][1] as usize;
        }
        for k in on {
            assert!((k as f64 / draws as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn inference_gates_are_deterministic() {
        let mut rng = Rng::new(3);
        let w = SelectorWeights { w: Tensor::randn(&[4, 2], 1.0, &mut rng), b: [0.0; 2] };
        let c = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let a = select_blocks(&w, &c, &mut Rng::new(10), GateMode::Infer { threshold: 0.5 }).unwrap();
        let b = select_blocks(&w, &c, &mut Rng::new(99), GateMode::Infer { threshold: 0.5 }).unwrap();
        assert_eq!(a, b);
        assert!(select_blocks(&w, &Tensor::zeros(&[5, 3]), &mut rng, GateMode::Infer { threshold: 0.5 }).is_err());
    }

    #[test]
    fn routing_matches_masked_full_batch() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[6, 4, 3], 1.0, &mut rng);
        let full = toy_block(&x).unwrap();
        for gates in [[true; 6], [false; 6], [true, false, false, true, true, false]] {
            let (y, stats) = route_infer(&gates, &x, toy_block).unwrap();
            let on = gates.iter().filter(|&&g| g).count();
            assert_eq!(stats.sub_batch, on);
            assert_eq!(stats.invocations, usize::from(on > 0));
            for b in 0..6 {
                let g = if gates[b] { 1.0 } else { 0.0 };
                let want: Vec<f64> = full.row(b).iter().map(|v| v * g).collect();
                assert_eq!(y.row(b), &want[..]);
            }
        }
    }

    #[test]
    fn ragged_routing_preserves_order() {
        let items = vec![vec![1.0], vec![2.0, 3.0], vec![4.0]];
        let (out, stats) = route(&[false, true, true], &items, |sub| {
            Ok(sub.iter().map(|v| Tensor::vector(v.to_vec())).collect())
        })
        .unwrap();
        assert_eq!(stats.sub_batch, 2);
        assert!(out[0].is_none());
        assert_eq!(out[1].as_ref().unwrap().data(), &[2.0, 3.0]);
        assert_eq!(out[2].as_ref().unwrap().data(), &[4.0]);
    }

    #[test]
    fn active_ratio_counts_blocks() {
        let p = BlockPolicy {
            layers: vec![
                GateRow::from_hard(vec![[true, true], [false, false]]),
                GateRow::from_hard(vec![[true, false], [false, true]]),
            ],
        };
        assert_eq!(p.active_ratio(), 0.5);
        assert_eq!(p.layer_ratios(), [0.5, 0.5]);
    }
}
