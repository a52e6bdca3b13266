//! Token pruning: mask state, per-token predictor, Gumbel sampling, the
//! rearrangement permutation, and the masking strategies whose train and
//! inference outputs are compared by the consistency checks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{gelu, linear, softmax_row};
use crate::opcount;
use crate::numerics::{Rng, Tensor};
use crate::ssm::{c_row, ScanOperator};

/// Logit pair assigned to tokens that an earlier stage already pruned.
pub const FORCED_PRUNE_LOGITS: [f64; 2] = [-1e9, 0.0];

/// Guards `⌊ρ^s · P⌋` against `0.7³ · 196 = 67.2279…` style products landing a
/// hair below an integer.
const FLOOR_SLACK: f64 = 1e-9;

/// Binary retention mask `M^s` over original token indices, `B×L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMask {
    pub stage: usize,
    pub class_pos: Option<usize>,
    pub keep: Vec<Vec<bool>>,
    /// Straight-through relaxation of `keep` when it came from a Gumbel draw.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft: Option<Tensor>,
}

impl TokenMask {
    /// Stage-0 mask with every token retained.
    pub fn full(batch: usize, len: usize, class_pos: Option<usize>) -> Self {
        Self {
            stage: 0,
            class_pos,
            keep: vec![vec![true; len]; batch],
            soft: None,
        }
    }

    pub fn from_rows(stage: usize, class_pos: Option<usize>, keep: Vec<Vec<bool>>) -> Result<Self> {
        let len = keep.first().map_or(0, Vec::len);
        if keep.iter().any(|r| r.len() != len) {
            return Err(Error::InvalidArgument("ragged mask rows".into()));
        }
        if let Some(c) = class_pos {
            if c >= len || keep.iter().any(|r| !r[c]) {
                return Err(Error::InvalidArgument("class token must be retained".into()));
            }
        }
        Ok(Self {
            stage,
            class_pos,
            keep,
            soft: None,
        })
    }

    pub fn batch(&self) -> usize {
        self.keep.len()
    }

    pub fn len(&self) -> usize {
        self.keep.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn retained_idx(&self, b: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.keep[b][i]).collect()
    }

    pub fn pruned_idx(&self, b: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.keep[b][i]).collect()
    }

    /// Retained tokens other than the class token.
    pub fn retained_tokens(&self, b: usize) -> usize {
        self.keep[b].iter().enumerate().filter(|&(i, &k)| k && Some(i) != self.class_pos).count()
    }

    /// `M^s` as a `B×L` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let (b, l) = (self.batch(), self.len());
        Tensor::from_fn(&[b, l], |i| if self.keep[i / l][i % l] { 1.0 } else { 0.0 })
    }

    /// `true` when every row of `self` is contained in the matching row of `prev`.
    pub fn is_subset_of(&self, prev: &TokenMask) -> bool {
        self.keep.len() == prev.keep.len()
            && self.keep.iter().zip(&prev.keep).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| !x || *y))
    }
}

/// Retained non-class tokens at stage `s` (1-based) for `p` patch tokens.
pub fn stage_keep_count(rho: f64, stage: usize, p: usize) -> usize {
    (rho.powi(stage as i32) * p as f64 + FLOOR_SLACK).floor() as usize
}

/// Which per-token features the predictor reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInput {
    #[default]
    Tokens,
    Delta,
    BBar,
    C,
}

/// Two-layer per-token MLP `in → hidden (GELU) → 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorWeights {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

impl PredictorWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: vec![0.0; hidden],
            w2: Tensor::zeros(&[hidden, 2]),
            b2: vec![0.0; 2],
        }
    }

    pub fn random(input: usize, hidden: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w1: Tensor::randn(&[input, hidden], std, rng),
            b1: vec![0.0; hidden],
            w2: Tensor::randn(&[hidden, 2], std, rng),
            b2: vec![0.0; 2],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.dim(0)
    }

    /// Logits for a `n×in` block of token features.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&linear(x, &self.w1, Some(&self.b1))?);
        linear(&h, &self.w2, Some(&self.b2))
    }
}

/// Retain/prune distribution `Π`, `B×L×2`; column 0 is the retain probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePrediction {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl PrunePrediction {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let [_, _, two] = logits.dims3("prune logits")?;
        if two != 2 {
            return shape_err("prune logits", &[2], &[two]);
        }
        let probs = Tensor::new(
            logits.shape().to_vec(),
            logits.data().chunks(2).flat_map(softmax_row).collect(),
        )?;
        Ok(Self { logits, probs })
    }

    pub fn retain_prob(&self, b: usize, i: usize) -> f64 {
        self.probs.at(&[b, i, 0])
    }
}

/// Runs the predictor on `h: B×L×in`. Tokens pruned in `prev` get
/// [`FORCED_PRUNE_LOGITS`] and are never fed to the network.
pub fn predict(w: &PredictorWeights, h: &Tensor, prev: &TokenMask) -> Result<PrunePrediction> {
    let [b, l, d] = h.dims3("predict")?;
    if d != w.input_dim() {
        return shape_err("predict features", &[b, l, w.input_dim()], h.shape());
    }
    if prev.batch() != b || prev.len() != l {
        return shape_err("predict mask", &[b, l], &[prev.batch(), prev.len()]);
    }
    let mut logits = Tensor::zeros(&[b, l, 2]);
    let mut live_total = 0;
    for s in 0..b {
        let live = prev.retained_idx(s);
        live_total += live.len();
        let feats = h.index(s).gather_rows(&live);
        let out = softmax_free_logits(w, &feats)?;
        for i in 0..l {
            logits.row_mut(s)[2 * i..2 * i + 2].copy_from_slice(&FORCED_PRUNE_LOGITS);
        }
        for (r, &i) in live.iter().enumerate() {
            logits.row_mut(s)[2 * i..2 * i + 2].copy_from_slice(out.row(r));
        }
    }
    // Forced rows are constants; only live rows cost a softmax.
    opcount::record(2 * live_total as u64);
    PrunePrediction::from_logits(logits)
}

fn softmax_free_logits(w: &PredictorWeights, feats: &Tensor) -> Result<Tensor> {
    if feats.dim(0) == 0 {
        return Ok(Tensor::zeros(&[0, 2]));
    }
    w.logits(feats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleMode {
    /// Hard Gumbel-softmax draw; `soft` carries the relaxed sample.
    Train { tau: f64 },
    /// Keep the `keep` non-class tokens with the highest retain probability.
    Infer { keep: usize },
}

/// Draws `M^s = M̂ ⊙ M^{s−1}`. The class token is always retained.
pub fn sample_mask(pred: &PrunePrediction, prev: &TokenMask, rng: &mut Rng, mode: SampleMode) -> Result<TokenMask> {
    let [b, l, _] = pred.probs.dims3("sample_mask")?;
    if prev.batch() != b || prev.len() != l {
        return shape_err("sample_mask prev", &[b, l], &[prev.batch(), prev.len()]);
    }
    let class = prev.class_pos;
    let mut keep = prev.keep.clone();
    let mut soft = None;
    match mode {
        SampleMode::Train { tau } => {
            if !(tau > 0.0) {
                return Err(Error::InvalidArgument("gumbel temperature must be positive".into()));
            }
            let mut s_t = Tensor::zeros(&[b, l]);
            for s in 0..b {
                for i in 0..l {
                    if Some(i) == class {
                        s_t.set(&[s, i], 1.0);
                        continue;
                    }
                    let z0 = pred.logits.at(&[s, i, 0]) + rng.gumbel();
                    let z1 = pred.logits.at(&[s, i, 1]) + rng.gumbel();
                    let relaxed = softmax_row(&[z0 / tau, z1 / tau])[0];
                    let prev_keep = prev.keep[s][i];
                    keep[s][i] = prev_keep && z0 > z1;
                    s_t.set(&[s, i], if prev_keep { relaxed } else { 0.0 });
                }
            }
            soft = Some(s_t);
        }
        SampleMode::Infer { keep: k } => {
            if k < 1 {
                return Err(Error::InvalidArgument("stage keeps no tokens".into()));
            }
            for s in 0..b {
                let mut live: Vec<usize> = (0..l).filter(|&i| prev.keep[s][i] && Some(i) != class).collect();
                if live.len() < k {
                    return Err(Error::InvalidArgument(format!(
                        "cannot keep {k} tokens, only {} remain",
                        live.len()
                    )));
                }
                live.sort_by(|&x, &y| pred.retain_prob(s, y).total_cmp(&pred.retain_prob(s, x)).then(x.cmp(&y)));
                for &i in &live[k..] {
                    keep[s][i] = false;
                }
            }
        }
    }
    Ok(TokenMask {
        stage: prev.stage + 1,
        class_pos: class,
        keep,
        soft,
    })
}

/// Where the class token sits inside the retained block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSlot {
    /// Index `⌊K/2⌋` for `K` retained non-class tokens.
    #[default]
    Middle,
    Front,
}

impl ClassSlot {
    pub fn index(self, retained_tokens: usize) -> usize {
        match self {
            ClassSlot::Middle => retained_tokens / 2,
            ClassSlot::Front => 0,
        }
    }
}

/// Token order after rearrangement: `order[i]` is the source row of output row `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub order: Vec<usize>,
    /// Length of the leading retained block, class token included.
    pub retained: usize,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            retained: len,
        }
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (i, &o) in self.order.iter().enumerate() {
            inv[o] = i;
        }
        inv
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &o)| i == o)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.gather_rows(&self.order)
    }

    pub fn invert(&self, y: &Tensor) -> Tensor {
        y.gather_rows(&self.inverse())
    }
}

/// Builds the rearranged order for one mask row: retained tokens in ascending
/// index order with the class token at `⌊K/2⌋`, then the pruned tokens.
pub fn rearrangement(keep: &[bool], class_pos: Option<usize>) -> Result<Permutation> {
    rearrangement_with(keep, class_pos, ClassSlot::Middle)
}

pub fn rearrangement_with(keep: &[bool], class_pos: Option<usize>, slot: ClassSlot) -> Result<Permutation> {
    if let Some(c) = class_pos {
        if c >= keep.len() || !keep[c] {
            return Err(Error::InvalidArgument("class token marked pruned".into()));
        }
    }
    let mut order: Vec<usize> = (0..keep.len()).filter(|&i| keep[i] && Some(i) != class_pos).collect();
    if let Some(c) = class_pos {
        order.insert(slot.index(order.len()), c);
    }
    let retained = order.len();
    order.extend((0..keep.len()).filter(|&i| !keep[i]));
    Ok(Permutation { order, retained })
}

pub fn rearrange(x: &Tensor, keep: &[bool], class_pos: Option<usize>) -> Result<(Tensor, Permutation)> {
    if x.rank() == 0 || x.dim(0) != keep.len() {
        return shape_err("rearrange", &[keep.len()], x.shape());
    }
    let perm = rearrangement(keep, class_pos)?;
    Ok((perm.apply(x), perm))
}

fn require_time_invariant(op: &ScanOperator, x: &Tensor, keep: &[bool]) -> Result<()> {
    if !op.is_time_invariant() {
        return Err(Error::InvalidArgument("masking strategies need time-invariant parameters".into()));
    }
    let [l, _] = x.dims2("pruning input")?;
    if l != keep.len() {
        return shape_err("pruning mask", &[l], &[keep.len()]);
    }
    Ok(())
}

/// Zeroes pruned embeddings and scans the full sequence; `L×D`.
pub fn prune_train_plain(x: &Tensor, keep: &[bool], op: &ScanOperator) -> Result<Tensor> {
    require_time_invariant(op, x, keep)?;
    let mut xm = x.clone();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            xm.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    op.scan(&xm)
}

/// Drops pruned tokens and scans the retained block only; `K×D` in
/// retained-block order.
pub fn prune_infer(x: &Tensor, keep: &[bool], op: &ScanOperator, class_pos: Option<usize>) -> Result<Tensor> {
    require_time_invariant(op, x, keep)?;
    let perm = rearrangement(keep, class_pos)?;
    op.scan(&x.gather_rows(&perm.order[..perm.retained]))
}

/// Pruned positions only evolve the state. Returns outputs at the retained
/// positions (ascending) and the per-channel number of `Ā` applications.
pub fn prune_infer_ha(x: &Tensor, keep: &[bool], op: &ScanOperator) -> Result<(Tensor, u64)> {
    require_time_invariant(op, x, keep)?;
    let retained: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let d = op.channels();
    let n = op.disc.n_state();
    let mut y = Tensor::zeros(&[retained.len(), d]);
    let (Some(&first), Some(&last)) = (retained.first(), retained.last()) else {
        return Ok((y, 0));
    };
    let mut evolutions = 0;
    let mut h = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for ch in 0..d {
        h.iter_mut().for_each(|v| *v = 0.0);
        let mut out = 0;
        for t in first..=last {
            if t > first {
                op.disc.evolve(t, ch, &mut h, &mut scratch);
                if ch == 0 {
                    evolutions += 1;
                }
            }
            if keep[t] {
                let xv = x.at(&[t, ch]);
                for (hv, bv) in h.iter_mut().zip(op.disc.b_row(t, ch)) {
                    *hv += bv * xv;
                }
                y.set(&[out, ch], h.iter().zip(c_row(&op.c, t, ch)).map(|(a, b)| a * b).sum());
                out += 1;
            }
        }
    }
    Ok((y, evolutions))
}

/// Rearranges, scans the full length, and returns the retained block's outputs.
pub fn prune_train_dyvm(x: &Tensor, keep: &[bool], op: &ScanOperator, class_pos: Option<usize>) -> Result<Tensor> {
    require_time_invariant(op, x, keep)?;
    let (xr, perm) = rearrange(x, keep, class_pos)?;
    let y = op.scan(&xr)?;
    Ok(y.gather_rows(&(0..perm.retained).collect::<Vec<_>>()))
}

/// `true` when the retained indices form one contiguous run.
pub fn is_consecutive(keep: &[bool]) -> bool {
    let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    idx.windows(2).all(|w| w[1] == w[0] + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{discretize, SsmParams, StateMatrix};

    pub(crate) fn random_op(rng: &mut Rng, d: usize, n: usize) -> ScanOperator {
        let p = SsmParams {
            a: StateMatrix::Diagonal(Tensor::rand_uniform(&[d, n], -2.0, -0.1, rng)),
            b: Tensor::randn(&[d, n], 1.0, rng),
            c: Tensor::randn(&[d, n], 1.0, rng),
            delta: Tensor::rand_uniform(&[d], 0.1, 1.0, rng),
        };
        ScanOperator::from_params(&p).unwrap()
    }

    fn scalar_op(a_bar: f64) -> ScanOperator {
        let disc = crate::ssm::DiscreteSsm::from_parts(Tensor::full(&[1, 1, 1], a_bar), Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        ScanOperator::new(disc, Tensor::full(&[1, 1], 1.0)).unwrap()
    }

    fn mask_from_bits(bits: u32, len: usize) -> Vec<bool> {
        (0..len).map(|i| bits >> i & 1 == 1).collect()
    }

    #[test]
    fn stage_schedule_for_196_patches() {
        let counts: Vec<usize> = (1..=3).map(|s| stage_keep_count(0.7, s, 196)).collect();
        assert_eq!(counts, [137, 96, 67]);
        assert_eq!(stage_keep_count(1.0, 3, 196), 196);
    }

    #[test]
    fn zero_predictor_is_uniform_except_pruned() {
        let w = PredictorWeights::zeros(4, 2);
        let mut rng = Rng::new(1);
        let h = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let mut prev = TokenMask::full(2, 5, Some(2));
        prev.keep[1][4] = false;
        let p = predict(&w, &h, &prev).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                let want = if b == 1 && i == 4 { 0.0 } else { 0.5 };
                assert_eq!(p.retain_prob(b, i), want);
                assert!((p.probs.at(&[b, i, 0]) + p.probs.at(&[b, i, 1]) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pruned_token_embedding_has_no_effect() {
        let mut rng = Rng::new(2);
        let w = PredictorWeights::random(3, 4, 1.0, &mut rng);
        let h = Tensor::randn(&[1, 4, 3], 1.0, &mut rng);
        let mut prev = TokenMask::full(1, 4, None);
        prev.keep[0][1] = false;
        let base = predict(&w, &h, &prev).unwrap();
        let mut h2 = h.clone();
        h2.row_mut(0)[3..6].copy_from_slice(&[100.0, -50.0, 7.0]);
        let moved = predict(&w, &h2, &prev).unwrap();
        assert_eq!(base, moved);
        assert_eq!(base.retain_prob(0, 1), 0.0);
    }

    #[test]
    fn predictor_accepts_other_feature_widths() {
        let mut rng = Rng::new(3);
        let w = PredictorWeights::random(7, 4, 0.5, &mut rng);
        let feats = Tensor::randn(&[1, 3, 7], 1.0, &mut rng);
        assert!(predict(&w, &feats, &TokenMask::full(1, 3, None)).is_ok());
        assert!(predict(&w, &Tensor::zeros(&[1, 3, 6]), &TokenMask::full(1, 3, None)).is_err());
    }

    #[test]
    fn certain_retention_keeps_mask() {
        let logits = Tensor::from_fn(&[1, 6, 2], |i| if i % 2 == 0 { 1e9 } else { -1e9 });
        let pred = PrunePrediction::from_logits(logits).unwrap();
        let mut prev = TokenMask::full(1, 6, Some(3));
        prev.keep[0][0] = false;
        let mut rng = Rng::new(4);
        let m = sample_mask(&pred, &prev, &mut rng, SampleMode::Train { tau: 1.0 }).unwrap();
        assert_eq!(m.keep, prev.keep);
        assert_eq!(m.stage, 1);
    }

    #[test]
    fn infer_keeps_top_k() {
        let mut rng = Rng::new(5);
        let pred = PrunePrediction::from_logits(Tensor::randn(&[2, 197, 2], 1.0, &mut rng)).unwrap();
        let prev = TokenMask::full(2, 197, Some(98));
        let m = sample_mask(&pred, &prev, &mut rng, SampleMode::Infer { keep: 137 }).unwrap();
        for b in 0..2 {
            assert_eq!(m.retained_tokens(b), 137);
            assert!(m.keep[b][98]);
            let kept_min = (0..197).filter(|&i| m.keep[b][i] && i != 98).map(|i| pred.retain_prob(b, i)).fold(1.0, f64::min);
            let dropped_max = (0..197).filter(|&i| !m.keep[b][i]).map(|i| pred.retain_prob(b, i)).fold(0.0, f64::max);
            assert!(kept_min >= dropped_max);
        }
        assert!(sample_mask(&pred, &prev, &mut rng, SampleMode::Infer { keep: 0 }).is_err());
    }

    #[test]
    fn gumbel_hard_frequency_matches_probability() {
        let logits = Tensor::new(vec![1, 3, 2], vec![0.0, 0.0, 1.2, -0.3, -2.0, 0.5]).unwrap();
        let pred = PrunePrediction::from_logits(logits).unwrap();
        let prev = TokenMask::full(1, 3, None);
        let mut rng = Rng::new(6);
        let draws = 100_000;
        let mut hits = [0usize; 3];
        for _ in 0..draws {
            let m = sample_mask(&pred, &prev, &mut rng, SampleMode::Train { tau: 1.0 }).unwrap();
            for i in 0..3 {
                hits[i] += m.keep[0][i] as usize;
            }
        }
        for i in 0..3 {
            let freq = hits[i] as f64 / draws as f64;
            assert!((freq - pred.retain_prob(0, i)).abs() < 0.01, "token {i}: {freq}");
        }
    }

    #[test]
    fn sampled_masks_are_monotone_and_keep_class() {
        let mut rng = Rng::new(7);
        let mut mask = TokenMask::full(4, 17, Some(8));
        for _ in 0..3 {
            let pred = PrunePrediction::from_logits(Tensor::randn(&[4, 17, 2], 1.0, &mut rng)).unwrap();
            let next = sample_mask(&pred, &mask, &mut rng, SampleMode::Train { tau: 1.0 }).unwrap();
            assert!(next.is_subset_of(&mask));
            assert!(next.keep.iter().all(|r| r[8]));
            mask = next;
        }
    }

    #[test]
    fn rearrange_identity_when_nothing_pruned() {
        let x = Tensor::from_fn(&[5, 2], |i| i as f64);
        let (y, p) = rearrange(&x, &[true; 5], Some(2)).unwrap();
        assert!(p.is_identity());
        assert_eq!(y, x);
        let (_, p) = rearrange(&x, &[true; 5], Some(0)).unwrap();
        assert_eq!(p.order, [1, 2, 0, 3, 4]);
    }

    #[test]
    fn rearrange_middle_pruned() {
        let x = Tensor::from_fn(&[3, 1], |i| i as f64);
        let (y, p) = rearrange(&x, &[true, false, true], None).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 1.0]);
        assert_eq!(p.retained, 2);
        assert!(rearrange(&x, &[true, false, true], Some(1)).is_err());
    }

    #[test]
    fn rearrange_round_trip_and_order() {
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let l = 2 + rng.below(30);
            let class = rng.below(l);
            let keep: Vec<bool> = (0..l).map(|i| i == class || rng.bernoulli(0.6)).collect();
            let x = Tensor::randn(&[l, 3], 1.0, &mut rng);
            let (y, p) = rearrange(&x, &keep, Some(class)).unwrap();
            assert_eq!(p.invert(&y), x);
            let k = p.retained - 1;
            assert_eq!(p.order[k / 2], class);
            let kept: Vec<usize> = p.order[..p.retained].iter().copied().filter(|&i| i != class).collect();
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
            assert!(p.order[p.retained..].windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn strategies_without_pruning_equal_plain_scan() {
        let mut rng = Rng::new(9);
        let op = random_op(&mut rng, 3, 4);
        let x = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let keep = [true; 9];
        let y = op.scan(&x).unwrap();
        assert_eq!(prune_train_plain(&x, &keep, &op).unwrap(), y);
        assert_eq!(prune_infer(&x, &keep, &op, None).unwrap(), y);
        assert_eq!(prune_train_dyvm(&x, &keep, &op, None).unwrap(), y);
        let (ha, count) = prune_infer_ha(&x, &keep, &op).unwrap();
        assert!(ha.max_abs_diff(&y).unwrap() < 1e-12);
        assert_eq!(count, 8);
    }

    #[test]
    fn middle_pruned_three_token_example() {
        let a = 0.5;
        let op = scalar_op(a);
        let x = Tensor::new(vec![3, 1], vec![1.0, 10.0, 100.0]).unwrap();
        let keep = [true, false, true];
        // Plain masking: x₀ reaches position 2 through two evolutions.
        let plain = prune_train_plain(&x, &keep, &op).unwrap();
        assert_eq!(plain.at(&[2, 0]), a * a * 1.0 + 100.0);
        // Dropped and rearranged: one evolution.
        let infer = prune_infer(&x, &keep, &op, None).unwrap();
        assert_eq!(infer.data(), &[1.0, a * 1.0 + 100.0]);
        assert_eq!(prune_train_dyvm(&x, &keep, &op, None).unwrap(), infer);
        let (ha, count) = prune_infer_ha(&x, &keep, &op).unwrap();
        assert_eq!(ha.data(), &[1.0, a * a + 100.0]);
        assert_eq!(count, 2);
    }

    #[test]
    fn single_retained_token_has_no_evolution() {
        let mut rng = Rng::new(10);
        let op = random_op(&mut rng, 2, 3);
        let x = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let keep = [false, false, false, true, false];
        let y = prune_infer(&x, &keep, &op, None).unwrap();
        let want = op.scan(&x.gather_rows(&[3])).unwrap();
        assert_eq!(y, want);
        assert_eq!(prune_infer_ha(&x, &keep, &op).unwrap().1, 0);
    }

    #[test]
    fn exhaustive_consistency_small_lengths() {
        let mut rng = Rng::new(11);
        for l in 1..=10 {
            let op = random_op(&mut rng, 2, 3);
            let x = Tensor::randn(&[l, 2], 1.0, &mut rng);
            for bits in 1..(1u32 << l) {
                let keep = mask_from_bits(bits, l);
                let retained: Vec<usize> = (0..l).filter(|&i| keep[i]).collect();
                let infer = prune_infer(&x, &keep, &op, None).unwrap();
                let dyvm = prune_train_dyvm(&x, &keep, &op, None).unwrap();
                assert!(dyvm.max_abs_diff(&infer).unwrap() < 1e-12);
                let plain = prune_train_plain(&x, &keep, &op).unwrap().gather_rows(&retained);
                let (ha, ha_count) = prune_infer_ha(&x, &keep, &op).unwrap();
                assert!(ha.max_abs_diff(&plain).unwrap() < 1e-12);
                let dyvm_count = retained.len() as u64 - 1;
                if is_consecutive(&keep) {
                    assert_eq!(ha_count, dyvm_count);
                    assert!(plain.max_abs_diff(&infer).unwrap() < 1e-12);
                } else {
                    assert!(ha_count > dyvm_count);
                    assert!(plain.max_abs_diff(&infer).unwrap() > 1e-6);
                }
            }
        }
    }

    #[test]
    fn strategies_reject_selective_operators() {
        let p = SsmParams {
            a: StateMatrix::Diagonal(Tensor::vector(vec![-1.0])),
            b: Tensor::full(&[3, 1, 1], 1.0),
            c: Tensor::full(&[1, 1], 1.0),
            delta: Tensor::full(&[3, 1], 0.5),
        };
        let op = ScanOperator::new(discretize(&p).unwrap(), p.c.clone()).unwrap();
        let x = Tensor::zeros(&[3, 1]);
        assert!(prune_infer(&x, &[true; 3], &op, None).is_err());
    }
}
