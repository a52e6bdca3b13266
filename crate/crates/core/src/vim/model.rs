use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layer::{combine, combine_ungated, prepare, run_block, Direction};
use super::weights::ModelWeights;
use crate::block_select::{route, select_blocks, BlockPolicy, GateMode, GateRow, RouteStats};
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{linear, rms_norm};
use crate::numerics::{Rng, Tensor};
use crate::opcount::{scope, OpKind};
use crate::pruning::{predict, rearrangement_with, sample_mask, ClassSlot, PredictorInput, SampleMode, TokenMask};
use crate::ssm::{discretize, SsmParams, StateMatrix};

/// Splits `image: H×W×C` into non-overlapping `p×p` patches, row-major,
/// each flattened in `(row, col, channel)` order.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = image.dims3("image")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} image not divisible into {patch}×{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Tensor::zeros(&[ph * pw, dim]);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        row[k] = image.at(&[py * patch + dy, px * patch + dx, ch]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Projects patches and adds position embeddings; `P×D`.
pub fn patchify(cfg: &ModelConfig, w: &ModelWeights, image: &Tensor) -> Result<Tensor> {
    let want = [cfg.image_size, cfg.image_size, cfg.in_channels];
    if image.shape() != want {
        return shape_err("image", &want, image.shape());
    }
    let patches = extract_patches(image, cfg.patch_size)?;
    let tokens = {
        let _s = scope(OpKind::PatchEmbed);
        linear(&patches, &w.patch_w, Some(&w.patch_b))?
    };
    tokens.zip_map(&w.pos_embed, |a, b| a + b)
}

/// Index at which [`insert_class_token`] places the class token.
pub fn class_slot_index(n_tokens: usize, slot: ClassSlot) -> usize {
    slot.index(n_tokens)
}

pub fn insert_class_token(tokens: &Tensor, class: &[f64], slot: ClassSlot) -> Result<Tensor> {
    let [n, d] = tokens.dims2("insert_class_token")?;
    if class.len() != d {
        return shape_err("class token", &[d], &[class.len()]);
    }
    let at = class_slot_index(n, slot);
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(&tokens.data()[..at * d]);
    data.extend_from_slice(class);
    data.extend_from_slice(&tokens.data()[at * d..]);
    Tensor::new(vec![n + 1, d], data)
}

/// Inverse of [`insert_class_token`]: `(tokens, class)`.
pub fn remove_class_token(seq: &Tensor, slot: ClassSlot) -> Result<(Tensor, Vec<f64>)> {
    let [l, _] = seq.dims2("remove_class_token")?;
    if l == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let at = class_slot_index(l - 1, slot);
    let rest: Vec<usize> = (0..l).filter(|&i| i != at).collect();
    Ok((seq.gather_rows(&rest), seq.row(at).to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Full-length sequences; pruned tokens are moved behind the retained
    /// block and gated-off blocks are computed then zeroed.
    Train,
    /// Pruned tokens are dropped and gated-off blocks are never run.
    Infer,
}

/// How masks and gates are chosen.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// Gumbel draws.
    Stochastic,
    /// Top-K tokens and thresholded gates.
    Deterministic,
    /// Reuse the decisions of an earlier pass.
    Replay(&'a Decisions),
}

/// Sampled masks (one per stage) and gates (one row per layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub masks: Vec<TokenMask>,
    pub gates: Vec<GateRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub layout: Layout,
    pub masks: Vec<TokenMask>,
    pub policy: BlockPolicy,
    /// Rows actually processed at each layer, per sample.
    pub seq_lens: Vec<Vec<usize>>,
    /// Retained block length (class token included) at each layer, per sample.
    pub retained_lens: Vec<Vec<usize>>,
    /// Retained non-class tokens after each stage, per sample.
    pub stage_counts: Vec<Vec<usize>>,
    /// Position of the class token in the processed sequence at each layer.
    pub class_positions: Vec<Vec<usize>>,
    /// Routed sub-batch sizes at each layer, `[forward, backward]`.
    pub routes: Vec<[RouteStats; 2]>,
    /// Last-layer features before the final norm, `L×D` in original token
    /// order; rows of tokens absent from the processed sequence are zero.
    #[serde(skip)]
    pub final_tokens: Vec<Tensor>,
    pub final_keep: Vec<Vec<bool>>,
}

impl Diagnostics {
    pub fn decisions(&self) -> Decisions {
        Decisions {
            masks: self.masks.clone(),
            gates: self.policy.layers.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B×classes`.
    pub logits: Tensor,
    pub diagnostics: Diagnostics,
}

/// One sample's processed sequence: `h` rows follow `order` (original
/// token indices); the first `retained` rows form the retained block.
struct Seq {
    order: Vec<usize>,
    h: Tensor,
    retained: usize,
}

impl Seq {
    fn position_of(&self, token: usize) -> usize {
        self.order.iter().position(|&o| o == token).expect("token present")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        if weights.layers.len() != cfg.n_layers || weights.predictors.len() != cfg.n_stages() {
            return Err(Error::Config("weights do not match config".into()));
        }
        Ok(Self { cfg, weights })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&cfg, &mut Rng::new(seed))?;
        Self::new(cfg, weights)
    }

    /// Patch tokens with the class token inserted; `L×D`.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let tokens = patchify(&self.cfg, &self.weights, image)?;
        insert_class_token(&tokens, &self.weights.class_token, self.cfg.class_token_position)
    }

    pub fn random_image(&self, rng: &mut Rng) -> Tensor {
        let s = self.cfg.image_size;
        Tensor::randn(&[s, s, self.cfg.in_channels], 1.0, rng)
    }

    fn head(&self, class_row: &[f64]) -> Result<Vec<f64>> {
        let _s = scope(OpKind::Head);
        let x = Tensor::new(vec![1, class_row.len()], class_row.to_vec())?;
        let normed = rms_norm(&x, &self.weights.norm_f)?;
        Ok(linear(&normed, &self.weights.head_w, Some(&self.weights.head_b))?.into_data())
    }

    /// Plain stacked bidirectional layers: no predictors, no selectors.
    pub fn forward_baseline(&self, images: &[Tensor]) -> Result<Tensor> {
        let cfg = &self.cfg;
        let c0 = cfg.class_index();
        let mut logits = Vec::with_capacity(images.len() * cfg.num_classes);
        for image in images {
            let mut h = self.embed(image)?;
            let l = h.dim(0);
            for lw in &self.weights.layers {
                let pre = prepare(cfg, lw, &h)?;
                let f = run_block(cfg, lw, &pre, Direction::Forward, &[0..l])?;
                let b = run_block(cfg, lw, &pre, Direction::Backward, &[0..l])?;
                h = combine_ungated(lw, &h, &f, &b)?;
            }
            logits.extend(self.head(h.row(c0))?);
        }
        Tensor::new(vec![images.len(), cfg.num_classes], logits)
    }

    /// Features the stage predictor reads for the given token rows.
    fn predictor_features(&self, layer: usize, rows: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        if cfg.predictor_input == PredictorInput::Tokens {
            return Ok(rows.clone());
        }
        let lw = &self.weights.layers[layer];
        let pre = prepare(cfg, lw, rows)?;
        let inp = &pre.dirs[0];
        Ok(match cfg.predictor_input {
            PredictorInput::Tokens => unreachable!(),
            PredictorInput::Delta => inp.delta.clone(),
            PredictorInput::C => inp.c.clone(),
            PredictorInput::BBar => {
                let (l, e, n) = (rows.dim(0), cfg.inner_dim(), cfg.n_state);
                let params = SsmParams {
                    a: StateMatrix::Diagonal(lw.dirs[0].a()),
                    b: Tensor::from_fn(&[l, e, n], |i| inp.b.at(&[i / (e * n), i % n])),
                    c: Tensor::zeros(&[e, n]),
                    delta: inp.delta.clone(),
                };
                let b_bar = discretize(&params)?.b_bar().clone();
                Tensor::from_fn(&[l, n], |i| {
                    let (t, k) = (i / n, i % n);
                    (0..e).map(|ch| b_bar.at(&[t, ch, k])).sum::<f64>() / e as f64
                })
            }
        })
    }

    fn stage_mask(
        &self,
        layer: usize,
        stage: usize,
        seqs: &[Seq],
        prev: &TokenMask,
        policy: Policy,
        rng: &mut Rng,
    ) -> Result<TokenMask> {
        let cfg = &self.cfg;
        let _s = scope(OpKind::Predictor);
        let l = cfg.seq_len();
        let width = cfg.predictor_input_dim();
        let mut feats = Tensor::zeros(&[seqs.len(), l, width]);
        for (b, seq) in seqs.iter().enumerate() {
            let live: Vec<usize> = (0..seq.retained).collect();
            let f = self.predictor_features(layer, &seq.h.gather_rows(&live))?;
            for (r, &tok) in seq.order[..seq.retained].iter().enumerate() {
                let base = (b * l + tok) * width;
                feats.data_mut()[base..base + width].copy_from_slice(f.row(r));
            }
        }
        let pred = predict(&self.weights.predictors[stage - 1], &feats, prev)?;
        match policy {
            Policy::Stochastic => sample_mask(&pred, prev, rng, SampleMode::Train { tau: cfg.gumbel_tau }),
            Policy::Deterministic => sample_mask(
                &pred,
                prev,
                rng,
                SampleMode::Infer {
                    keep: cfg.stage_schedule()[stage - 1],
                },
            ),
            Policy::Replay(d) => {
                let m = d
                    .masks
                    .get(stage - 1)
                    .ok_or_else(|| Error::InvalidArgument(format!("no replayed mask for stage {stage}")))?;
                if m.batch() != prev.batch() || m.len() != prev.len() {
                    return shape_err("replayed mask", &[prev.batch(), prev.len()], &[m.batch(), m.len()]);
                }
                if m.class_pos != prev.class_pos || !m.is_subset_of(prev) {
                    return Err(Error::InvalidArgument("replayed mask is not nested in the previous stage".into()));
                }
                Ok(m.clone())
            }
        }
    }

    fn layer_gates(&self, layer: usize, seqs: &[Seq], policy: Policy, rng: &mut Rng) -> Result<GateRow> {
        let cfg = &self.cfg;
        let b = seqs.len();
        if !cfg.gates() {
            return Ok(GateRow::all_on(b));
        }
        if let Policy::Replay(d) = policy {
            let row = d
                .gates
                .get(layer)
                .ok_or_else(|| Error::InvalidArgument(format!("no replayed gates for layer {layer}")))?;
            if row.hard.len() != b {
                return shape_err("replayed gates", &[b], &[row.hard.len()]);
            }
            return Ok(row.clone());
        }
        let _s = scope(OpKind::Selector);
        let c0 = cfg.class_index();
        let rows: Vec<Tensor> = seqs.iter().map(|s| s.h.index(s.position_of(c0))).collect();
        let class_tokens = Tensor::stack(&rows)?;
        let mode = match policy {
            Policy::Stochastic => GateMode::Train { tau: cfg.gumbel_tau },
            _ => GateMode::Infer {
                threshold: cfg.gate_threshold,
            },
        };
        select_blocks(&self.weights.layers[layer].selector, &class_tokens, rng, mode)
    }

    /// Full pipeline: embed, layers with pruning stages and block gates,
    /// final norm and head on the class token.
    pub fn forward(&self, images: &[Tensor], layout: Layout, policy: Policy, rng: &mut Rng) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let batch = images.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let l = cfg.seq_len();
        let c0 = cfg.class_index();
        let mut seqs = images
            .iter()
            .map(|img| {
                Ok(Seq {
                    order: (0..l).collect(),
                    h: self.embed(img)?,
                    retained: l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mask = TokenMask::full(batch, l, Some(c0));
        let mut diag = Diagnostics {
            layout,
            masks: Vec::new(),
            policy: BlockPolicy::default(),
            seq_lens: Vec::new(),
            retained_lens: Vec::new(),
            stage_counts: Vec::new(),
            class_positions: Vec::new(),
            routes: Vec::new(),
            final_tokens: Vec::new(),
            final_keep: Vec::new(),
        };
        let mut stage = 0;
        for (li, lw) in self.weights.layers.iter().enumerate() {
            if cfg.prunes() && cfg.prune_layers.contains(&li) {
                stage += 1;
                let next = self.stage_mask(li, stage, &seqs, &mask, policy, rng)?;
                for (b, seq) in seqs.iter_mut().enumerate() {
                    let perm = rearrangement_with(&next.keep[b], Some(c0), cfg.class_token_position)?;
                    let order: Vec<usize> = match layout {
                        Layout::Train => perm.order.clone(),
                        Layout::Infer => perm.order[..perm.retained].to_vec(),
                    };
                    let mut pos = vec![usize::MAX; l];
                    for (r, &o) in seq.order.iter().enumerate() {
                        pos[o] = r;
                    }
                    let rows: Vec<usize> = order.iter().map(|&o| pos[o]).collect();
                    seq.h = seq.h.gather_rows(&rows);
                    seq.order = order;
                    seq.retained = perm.retained;
                }
                diag.stage_counts.push((0..batch).map(|b| next.retained_tokens(b)).collect());
                diag.masks.push(next.clone());
                mask = next;
            }

            let gates = self.layer_gates(li, &seqs, policy, rng)?;
            diag.seq_lens.push(seqs.iter().map(|s| s.h.dim(0)).collect());
            diag.retained_lens.push(seqs.iter().map(|s| s.retained).collect());
            diag.class_positions.push(seqs.iter().map(|s| s.position_of(c0)).collect());

            match layout {
                Layout::Train => {
                    for (b, seq) in seqs.iter_mut().enumerate() {
                        let len = seq.h.dim(0);
                        let segments = [0..seq.retained, seq.retained..len];
                        let pre = prepare(cfg, lw, &seq.h)?;
                        let f = run_block(cfg, lw, &pre, Direction::Forward, &segments)?;
                        let bw = run_block(cfg, lw, &pre, Direction::Backward, &segments)?;
                        seq.h = combine(lw, &seq.h, &f, &bw, [gates.gate(b, 0), gates.gate(b, 1)])?;
                    }
                    let all = RouteStats {
                        sub_batch: batch,
                        invocations: 1,
                    };
                    diag.routes.push([all, all]);
                }
                Layout::Infer => {
                    let pres = seqs
                        .iter()
                        .map(|s| prepare(cfg, lw, &s.h))
                        .collect::<Result<Vec<_>>>()?;
                    let idx: Vec<usize> = (0..batch).collect();
                    let mut outs = Vec::with_capacity(2);
                    let mut stats = [RouteStats::default(); 2];
                    for dir in [Direction::Forward, Direction::Backward] {
                        let (o, st) = route(&gates.column(dir.index()), &idx, |picked| {
                            picked
                                .iter()
                                .map(|&&i| run_block(cfg, lw, &pres[i], dir, &[0..seqs[i].h.dim(0)]))
                                .collect()
                        })?;
                        stats[dir.index()] = st;
                        outs.push(o);
                    }
                    for (b, seq) in seqs.iter_mut().enumerate() {
                        let zero = Tensor::zeros(pres[b].x.shape());
                        let f = outs[0][b].as_ref().unwrap_or(&zero);
                        let bw = outs[1][b].as_ref().unwrap_or(&zero);
                        seq.h = combine(lw, &seq.h, f, bw, [gates.gate(b, 0), gates.gate(b, 1)])?;
                    }
                    diag.routes.push(stats);
                }
            }
            diag.policy.layers.push(gates);
        }

        let mut logits = Vec::with_capacity(batch * cfg.num_classes);
        for seq in &seqs {
            logits.extend(self.head(seq.h.row(seq.position_of(c0)))?);
            let mut t = Tensor::zeros(&[l, cfg.embed_dim]);
            for (r, &o) in seq.order.iter().enumerate() {
                t.row_mut(o).copy_from_slice(seq.h.row(r));
            }
            diag.final_tokens.push(t);
        }
        diag.final_keep = mask.keep.clone();
        Ok(ForwardOutput {
            logits: Tensor::new(vec![batch, cfg.num_classes], logits)?,
            diagnostics: diag,
        })
    }
}
