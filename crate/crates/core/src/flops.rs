//! Analytic operation counts for a configured model.
//!
//! Convention: one multiply-accumulate per matmul term, one op per element
//! for norms, activations and elementwise products; bias and residual
//! additions are free. The selective scan costs two ops per
//! `(token, channel, state)`, with discretisation folded in. The same
//! convention drives the instrumented forward pass, so the two agree.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::opcount::OpKind;
use crate::pruning::stage_keep_count;
use crate::vim::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub seq_len: usize,
    pub forward: f64,
    pub backward: f64,
    /// `norm + in_proj + param_proj + out_proj`.
    pub projection: f64,
    pub predictor: f64,
    pub selector: f64,
    pub norm: f64,
    pub in_proj: f64,
    pub param_proj: f64,
    pub out_proj: f64,
}

impl LayerFlops {
    pub fn total(&self) -> f64 {
        self.forward + self.backward + self.projection + self.predictor + self.selector
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub model: String,
    pub token_ratio: f64,
    pub block_ratio: f64,
    pub include_overhead: bool,
    pub per_layer: Vec<LayerFlops>,
    pub patch_embed: f64,
    /// Final norm on the class token plus the classifier.
    pub head: f64,
    /// Giga-ops.
    pub total_flops: f64,
    pub baseline_flops: f64,
    pub reduction_vs_baseline: f64,
}

impl FlopsReport {
    /// Sum of all parts, in ops.
    pub fn total_ops(&self) -> f64 {
        self.patch_embed + self.head + self.per_layer.iter().map(LayerFlops::total).sum::<f64>()
    }

    pub fn reduction_pct(&self) -> f64 {
        100.0 * self.reduction_vs_baseline
    }

    /// Totals keyed like the instrumented counters.
    pub fn by_kind(&self) -> Vec<(OpKind, f64)> {
        let sum = |f: fn(&LayerFlops) -> f64| self.per_layer.iter().map(f).sum::<f64>();
        vec![
            (OpKind::PatchEmbed, self.patch_embed),
            (OpKind::Norm, sum(|l| l.norm)),
            (OpKind::InProj, sum(|l| l.in_proj)),
            (OpKind::ParamProj, sum(|l| l.param_proj)),
            (OpKind::ForwardBlock, sum(|l| l.forward)),
            (OpKind::BackwardBlock, sum(|l| l.backward)),
            (OpKind::OutProj, sum(|l| l.out_proj)),
            (OpKind::Predictor, sum(|l| l.predictor)),
            (OpKind::Selector, sum(|l| l.selector)),
            (OpKind::Head, self.head),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountOptions {
    /// Count predictor and selector cost.
    pub include_overhead: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self { include_overhead: true }
    }
}

/// Expected cost when every block is active with probability `block_ratio`.
pub fn count_flops(cfg: &ModelConfig, token_ratio: f64, block_ratio: f64) -> Result<FlopsReport> {
    count_flops_opts(cfg, token_ratio, block_ratio, CountOptions::default())
}

pub fn count_flops_opts(cfg: &ModelConfig, token_ratio: f64, block_ratio: f64, opts: CountOptions) -> Result<FlopsReport> {
    check_ratios(token_ratio, block_ratio)?;
    let active = vec![[block_ratio; 2]; cfg.n_layers];
    count_core(cfg, token_ratio, block_ratio, &active, block_ratio < 1.0, opts)
}

/// Cost for realised gates: `active[l] = [forward, backward]` fraction of
/// samples running each block at layer `l`. `selectors` says whether the
/// block selectors ran.
pub fn count_flops_with_policy(cfg: &ModelConfig, token_ratio: f64, active: &[[f64; 2]], selectors: bool) -> Result<FlopsReport> {
    if active.len() != cfg.n_layers {
        return Err(Error::InvalidArgument(format!(
            "{} layer activities for {} layers",
            active.len(),
            cfg.n_layers
        )));
    }
    let mean = active.iter().map(|a| a[0] + a[1]).sum::<f64>() / (2 * cfg.n_layers) as f64;
    check_ratios(token_ratio, mean)?;
    count_core(cfg, token_ratio, mean, active, selectors, CountOptions::default())
}

fn check_ratios(token_ratio: f64, block_ratio: f64) -> Result<()> {
    if !(token_ratio > 0.0 && token_ratio <= 1.0) || !(0.0..=1.0).contains(&block_ratio) {
        return Err(Error::InvalidArgument(format!(
            "ratios out of range: token {token_ratio}, block {block_ratio}"
        )));
    }
    Ok(())
}

fn layer_lengths(cfg: &ModelConfig, token_ratio: f64) -> Vec<(usize, Option<usize>)> {
    let p = cfg.num_patches();
    let prunes = token_ratio < 1.0;
    let mut len = p + 1;
    let mut stage = 0;
    (0..cfg.n_layers)
        .map(|l| {
            let mut before = None;
            if prunes && cfg.prune_layers.contains(&l) {
                stage += 1;
                before = Some(len);
                len = stage_keep_count(token_ratio, stage, p) + 1;
            }
            (len, before)
        })
        .collect()
}

fn count_core(
    cfg: &ModelConfig,
    token_ratio: f64,
    block_ratio: f64,
    active: &[[f64; 2]],
    selectors: bool,
    opts: CountOptions,
) -> Result<FlopsReport> {
    cfg.validate()?;
    let d = cfg.embed_dim as f64;
    let e = cfg.inner_dim() as f64;
    let n = cfg.n_state as f64;
    let r = cfg.dt_rank() as f64;
    let k = cfg.conv_kernel as f64;
    let hidden = cfg.predictor_hidden() as f64;
    let per_layer: Vec<LayerFlops> = layer_lengths(cfg, token_ratio)
        .into_iter()
        .enumerate()
        .map(|(layer, (len, before))| {
            let lf = len as f64;
            let block = lf * e * (k + 4.0 + 2.0 * n);
            let norm = lf * d;
            let in_proj = lf * d * 2.0 * e;
            let param_proj = 2.0 * (lf * e * (r + 2.0 * n) + lf * r * e + lf * e);
            let out_proj = lf * e * d;
            let predictor = match before {
                Some(lb) if opts.include_overhead => lb as f64 * (d * hidden + hidden + 2.0 * hidden + 2.0),
                _ => 0.0,
            };
            let selector = if selectors && opts.include_overhead { 2.0 * d + 2.0 } else { 0.0 };
            LayerFlops {
                layer,
                seq_len: len,
                forward: block * active[layer][0],
                backward: block * active[layer][1],
                projection: norm + in_proj + param_proj + out_proj,
                predictor,
                selector,
                norm,
                in_proj,
                param_proj,
                out_proj,
            }
        })
        .collect();
    let patch_embed = (cfg.num_patches() * cfg.patch_dim() * cfg.embed_dim) as f64;
    let head = d + d * cfg.num_classes as f64;
    let mut report = FlopsReport {
        model: cfg.name.clone(),
        token_ratio,
        block_ratio,
        include_overhead: opts.include_overhead,
        per_layer,
        patch_embed,
        head,
        total_flops: 0.0,
        baseline_flops: 0.0,
        reduction_vs_baseline: 0.0,
    };
    report.total_flops = report.total_ops() / 1e9;
    report.baseline_flops = if token_ratio == 1.0 && block_ratio == 1.0 && !selectors {
        report.total_flops
    } else {
        count_core(cfg, 1.0, 1.0, &vec![[1.0; 2]; cfg.n_layers], false, opts)?.total_flops
    };
    report.reduction_vs_baseline = 1.0 - report.total_flops / report.baseline_flops;
    Ok(report)
}

/// Every `(token, block)` combination, token-major.
pub fn sweep_ratios(cfg: &ModelConfig, token_ratios: &[f64], block_ratios: &[f64]) -> Result<Vec<FlopsReport>> {
    sweep_ratios_opts(cfg, token_ratios, block_ratios, CountOptions::default())
}

pub fn sweep_ratios_opts(cfg: &ModelConfig, token_ratios: &[f64], block_ratios: &[f64], opts: CountOptions) -> Result<Vec<FlopsReport>> {
    token_ratios
        .iter()
        .flat_map(|&t| block_ratios.iter().map(move |&b| (t, b)))
        .map(|(t, b)| count_flops_opts(cfg, t, b, opts))
        .collect()
}

pub const CSV_HEADER: &str = "model,token_ratio,block_ratio,gflops,reduction_pct";

pub fn to_csv(reports: &[FlopsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.2}\n",
            r.model,
            r.token_ratio,
            r.block_ratio,
            r.total_flops,
            r.reduction_pct()
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionStrategy {
    PlainInfer,
    Ha,
    Dyvm,
}

/// `Ā` applications per channel when inferring with the given mask row.
pub fn count_evolution_ops(strategy: EvolutionStrategy, keep: &[bool]) -> u64 {
    let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    match (strategy, idx.first(), idx.last()) {
        (_, None, _) | (_, _, None) => 0,
        (EvolutionStrategy::Ha, Some(&first), Some(&last)) => (last - first) as u64,
        (EvolutionStrategy::PlainInfer | EvolutionStrategy::Dyvm, _, _) => idx.len() as u64 - 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::is_consecutive;

    fn preset(name: &str) -> ModelConfig {
        ModelConfig::preset(name).unwrap()
    }

    fn within(got: f64, want: f64, rel: f64) -> bool {
        (got - want).abs() <= rel * want
    }

    #[test]
    fn baselines_near_reference() {
        for (name, want) in [("vim-t", 1.45), ("vim-s", 5.08), ("vim-b", 18.87)] {
            let r = count_flops(&preset(name), 1.0, 1.0).unwrap();
            assert!(within(r.total_flops, want, 0.05), "{name}: {}", r.total_flops);
            assert_eq!(r.reduction_vs_baseline, 0.0);
        }
        let t = count_flops(&preset("vim-t"), 1.0, 1.0).unwrap().total_flops;
        let s = count_flops(&preset("vim-s"), 1.0, 1.0).unwrap().total_flops;
        assert!(within(s / t, 5.08 / 1.45, 0.10));
    }

    #[test]
    fn pruned_operating_points() {
        for (name, gflops, pct) in [("vim-t", 1.25, 13.8), ("vim-s", 3.29, 35.2), ("vim-b", 12.1, 35.9)] {
            let cfg = preset(name);
            let r = count_flops(&cfg, cfg.token_ratio, cfg.block_ratio).unwrap();
            assert!(within(r.total_flops, gflops, 0.05), "{name}: {}", r.total_flops);
            assert!((r.reduction_pct() - pct).abs() <= 2.0, "{name}: {}", r.reduction_pct());
        }
        let s = preset("vim-s");
        assert!(within(count_flops(&s, 0.8, 0.7).unwrap().total_flops, 3.75, 0.05));
        assert!(within(count_flops(&s, 0.9, 1.0).unwrap().total_flops, 4.49, 0.05));
    }

    #[test]
    fn stage_lengths_follow_schedule() {
        let r = count_flops(&preset("vim-s"), 0.7, 1.0).unwrap();
        let lens: Vec<usize> = [0, 6, 12, 18].iter().map(|&l| r.per_layer[l].seq_len).collect();
        assert_eq!(lens, [197, 138, 97, 68]);
        assert_eq!(r.per_layer[5].seq_len, 197);
        assert!(r.per_layer[6].predictor > 0.0 && r.per_layer[7].predictor == 0.0);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let r = count_flops(&preset("desk"), 0.7, 0.8).unwrap();
        let parts: f64 = r.by_kind().iter().map(|(_, v)| v).sum();
        assert!((parts - r.total_ops()).abs() < 1e-6 * parts);
        assert!((r.total_flops - r.total_ops() / 1e9).abs() < 1e-15);
        assert!(r.reduction_vs_baseline >= -0.05 && r.reduction_vs_baseline <= 1.0);
    }

    #[test]
    fn overhead_toggle() {
        let cfg = preset("vim-s");
        let with = count_flops(&cfg, 0.7, 0.8).unwrap();
        let without = count_flops_opts(&cfg, 0.7, 0.8, CountOptions { include_overhead: false }).unwrap();
        assert!(without.total_flops < with.total_flops);
        assert!(without.per_layer.iter().all(|l| l.predictor == 0.0 && l.selector == 0.0));
    }

    #[test]
    fn grid_monotone_away_from_corner() {
        let ratios = [0.5, 0.6, 0.7, 0.8, 0.9];
        for name in ["vim-t", "vim-s", "desk"] {
            let cfg = preset(name);
            let grid = sweep_ratios(&cfg, &ratios, &ratios).unwrap();
            assert_eq!(grid.len(), 25);
            for (i, r) in grid.iter().enumerate() {
                let (ti, bi) = (i / 5, i % 5);
                if ti + 1 < 5 {
                    assert!(r.total_flops <= grid[i + 5].total_flops);
                }
                if bi + 1 < 5 {
                    assert!(r.total_flops <= grid[i + 1].total_flops);
                }
            }
            let all = [0.5, 0.7, 0.9, 1.0];
            let bare = sweep_ratios_opts(&cfg, &all, &all, CountOptions { include_overhead: false }).unwrap();
            for (i, r) in bare.iter().enumerate() {
                if i % 4 + 1 < 4 {
                    assert!(r.total_flops <= bare[i + 1].total_flops);
                }
                if i + 4 < bare.len() {
                    assert!(r.total_flops <= bare[i + 4].total_flops);
                }
            }
        }
    }

    #[test]
    fn csv_layout() {
        let grid = sweep_ratios(&preset("vim-s"), &[0.7, 1.0], &[0.8, 1.0]).unwrap();
        let csv = to_csv(&grid);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("vim-s,0.7,0.8,3.2"));
        assert!(lines[4].ends_with(",0.00"));
    }

    #[test]
    fn evolution_counts() {
        assert_eq!(count_evolution_ops(EvolutionStrategy::Ha, &[true, false, true]), 2);
        assert_eq!(count_evolution_ops(EvolutionStrategy::Dyvm, &[true, false, true]), 1);
        assert_eq!(count_evolution_ops(EvolutionStrategy::Ha, &[false, true, true, false]), 1);
        assert_eq!(count_evolution_ops(EvolutionStrategy::PlainInfer, &[false; 4]), 0);
        for l in 1..=10usize {
            for bits in 1u32..(1 << l) {
                let keep: Vec<bool> = (0..l).map(|i| bits >> i & 1 == 1).collect();
                let ha = count_evolution_ops(EvolutionStrategy::Ha, &keep);
                let dy = count_evolution_ops(EvolutionStrategy::Dyvm, &keep);
                assert!(ha >= dy);
                assert_eq!(ha == dy, is_consecutive(&keep));
            }
        }
    }

    #[test]
    fn rejects_bad_ratios() {
        let cfg = preset("desk");
        assert!(count_flops(&cfg, 0.0, 1.0).is_err());
        assert!(count_flops(&cfg, 1.0, -0.1).is_err());
    }
}
