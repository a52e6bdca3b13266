use std::path::PathBuf;

use clap::Args;
use dyvm::numerics::{Rng, Tensor};
use dyvm::vim::{Diagnostics, Layout, Model, ModelWeights, Policy};
use serde::Serialize;

use crate::{to_json, CliError, CommonArgs, Format, Outcome, SCHEMA_VERSION};

/// Largest train-vs-infer logit deviation accepted under replayed decisions.
pub const DEVIATION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Weight archive stem (`STEM.bin` + `STEM.json`); random weights otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForwardChecks {
    pub deviation_ok: bool,
    pub schedule_ok: bool,
    pub class_token_retained: bool,
    /// Present only when nothing is pruned or gated.
    pub baseline_identical: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForwardReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub model: String,
    pub token_ratio: f64,
    pub block_ratio: f64,
    pub batch: usize,
    /// Max |train logits − infer logits| with the train pass's decisions replayed.
    pub train_vs_infer_deviation: f64,
    pub expected_schedule: Vec<usize>,
    /// Deterministic inference: retained non-class tokens per stage, per sample.
    pub deterministic_stage_counts: Vec<Vec<usize>>,
    pub train_logits: Tensor,
    pub train: Diagnostics,
    pub infer: Diagnostics,
    pub checks: ForwardChecks,
    pub passed: bool,
}

fn class_retained(d: &Diagnostics, class: usize) -> bool {
    d.masks.iter().all(|m| m.keep.iter().all(|row| row[class]))
}

pub fn report(args: &ForwardArgs) -> Result<ForwardReport, CliError> {
    let spec = args.common.resolve("forward", "desk", Format::Json)?;
    if args.batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let cfg = spec.config;
    let model = match &args.weights {
        Some(stem) => {
            let w = ModelWeights::load(&cfg, stem)?;
            Model::new(cfg.clone(), w)?
        }
        None => Model::init(cfg.clone(), spec.seed)?,
    };
    let mut rng = Rng::new(spec.seed);
    let images: Vec<Tensor> = (0..args.batch).map(|_| model.random_image(&mut rng)).collect();

    let train = model.forward(&images, Layout::Train, Policy::Stochastic, &mut rng)?;
    let decisions = train.diagnostics.decisions();
    let infer = model.forward(&images, Layout::Infer, Policy::Replay(&decisions), &mut rng)?;
    let det = model.forward(&images, Layout::Infer, Policy::Deterministic, &mut rng)?;
    let deviation = train.logits.max_abs_diff(&infer.logits)?;

    let expected = cfg.stage_schedule();
    let det_counts: Vec<Vec<usize>> = det.diagnostics.stage_counts.clone();
    let schedule_ok = !cfg.prunes() || det_counts.iter().zip(&expected).all(|(row, &k)| row.iter().all(|&c| c == k));
    let class = cfg.class_index();
    let baseline_identical = if cfg.prunes() || cfg.gates() {
        None
    } else {
        let base = model.forward_baseline(&images)?;
        Some([&train.logits, &infer.logits, &det.logits].iter().all(|l| **l == base))
    };
    let checks = ForwardChecks {
        deviation_ok: deviation < DEVIATION_TOL,
        schedule_ok,
        class_token_retained: class_retained(&train.diagnostics, class) && class_retained(&det.diagnostics, class),
        baseline_identical,
    };
    let passed = checks.deviation_ok && checks.schedule_ok && checks.class_token_retained && baseline_identical != Some(false);
    Ok(ForwardReport {
        schema_version: SCHEMA_VERSION,
        command: "forward",
        seed: spec.seed,
        model: cfg.name.clone(),
        token_ratio: cfg.token_ratio,
        block_ratio: cfg.block_ratio,
        batch: args.batch,
        train_vs_infer_deviation: deviation,
        expected_schedule: expected,
        deterministic_stage_counts: det_counts,
        train_logits: train.logits,
        train: train.diagnostics,
        infer: infer.diagnostics,
        checks,
        passed,
    })
}

fn csv(r: &ForwardReport) -> String {
    let mut s = String::from("layer,sample,seq_len,retained_len,class_pos,gate_fwd,gate_bwd\n");
    let d = &r.infer;
    for (li, lens) in d.seq_lens.iter().enumerate() {
        for (b, len) in lens.iter().enumerate() {
            let g = d.policy.layers[li].hard[b];
            s.push_str(&format!(
                "{li},{b},{len},{},{},{},{}\n",
                d.retained_lens[li][b], d.class_positions[li][b], g[0] as u8, g[1] as u8
            ));
        }
    }
    s
}

pub fn run(args: &ForwardArgs) -> Result<Outcome, CliError> {
    let r = report(args)?;
    let format = args.common.format.unwrap_or(Format::Json);
    let body = match format {
        Format::Json => to_json(&r)?,
        Format::Csv => csv(&r),
    };
    Ok(Outcome {
        body,
        passed: r.passed,
        out: args.common.out.clone(),
    })
}
