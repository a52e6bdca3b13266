use clap::Args;
use dyvm::flops::{sweep_ratios_opts, to_csv, CountOptions, FlopsReport};
use serde::Serialize;

use crate::{to_json, CliError, CommonArgs, Format, Outcome, SCHEMA_VERSION};

/// Relative slack when re-adding the parts of a report.
const SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated grid; defaults to the single --token-ratio.
    #[arg(long, value_delimiter = ',')]
    pub token_ratios: Vec<f64>,
    /// Comma-separated grid; defaults to the single --block-ratio.
    #[arg(long, value_delimiter = ',')]
    pub block_ratios: Vec<f64>,
    /// Leave predictor and selector costs out.
    #[arg(long)]
    pub no_overhead: bool,
}

#[derive(Serialize)]
struct Report<'a> {
    schema_version: u32,
    command: &'static str,
    reports: &'a [FlopsReport],
    passed: bool,
}

/// A report is sound when its total re-adds from the parts and the
/// reduction lies in a sensible range (overhead may push it below zero).
pub fn is_sound(r: &FlopsReport) -> bool {
    let total = r.total_ops();
    let sum_ok = (total - r.total_flops * 1e9).abs() <= SUM_TOL * total.max(1.0);
    sum_ok && (-0.05..=1.0).contains(&r.reduction_vs_baseline)
}

pub fn run(args: &FlopsArgs) -> Result<Outcome, CliError> {
    let spec = args.common.resolve("flops", "vim-s", Format::Csv)?;
    let pick = |grid: &[f64], single: f64| if grid.is_empty() { vec![single] } else { grid.to_vec() };
    let tokens = pick(&args.token_ratios, spec.config.token_ratio);
    let blocks = pick(&args.block_ratios, spec.config.block_ratio);
    let opts = CountOptions {
        include_overhead: !args.no_overhead,
    };
    let reports = sweep_ratios_opts(&spec.config, &tokens, &blocks, opts)?;
    let passed = reports.iter().all(is_sound);
    let body = match spec.format {
        Format::Csv => to_csv(&reports),
        Format::Json => to_json(&Report {
            schema_version: SCHEMA_VERSION,
            command: "flops",
            reports: &reports,
            passed,
        })?,
    };
    Ok(Outcome {
        body,
        passed,
        out: spec.out,
    })
}
