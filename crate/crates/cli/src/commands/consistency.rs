use std::collections::BTreeMap;

use clap::{Args, ValueEnum};
use dyvm::flops::{count_evolution_ops, EvolutionStrategy};
use dyvm::numerics::{Rng, Tensor};
use dyvm::pruning::{is_consecutive, prune_infer, prune_infer_ha, prune_train_dyvm, prune_train_plain};
use dyvm::ssm::{ScanOperator, SsmParams, StateMatrix};
use serde::Serialize;

use crate::{to_json, CliError, CommonArgs, ExperimentSpec, Format, Outcome, SCHEMA_VERSION};

/// Train-vs-infer deviation allowed for the consistent strategies.
pub const CONSISTENT_TOL: f64 = 1e-10;
/// Deviation that counts as a real mismatch for plain masking.
pub const INCONSISTENT_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Independent coin flip per token.
    Random,
    /// One contiguous run of retained tokens.
    Consecutive,
}

#[derive(Clone, Debug, Args)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Longest random sequence.
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, value_enum, default_value_t = MaskKind::Random)]
    pub mask: MaskKind,
    #[arg(long, default_value_t = 4)]
    pub n_state: usize,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    /// Additionally enumerate every mask of every length up to this bound.
    #[arg(long, default_value_t = 0)]
    pub exhaustive: usize,
}

/// Outcome of the three strategies on one `(mask, params, input)` triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseResult {
    pub consecutive: bool,
    /// Rearranged training vs dropped inference.
    pub dyvm_dev: f64,
    /// Zeroed-embedding training vs dropped inference.
    pub plain_dev: f64,
    /// Evolution-only inference vs zeroed-embedding training.
    pub ha_dev: f64,
    pub ha_ops: u64,
    pub dyvm_ops: u64,
}

pub fn random_operator(rng: &mut Rng, channels: usize, n_state: usize) -> Result<ScanOperator, CliError> {
    let p = SsmParams {
        a: StateMatrix::Diagonal(Tensor::rand_uniform(&[channels, n_state], -2.0, -0.1, rng)),
        b: Tensor::randn(&[channels, n_state], 1.0, rng),
        c: Tensor::randn(&[channels, n_state], 1.0, rng),
        delta: Tensor::rand_uniform(&[channels], 0.1, 1.0, rng),
    };
    Ok(ScanOperator::from_params(&p)?)
}

pub fn evaluate(x: &Tensor, keep: &[bool], op: &ScanOperator) -> Result<CaseResult, CliError> {
    let retained: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let infer = prune_infer(x, keep, op, None)?;
    let dyvm = prune_train_dyvm(x, keep, op, None)?;
    let plain = prune_train_plain(x, keep, op)?.gather_rows(&retained);
    let (ha, ha_ops) = prune_infer_ha(x, keep, op)?;
    debug_assert_eq!(ha_ops, count_evolution_ops(EvolutionStrategy::Ha, keep));
    Ok(CaseResult {
        consecutive: is_consecutive(keep),
        dyvm_dev: dyvm.max_abs_diff(&infer)?,
        plain_dev: plain.max_abs_diff(&infer)?,
        ha_dev: ha.max_abs_diff(&plain)?,
        ha_ops,
        dyvm_ops: count_evolution_ops(EvolutionStrategy::Dyvm, keep),
    })
}

fn random_mask(rng: &mut Rng, len: usize, kind: MaskKind) -> Vec<bool> {
    match kind {
        MaskKind::Random => {
            let mut keep: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.5)).collect();
            if !keep.iter().any(|&k| k) {
                keep[rng.below(len)] = true;
            }
            keep
        }
        MaskKind::Consecutive => {
            let start = rng.below(len);
            let run = 1 + rng.below(len - start);
            (0..len).map(|i| i >= start && i < start + run).collect()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategyRow {
    pub strategy: &'static str,
    pub max_deviation: f64,
    pub evolution_ops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Checks {
    pub dyvm_consistent: bool,
    pub ha_consistent: bool,
    /// With non-consecutive masks: plain masking deviates on at least one.
    /// Without: plain masking agrees everywhere.
    pub plain_behaviour: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub mask: MaskKind,
    pub trials: usize,
    pub exhaustive_len: usize,
    pub cases: usize,
    pub non_consecutive_cases: usize,
    pub strategies: Vec<StrategyRow>,
    pub plain_min_deviation_non_consecutive: Option<f64>,
    /// Evolution-only ops minus rearranged ops, mapped to the number of cases.
    pub ha_extra_ops_histogram: BTreeMap<u64, usize>,
    pub checks: Checks,
    pub passed: bool,
}

pub fn report(args: &ConsistencyArgs, spec: &ExperimentSpec) -> Result<ConsistencyReport, CliError> {
    if args.max_len == 0 || args.n_state == 0 || args.channels == 0 {
        return Err(CliError::Usage("--max-len, --n-state and --channels must be positive".into()));
    }
    if args.exhaustive > 16 {
        return Err(CliError::Usage("--exhaustive is limited to 16".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let mut results = Vec::new();
    for _ in 0..args.trials {
        let len = 1 + rng.below(args.max_len);
        let op = random_operator(&mut rng, args.channels, args.n_state)?;
        let x = Tensor::randn(&[len, args.channels], 1.0, &mut rng);
        let keep = random_mask(&mut rng, len, args.mask);
        results.push(evaluate(&x, &keep, &op)?);
    }
    for len in 1..=args.exhaustive {
        let op = random_operator(&mut rng, args.channels, args.n_state)?;
        let x = Tensor::randn(&[len, args.channels], 1.0, &mut rng);
        for bits in 1u32..(1 << len) {
            let keep: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            if args.mask == MaskKind::Consecutive && !is_consecutive(&keep) {
                continue;
            }
            results.push(evaluate(&x, &keep, &op)?);
        }
    }
    Ok(summarize(args, spec, &results))
}

fn summarize(args: &ConsistencyArgs, spec: &ExperimentSpec, results: &[CaseResult]) -> ConsistencyReport {
    let max = |f: fn(&CaseResult) -> f64| results.iter().map(f).fold(0.0, f64::max);
    let non_consecutive: Vec<&CaseResult> = results.iter().filter(|r| !r.consecutive).collect();
    let plain_min = non_consecutive.iter().map(|r| r.plain_dev).reduce(f64::min);
    let mut histogram = BTreeMap::new();
    for r in results {
        *histogram.entry(r.ha_ops - r.dyvm_ops).or_insert(0) += 1;
    }
    let dyvm_ops: u64 = results.iter().map(|r| r.dyvm_ops).sum();
    let ha_ops: u64 = results.iter().map(|r| r.ha_ops).sum();
    let (dyvm_max, plain_max, ha_max) = (max(|r| r.dyvm_dev), max(|r| r.plain_dev), max(|r| r.ha_dev));
    let checks = Checks {
        dyvm_consistent: dyvm_max < CONSISTENT_TOL,
        ha_consistent: ha_max < CONSISTENT_TOL,
        plain_behaviour: if non_consecutive.is_empty() {
            plain_max < CONSISTENT_TOL
        } else {
            non_consecutive.iter().any(|r| r.plain_dev > INCONSISTENT_MIN)
        },
    };
    let passed = checks.dyvm_consistent && checks.ha_consistent && checks.plain_behaviour;
    ConsistencyReport {
        schema_version: SCHEMA_VERSION,
        command: "consistency",
        seed: spec.seed,
        mask: args.mask,
        trials: args.trials,
        exhaustive_len: args.exhaustive,
        cases: results.len(),
        non_consecutive_cases: non_consecutive.len(),
        strategies: vec![
            StrategyRow {
                strategy: "dyvm",
                max_deviation: dyvm_max,
                evolution_ops: dyvm_ops,
            },
            StrategyRow {
                strategy: "plain",
                max_deviation: plain_max,
                evolution_ops: dyvm_ops,
            },
            StrategyRow {
                strategy: "ha",
                max_deviation: ha_max,
                evolution_ops: ha_ops,
            },
        ],
        plain_min_deviation_non_consecutive: plain_min,
        ha_extra_ops_histogram: histogram,
        checks,
        passed,
    }
}

pub fn run(args: &ConsistencyArgs) -> Result<Outcome, CliError> {
    let spec = args.common.resolve("consistency", "desk", Format::Json)?;
    let r = report(args, &spec)?;
    let body = match spec.format {
        Format::Json => to_json(&r)?,
        Format::Csv => {
            let mut s = String::from("strategy,max_deviation,evolution_ops\n");
            for row in &r.strategies {
                s.push_str(&format!("{},{:e},{}\n", row.strategy, row.max_deviation, row.evolution_ops));
            }
            s
        }
    };
    Ok(Outcome {
        body,
        passed: r.passed,
        out: spec.out,
    })
}
