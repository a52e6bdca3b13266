use clap::Args;
use dyvm::losses::{
    loss_block, loss_block_grad, loss_cls, loss_cls_grad, loss_dis_out, loss_dis_out_grad, loss_dis_token,
    loss_dis_token_grad, loss_token, loss_token_grad, TargetRatios,
};
use dyvm::numerics::{finite_diff_grad, relative_error, Rng, Tensor};
use dyvm::ssm::{discretize, scan_backward, scan_recurrent, DiscreteSsm, ScanGrads, SsmParams, StateMatrix};
use serde::Serialize;

use crate::{to_json, CliError, CommonArgs, Format, Outcome, SCHEMA_VERSION};

pub const GRAD_TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    /// Negate the analytic input gradient of the scan; the check must fail.
    #[arg(long)]
    pub corrupt_adjoint: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradRow {
    pub check: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub seeds: u64,
    pub tolerance: f64,
    pub corrupt_adjoint: bool,
    pub rows: Vec<GradRow>,
    pub passed: bool,
}

#[derive(Default)]
struct Acc(Vec<(&'static str, usize, f64)>);

impl Acc {
    fn add(&mut self, check: &'static str, err: f64) {
        match self.0.iter_mut().find(|(c, _, _)| *c == check) {
            Some(row) => {
                row.1 += 1;
                row.2 = row.2.max(err);
            }
            None => self.0.push((check, 1, err)),
        }
    }
}

/// Cycles through diagonal, dense and selective parameterisations.
fn random_ssm(rng: &mut Rng, kind: u64, len: usize) -> Result<(DiscreteSsm, Tensor), CliError> {
    let (d, n) = (2, 3);
    let p = match kind % 3 {
        0 => SsmParams {
            a: StateMatrix::Diagonal(Tensor::rand_uniform(&[d, n], -2.0, -0.05, rng)),
            b: Tensor::randn(&[d, n], 1.0, rng),
            c: Tensor::randn(&[d, n], 1.0, rng),
            delta: Tensor::rand_uniform(&[d], 0.05, 1.0, rng),
        },
        1 => {
            // Skew minus positive definite: a stable dense matrix.
            let m = Tensor::randn(&[n, n], 0.5, rng);
            let skew = m.sub(&m.transpose()?)?;
            let q = Tensor::randn(&[n, n], 0.5, rng);
            let spd = q.matmul(&q.transpose()?)?.add(&Tensor::eye(n).scale(0.1))?;
            SsmParams {
                a: StateMatrix::Dense(skew.sub(&spd)?),
                b: Tensor::randn(&[d, n], 1.0, rng),
                c: Tensor::randn(&[d, n], 1.0, rng),
                delta: Tensor::rand_uniform(&[d], 0.05, 1.0, rng),
            }
        }
        _ => SsmParams {
            a: StateMatrix::Diagonal(Tensor::rand_uniform(&[d, n], -1.0, -0.1, rng)),
            b: Tensor::randn(&[len, d, n], 1.0, rng),
            c: Tensor::randn(&[len, d, n], 1.0, rng),
            delta: Tensor::rand_uniform(&[len, d], 0.1, 1.0, rng),
        },
    };
    Ok((discretize(&p)?, p.c))
}

fn scan_errors(disc: &DiscreteSsm, c: &Tensor, x: &Tensor, dy: &Tensor, corrupt: bool) -> Result<[f64; 4], CliError> {
    let ScanGrads {
        mut dx,
        da_bar,
        db_bar,
        dc,
    } = scan_backward(disc, c, x, dy)?;
    if corrupt {
        dx = dx.scale(-1.0);
    }
    let loss = |d: &DiscreteSsm, c: &Tensor, x: &Tensor| scan_recurrent(d, c, x)?.dot(dy);
    let fx = finite_diff_grad(|x| loss(disc, c, x), x, EPS)?;
    let fa = finite_diff_grad(|a| loss(&DiscreteSsm::from_parts(a.clone(), disc.b_bar().clone())?, c, x), disc.a_bar(), EPS)?;
    let fb = finite_diff_grad(|b| loss(&DiscreteSsm::from_parts(disc.a_bar().clone(), b.clone())?, c, x), disc.b_bar(), EPS)?;
    let fc = finite_diff_grad(|c| loss(disc, c, x), c, EPS)?;
    Ok([
        relative_error(&dx, &fx)?,
        relative_error(&da_bar, &fa)?,
        relative_error(&db_bar, &fb)?,
        relative_error(&dc, &fc)?,
    ])
}

fn loss_errors(rng: &mut Rng, acc: &mut Acc) -> Result<(), CliError> {
    let logits = Tensor::randn(&[3, 5], 1.0, rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
    let fd = finite_diff_grad(|x| loss_cls(x, &labels), &logits, EPS)?;
    acc.add("loss_cls", relative_error(&loss_cls_grad(&logits, &labels)?, &fd)?);

    let t = TargetRatios::geometric(0.7, 2, 0.8)?;
    let soft = [Tensor::rand_uniform(&[2, 6], 0.0, 1.0, rng), Tensor::rand_uniform(&[2, 6], 0.0, 1.0, rng)];
    let g = loss_token_grad(&soft, &t)?;
    for s in 0..soft.len() {
        let fd = finite_diff_grad(
            |x| {
                let mut m = soft.clone();
                m[s] = x.clone();
                loss_token(&m, &t)
            },
            &soft[s],
            EPS,
        )?;
        acc.add("loss_token", relative_error(&g[s], &fd)?);
    }

    let gates = Tensor::rand_uniform(&[4, 2], 0.0, 1.0, rng);
    let fd = finite_diff_grad(|x| loss_block(std::slice::from_ref(x), 0.6), &gates, EPS)?;
    acc.add("loss_block", relative_error(&loss_block_grad(std::slice::from_ref(&gates), 0.6)?[0], &fd)?);

    let s = Tensor::randn(&[2, 4], 1.0, rng);
    let te = Tensor::randn(&[2, 4], 1.0, rng);
    let (gs, gt) = loss_dis_out_grad(&s, &te)?;
    let fs = finite_diff_grad(|x| loss_dis_out(x, &te), &s, EPS)?;
    let ft = finite_diff_grad(|x| loss_dis_out(&s, x), &te, EPS)?;
    acc.add("loss_dis_out", relative_error(&gs, &fs)?.max(relative_error(&gt, &ft)?));

    let st = Tensor::randn(&[2, 3, 4], 1.0, rng);
    let tt = Tensor::randn(&[2, 3, 4], 1.0, rng);
    let m = Tensor::rand_uniform(&[2, 3], 0.1, 1.0, rng);
    let (gs, gm) = loss_dis_token_grad(&st, &tt, &m)?;
    let fs = finite_diff_grad(|x| loss_dis_token(x, &tt, &m), &st, EPS)?;
    let fm = finite_diff_grad(|x| loss_dis_token(&st, &tt, x), &m, EPS)?;
    acc.add("loss_dis_token", relative_error(&gs, &fs)?.max(relative_error(&gm, &fm)?));
    Ok(())
}

/// All-zero inputs: the scan, the classifier and output distillation.
fn zero_input_error(rng: &mut Rng, corrupt: bool) -> Result<f64, CliError> {
    let (disc, c) = random_ssm(rng, 0, 5)?;
    let x = Tensor::zeros(&[5, 2]);
    let dy = Tensor::randn(&[5, 2], 1.0, rng);
    let mut err = scan_errors(&disc, &c, &x, &dy, corrupt)?.into_iter().fold(0.0, f64::max);
    let z = Tensor::zeros(&[2, 4]);
    let fd = finite_diff_grad(|x| loss_cls(x, &[0, 3]), &z, EPS)?;
    err = err.max(relative_error(&loss_cls_grad(&z, &[0, 3])?, &fd)?);
    let (gs, _) = loss_dis_out_grad(&z, &z)?;
    let fs = finite_diff_grad(|x| loss_dis_out(x, &z), &z, EPS)?;
    Ok(err.max(relative_error(&gs, &fs)?))
}

pub fn report(args: &GradcheckArgs) -> Result<GradReport, CliError> {
    let spec = args.common.resolve("gradcheck", "desk", Format::Json)?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let mut acc = Acc::default();
    for k in 0..args.seeds {
        let mut rng = Rng::new(spec.seed.wrapping_add(k));
        let len = 6;
        let (disc, c) = random_ssm(&mut rng, k, len)?;
        let x = Tensor::randn(&[len, 2], 1.0, &mut rng);
        let dy = Tensor::randn(&[len, 2], 1.0, &mut rng);
        let [ex, ea, eb, ec] = scan_errors(&disc, &c, &x, &dy, args.corrupt_adjoint)?;
        acc.add("scan_dx", ex);
        acc.add("scan_da_bar", ea);
        acc.add("scan_db_bar", eb);
        acc.add("scan_dc", ec);
        loss_errors(&mut rng, &mut acc)?;
    }
    let mut rng = Rng::new(spec.seed);
    acc.add("zero_input", zero_input_error(&mut rng, args.corrupt_adjoint)?);

    let rows: Vec<GradRow> = acc
        .0
        .into_iter()
        .map(|(check, cases, max_rel_error)| GradRow {
            check,
            cases,
            max_rel_error,
            passed: max_rel_error < GRAD_TOL,
        })
        .collect();
    let passed = rows.iter().all(|r| r.passed);
    Ok(GradReport {
        schema_version: SCHEMA_VERSION,
        command: "gradcheck",
        seed: spec.seed,
        seeds: args.seeds,
        tolerance: GRAD_TOL,
        corrupt_adjoint: args.corrupt_adjoint,
        rows,
        passed,
    })
}

pub fn run(args: &GradcheckArgs) -> Result<Outcome, CliError> {
    let r = report(args)?;
    let body = match args.common.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&r)?,
        Format::Csv => {
            let mut s = String::from("check,cases,max_rel_error,passed\n");
            for row in &r.rows {
                s.push_str(&format!("{},{},{:e},{}\n", row.check, row.cases, row.max_rel_error, row.passed));
            }
            s
        }
    };
    Ok(Outcome {
        body,
        passed: r.passed,
        out: args.common.out.clone(),
    })
}
