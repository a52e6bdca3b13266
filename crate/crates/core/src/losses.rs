//! Training objectives. Each loss has a value function and an analytic
//! gradient w.r.t. its continuous inputs; masks and gates enter through
//! their relaxed (soft) values.

use serde::{Deserialize, Serialize};

use crate::block_select::BlockPolicy;
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{log_softmax_row, softmax_row};
use crate::numerics::Tensor;
use crate::pruning::TokenMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub token: f64,
    pub block: f64,
    pub dis_out: f64,
    pub dis_token: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            token: 10.0,
            block: 10.0,
            dis_out: 0.5,
            dis_token: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.token, self.block, self.dis_out, self.dis_token];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("loss weights must be non-negative".into()))
        }
    }
}

/// Per-stage token targets `ρ^s` and the block target `ρ^p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRatios {
    pub rho: f64,
    pub stage_targets: Vec<f64>,
    pub rho_p: f64,
}

impl TargetRatios {
    /// Targets `[ρ, ρ², …, ρ^S]`.
    pub fn geometric(rho: f64, stages: usize, rho_p: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) || !(0.0..=1.0).contains(&rho_p) || stages == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid targets rho={rho}, rho_p={rho_p}, stages={stages}"
            )));
        }
        Ok(Self {
            rho,
            stage_targets: (1..=stages).map(|s| rho.powi(s as i32)).collect(),
            rho_p,
        })
    }

    pub fn stages(&self) -> usize {
        self.stage_targets.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub token: f64,
    pub block: f64,
    pub dis_out: f64,
    pub dis_token: f64,
}

pub fn loss_joint(parts: &LossParts, w: &LossWeights) -> f64 {
    w.cls * parts.cls + w.token * parts.token + w.block * parts.block + w.dis_out * parts.dis_out + w.dis_token * parts.dis_token
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<[usize; 2]> {
    let [b, c] = logits.dims2("loss_cls")?;
    if labels.len() != b {
        return shape_err("labels", &[b], &[labels.len()]);
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    Ok([b, c])
}

/// Mean cross-entropy of `logits: B×C`.
pub fn loss_cls(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [b, _] = check_labels(logits, labels)?;
    let total: f64 = (0..b).map(|i| -log_softmax_row(logits.row(i))[labels[i]]).sum();
    Ok(total / b as f64)
}

pub fn loss_cls_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [b, c] = check_labels(logits, labels)?;
    let mut g = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let p = softmax_row(logits.row(i));
        for (j, v) in g.row_mut(i).iter_mut().enumerate() {
            *v = (p[j] - f64::from(u8::from(j == labels[i]))) / b as f64;
        }
    }
    Ok(g)
}

fn check_stage_masks(masks: &[Tensor], targets: &TargetRatios) -> Result<[usize; 2]> {
    if masks.len() != targets.stages() {
        return shape_err("loss_token stages", &[targets.stages()], &[masks.len()]);
    }
    let [b, l] = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no stages".into()))?
        .dims2("loss_token")?;
    for m in masks {
        if m.shape() != [b, l] {
            return shape_err("loss_token mask", &[b, l], m.shape());
        }
    }
    Ok([b, l])
}

/// `(1/BS) Σ_b Σ_s (ρ^s − mean_i M^s_{b,i})²` over `B×L` stage masks.
pub fn loss_token(masks: &[Tensor], targets: &TargetRatios) -> Result<f64> {
    let [b, l] = check_stage_masks(masks, targets)?;
    let mut total = 0.0;
    for (m, &rho) in masks.iter().zip(&targets.stage_targets) {
        for i in 0..b {
            let mean = m.row(i).iter().sum::<f64>() / l as f64;
            total += (rho - mean).powi(2);
        }
    }
    Ok(total / (b * masks.len()) as f64)
}

pub fn loss_token_grad(masks: &[Tensor], targets: &TargetRatios) -> Result<Vec<Tensor>> {
    let [b, l] = check_stage_masks(masks, targets)?;
    let scale = (b * masks.len()) as f64;
    Ok(masks
        .iter()
        .zip(&targets.stage_targets)
        .map(|(m, &rho)| {
            let mut g = Tensor::zeros(&[b, l]);
            for i in 0..b {
                let mean = m.row(i).iter().sum::<f64>() / l as f64;
                let d = -2.0 * (rho - mean) / (l as f64 * scale);
                g.row_mut(i).iter_mut().for_each(|v| *v = d);
            }
            g
        })
        .collect())
}

/// [`loss_token`] on hard masks.
pub fn loss_token_masks(masks: &[TokenMask], targets: &TargetRatios) -> Result<f64> {
    let t: Vec<Tensor> = masks.iter().map(TokenMask::to_tensor).collect();
    loss_token(&t, targets)
}

fn mean_active(gates: &[Tensor]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for g in gates {
        let [_, two] = g.dims2("loss_block")?;
        if two != 2 {
            return shape_err("loss_block gates", &[2], &[two]);
        }
        sum += g.sum();
        count += g.len();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no gates".into()));
    }
    Ok((sum / count as f64, count))
}

/// `(ρ^p − mean over layers and samples of (Q₀+Q₁)/2)²` over per-layer `B×2` gates.
pub fn loss_block(gates: &[Tensor], rho_p: f64) -> Result<f64> {
    let (mean, _) = mean_active(gates)?;
    Ok((rho_p - mean).powi(2))
}

pub fn loss_block_grad(gates: &[Tensor], rho_p: f64) -> Result<Vec<Tensor>> {
    let (mean, count) = mean_active(gates)?;
    let d = -2.0 * (rho_p - mean) / count as f64;
    Ok(gates.iter().map(|g| Tensor::full(g.shape(), d)).collect())
}

/// [`loss_block`] on the hard gates of a policy.
pub fn loss_block_policy(policy: &BlockPolicy, rho_p: f64) -> Result<f64> {
    let hard: Vec<Tensor> = policy
        .layers
        .iter()
        .map(|r| crate::block_select::GateRow::from_hard(r.hard.clone()).soft)
        .collect();
    loss_block(&hard, rho_p)
}

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    let dims = a.dims2(op)?;
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(dims)
}

/// `KL(softmax(student) ‖ softmax(teacher))`, averaged over the batch.
pub fn loss_dis_out(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    let [b, _] = check_pair(student, teacher, "loss_dis_out")?;
    let mut total = 0.0;
    for i in 0..b {
        let ls = log_softmax_row(student.row(i));
        let lt = log_softmax_row(teacher.row(i));
        total += ls.iter().zip(&lt).map(|(s, t)| s.exp() * (s - t)).sum::<f64>();
    }
    Ok(total / b as f64)
}

/// Gradients of [`loss_dis_out`] w.r.t. `(student, teacher)` logits.
pub fn loss_dis_out_grad(student: &Tensor, teacher: &Tensor) -> Result<(Tensor, Tensor)> {
    let [b, c] = check_pair(student, teacher, "loss_dis_out")?;
    let mut gs = Tensor::zeros(&[b, c]);
    let mut gt = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let ls = log_softmax_row(student.row(i));
        let lt = log_softmax_row(teacher.row(i));
        let p: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let q: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
        let kl: f64 = p.iter().zip(ls.iter().zip(&lt)).map(|(pj, (s, t))| pj * (s - t)).sum();
        for j in 0..c {
            gs.row_mut(i)[j] = p[j] * ((ls[j] - lt[j]) - kl) / b as f64;
            gt.row_mut(i)[j] = (q[j] - p[j]) / b as f64;
        }
    }
    Ok((gs, gt))
}

fn check_tokens(student: &Tensor, teacher: &Tensor, mask: &Tensor) -> Result<([usize; 3], f64)> {
    let dims = student.dims3("loss_dis_token")?;
    if teacher.shape() != student.shape() {
        return shape_err("loss_dis_token teacher", student.shape(), teacher.shape());
    }
    if mask.shape() != &dims[..2] {
        return shape_err("loss_dis_token mask", &dims[..2], mask.shape());
    }
    let total = mask.sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("no retained tokens".into()));
    }
    Ok((dims, total))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `Σ_{b,i} M_{b,i} ‖s_{b,i} − t_{b,i}‖² / Σ M` over `B×L×D` tokens.
pub fn loss_dis_token(student: &Tensor, teacher: &Tensor, mask: &Tensor) -> Result<f64> {
    let ([b, l, d], total) = check_tokens(student, teacher, mask)?;
    let mut acc = 0.0;
    for i in 0..b * l {
        let m = mask.data()[i];
        if m != 0.0 {
            acc += m * sq_dist(&student.data()[i * d..][..d], &teacher.data()[i * d..][..d]);
        }
    }
    Ok(acc / total)
}

/// Gradients of [`loss_dis_token`] w.r.t. `(student, mask)`.
pub fn loss_dis_token_grad(student: &Tensor, teacher: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let ([b, l, d], total) = check_tokens(student, teacher, mask)?;
    let value = loss_dis_token(student, teacher, mask)?;
    let mut gs = Tensor::zeros(student.shape());
    let mut gm = Tensor::zeros(mask.shape());
    for i in 0..b * l {
        let m = mask.data()[i];
        let s = &student.data()[i * d..][..d];
        let t = &teacher.data()[i * d..][..d];
        for k in 0..d {
            gs.data_mut()[i * d + k] = 2.0 * m * (s[k] - t[k]) / total;
        }
        gm.data_mut()[i] = (sq_dist(s, t) - value) / total;
    }
    Ok((gs, gm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Rng};

    #[test]
    fn cls_examples() {
        let v = loss_cls(&Tensor::zeros(&[1, 10]), &[3]).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        let mut big = Tensor::zeros(&[1, 4]);
        big.set(&[0, 2], 100.0);
        assert!(loss_cls(&big, &[2]).unwrap() < 1e-40);
        assert!(loss_cls(&big, &[4]).is_err());
    }

    #[test]
    fn cls_matches_log_sum_exp() {
        let mut rng = Rng::new(1);
        let logits = Tensor::randn(&[5, 7], 3.0, &mut rng);
        let labels = [0, 6, 3, 3, 1];
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let lse = logits.row(i).iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - logits.at(&[i, y]);
        }
        assert!((loss_cls(&logits, &labels).unwrap() - want / 5.0).abs() < 1e-10);
    }

    #[test]
    fn token_examples() {
        let t = TargetRatios::geometric(0.7, 1, 1.0).unwrap();
        assert!((loss_token(&[Tensor::full(&[1, 10], 1.0)], &t).unwrap() - 0.09).abs() < 1e-15);
        let hit = Tensor::from_fn(&[1, 10], |i| if i < 7 { 1.0 } else { 0.0 });
        assert!(loss_token(&[hit], &t).unwrap() < 1e-30);
        assert!(loss_token(&[], &t).is_err());
    }

    #[test]
    fn block_examples() {
        assert_eq!(loss_block(&[Tensor::full(&[3, 2], 1.0)], 1.0).unwrap(), 0.0);
        assert!((loss_block(&[Tensor::zeros(&[3, 2])], 0.8).unwrap() - 0.64).abs() < 1e-15);
        let half = Tensor::from_fn(&[4, 2], |i| (i % 2) as f64);
        assert_eq!(loss_block(&[half.clone(), half], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn kl_examples() {
        let a = Tensor::from_rows(&[vec![0.9f64.ln(), 0.1f64.ln()]]).unwrap();
        let b = Tensor::zeros(&[1, 2]);
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((loss_dis_out(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3681).abs() < 1e-4);
        assert_eq!(loss_dis_out(&a, &a).unwrap(), 0.0);
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let s = Tensor::randn(&[3, 5], 2.0, &mut rng);
            let t = Tensor::randn(&[3, 5], 2.0, &mut rng);
            assert!(loss_dis_out(&s, &t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn dis_token_examples() {
        let student = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 9.0, 9.0]).unwrap();
        let teacher = Tensor::zeros(&[1, 2, 2]);
        let mask = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(loss_dis_token(&student, &teacher, &mask).unwrap(), 2.0);
        assert_eq!(loss_dis_token(&teacher, &teacher, &mask).unwrap(), 0.0);
        assert!(loss_dis_token(&student, &teacher, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn joint_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_joint(&LossParts::default(), &w), 0.0);
        let unit = LossParts { cls: 1.0, token: 1.0, block: 1.0, dis_out: 1.0, dis_token: 1.0 };
        assert_eq!(loss_joint(&unit, &w), 22.0);
        let doubled = LossParts { token: 2.0, ..unit };
        assert_eq!(loss_joint(&doubled, &w) - loss_joint(&unit, &w), w.token);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let eps = 1e-6;
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let logits = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
            let fd = finite_diff_grad(|x| loss_cls(x, &labels), &logits, eps).unwrap();
            assert!(relative_error(&loss_cls_grad(&logits, &labels).unwrap(), &fd).unwrap() < 1e-5);

            let t = TargetRatios::geometric(0.7, 2, 0.8).unwrap();
            let soft = [Tensor::rand_uniform(&[2, 6], 0.0, 1.0, &mut rng), Tensor::rand_uniform(&[2, 6], 0.0, 1.0, &mut rng)];
            let g = loss_token_grad(&soft, &t).unwrap();
            for s in 0..2 {
                let fd = finite_diff_grad(
                    |x| {
                        let mut m = soft.clone();
                        m[s] = x.clone();
                        loss_token(&m, &t)
                    },
                    &soft[s],
                    eps,
                )
                .unwrap();
                assert!(relative_error(&g[s], &fd).unwrap() < 1e-5);
            }

            let gates = Tensor::rand_uniform(&[4, 2], 0.0, 1.0, &mut rng);
            let fd = finite_diff_grad(|x| loss_block(std::slice::from_ref(x), 0.6), &gates, eps).unwrap();
            assert!(relative_error(&loss_block_grad(std::slice::from_ref(&gates), 0.6).unwrap()[0], &fd).unwrap() < 1e-5);

            let s = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let te = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let (gs, gt) = loss_dis_out_grad(&s, &te).unwrap();
            let fs = finite_diff_grad(|x| loss_dis_out(x, &te), &s, eps).unwrap();
            let ft = finite_diff_grad(|x| loss_dis_out(&s, x), &te, eps).unwrap();
            assert!(relative_error(&gs, &fs).unwrap() < 1e-5);
            assert!(relative_error(&gt, &ft).unwrap() < 1e-5);

            let st = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
            let tt = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
            let m = Tensor::rand_uniform(&[2, 3], 0.1, 1.0, &mut rng);
            let (gs, gm) = loss_dis_token_grad(&st, &tt, &m).unwrap();
            let fs = finite_diff_grad(|x| loss_dis_token(x, &tt, &m), &st, eps).unwrap();
            let fm = finite_diff_grad(|x| loss_dis_token(&st, &tt, x), &m, eps).unwrap();
            assert!(relative_error(&gs, &fs).unwrap() < 1e-5);
            assert!(relative_error(&gm, &fm).unwrap() < 1e-5);
        }
    }

    #[test]
    fn token_and_block_match_nested_loops() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let (b, l, s) = (1 + rng.below(4), 2 + rng.below(10), 1 + rng.below(3));
            let t = TargetRatios::geometric(rng.uniform_range(0.3, 1.0), s, rng.uniform()).unwrap();
            let masks: Vec<Tensor> = (0..s).map(|_| Tensor::from_fn(&[b, l], |_| f64::from(u8::from(rng.bernoulli(0.6))))).collect();
            let mut want = 0.0;
            for bi in 0..b {
                for (si, m) in masks.iter().enumerate() {
                    let mut kept = 0.0;
                    for i in 0..l {
                        kept += m.at(&[bi, i]);
                    }
                    want += (t.stage_targets[si] - kept / l as f64).powi(2);
                }
            }
            want /= (b * s) as f64;
            assert!((loss_token(&masks, &t).unwrap() - want).abs() < 1e-12);

            let gates: Vec<Tensor> = (0..s).map(|_| Tensor::from_fn(&[b, 2], |_| f64::from(u8::from(rng.bernoulli(0.5))))).collect();
            let mut active = 0.0;
            for g in &gates {
                for bi in 0..b {
                    active += (g.at(&[bi, 0]) + g.at(&[bi, 1])) / 2.0;
                }
            }
            let want = (t.rho_p - active / (b * s) as f64).powi(2);
            assert!((loss_block(&gates, t.rho_p).unwrap() - want).abs() < 1e-12);
        }
    }
}
