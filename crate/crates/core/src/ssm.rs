//! Discrete state-space primitive: zero-order-hold discretisation, the
//! recurrent scan, its global-convolution form, and the adjoint scan.
//!
//! Shapes use `L` for sequence length, `D` for channels and `N` for the
//! state size. Each channel carries its own `N`-dimensional hidden state,
//! starting from zero.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{expm, Tensor};
use crate::opcount;

/// Below this `|Δa|` (or `‖ΔA‖₁` for dense `A`) the input matrix uses the
/// first-order limit `B̄ = ΔB`.
pub const SMALL_DELTA_A: f64 = 1e-8;

/// Dense evolution is only supported for small states.
pub const MAX_DENSE_STATE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StateMatrix {
    /// One `N×N` matrix shared by every channel.
    Dense(Tensor),
    /// Per-channel diagonal, `D×N`, or `N` shared by every channel.
    Diagonal(Tensor),
}

/// Continuous parameters. `b`/`c` are `D×N` (time-invariant) or `L×D×N`
/// (selective); `delta` is `D` or `L×D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    pub a: StateMatrix,
    pub b: Tensor,
    pub c: Tensor,
    pub delta: Tensor,
}

impl SsmParams {
    pub fn channels(&self) -> usize {
        *self.delta.shape().last().unwrap_or(&0)
    }

    pub fn n_state(&self) -> usize {
        *self.b.shape().last().unwrap_or(&0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Evolution {
    Dense,
    Diagonal,
}

/// `Ā` and `B̄` for `T` timesteps (`T == 1` when time-invariant).
///
/// `a_bar` is `T×D×N×N` (dense) or `T×D×N` (diagonal); `b_bar` is `T×D×N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSsm {
    evolution: Evolution,
    a_bar: Tensor,
    b_bar: Tensor,
}

impl DiscreteSsm {
    pub fn from_parts(a_bar: Tensor, b_bar: Tensor) -> Result<Self> {
        let [t, d, n] = b_bar.dims3("DiscreteSsm b_bar")?;
        let evolution = match a_bar.shape() {
            s if s == [t, d, n] => Evolution::Diagonal,
            s if s == [t, d, n, n] => Evolution::Dense,
            s => return shape_err("DiscreteSsm a_bar", &[t, d, n], s),
        };
        Ok(Self {
            evolution,
            a_bar,
            b_bar,
        })
    }

    pub fn evolution(&self) -> Evolution {
        self.evolution
    }

    pub fn a_bar(&self) -> &Tensor {
        &self.a_bar
    }

    pub fn b_bar(&self) -> &Tensor {
        &self.b_bar
    }

    pub fn steps(&self) -> usize {
        self.b_bar.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.b_bar.dim(1)
    }

    pub fn n_state(&self) -> usize {
        self.b_bar.dim(2)
    }

    pub fn is_time_invariant(&self) -> bool {
        self.steps() == 1
    }

    fn step_index(&self, t: usize) -> usize {
        if self.is_time_invariant() {
            0
        } else {
            t
        }
    }

    /// `h ← Ā_t h` for channel `d`, in place.
    pub(crate) fn evolve(&self, t: usize, d: usize, h: &mut [f64], scratch: &mut [f64]) {
        let n = self.n_state();
        let s = self.step_index(t);
        match self.evolution {
            Evolution::Diagonal => {
                let a = &self.a_bar.data()[(s * self.channels() + d) * n..][..n];
                for (hv, av) in h.iter_mut().zip(a) {
                    *hv *= av;
                }
            }
            Evolution::Dense => {
                let a = &self.a_bar.data()[(s * self.channels() + d) * n * n..][..n * n];
                for i in 0..n {
                    scratch[i] = (0..n).map(|j| a[i * n + j] * h[j]).sum();
                }
                h.copy_from_slice(&scratch[..n]);
            }
        }
    }

    pub(crate) fn b_row(&self, t: usize, d: usize) -> &[f64] {
        let n = self.n_state();
        &self.b_bar.data()[(self.step_index(t) * self.channels() + d) * n..][..n]
    }

    fn ops_per_step(&self) -> u64 {
        let n = self.n_state() as u64;
        match self.evolution {
            Evolution::Diagonal => 2 * n,
            Evolution::Dense => n * n + 2 * n,
        }
    }
}

/// Output projection view: `D×N` or `L×D×N`.
pub(crate) fn c_row(c: &Tensor, t: usize, d: usize) -> &[f64] {
    let n = *c.shape().last().unwrap();
    let ch = c.dim(c.rank() - 2);
    let s = if c.rank() == 3 { t } else { 0 };
    &c.data()[(s * ch + d) * n..][..n]
}

fn check_c(c: &Tensor, len: usize, d: usize, n: usize) -> Result<()> {
    match c.shape() {
        [cd, cn] if *cd == d && *cn == n => Ok(()),
        [cl, cd, cn] if *cl == len && *cd == d && *cn == n => Ok(()),
        s => shape_err("output projection C", &[len, d, n], s),
    }
}

fn check_scan_input(disc: &DiscreteSsm, c: &Tensor, x: &Tensor) -> Result<[usize; 2]> {
    let [len, d] = x.dims2("scan input")?;
    if d != disc.channels() {
        return shape_err("scan input", &[len, disc.channels()], x.shape());
    }
    if !disc.is_time_invariant() && disc.steps() != len {
        return shape_err("scan steps", &[len], &[disc.steps()]);
    }
    check_c(c, len, d, disc.n_state())?;
    Ok([len, d])
}

/// Zero-order-hold discretisation: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)ΔB`.
///
/// For dense `A`, `B̄` is read off the exponential of the augmented matrix
/// `[[ΔA, ΔB], [0, 0]]`, which equals the inverse formula whenever `ΔA` is
/// invertible and stays defined when it is not.
pub fn discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    let n = p.n_state();
    let d = p.channels();
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("empty state or channel axis".into()));
    }
    if !p.delta.data().iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument("delta must be positive and finite".into()));
    }
    let delta_steps = match p.delta.shape() {
        [dd] if *dd == d => 1,
        [l, dd] if *dd == d => *l,
        s => return shape_err("delta", &[d], s),
    };
    let b_steps = match p.b.shape() {
        [bd, bn] if *bd == d && *bn == n => 1,
        [l, bd, bn] if *bd == d && *bn == n => *l,
        s => return shape_err("B", &[d, n], s),
    };
    if delta_steps > 1 && b_steps > 1 && delta_steps != b_steps {
        return shape_err("selective time axis", &[delta_steps], &[b_steps]);
    }
    let steps = delta_steps.max(b_steps);
    let delta_at = |t: usize, ch: usize| -> f64 {
        if p.delta.rank() == 2 {
            p.delta.at(&[t, ch])
        } else {
            p.delta.at(&[ch])
        }
    };
    let b_at = |t: usize, ch: usize| -> &[f64] {
        let s = if p.b.rank() == 3 { t } else { 0 };
        &p.b.data()[(s * d + ch) * n..][..n]
    };

    match &p.a {
        StateMatrix::Diagonal(a) => {
            let shared = match a.shape() {
                [an] if *an == n => true,
                [ad, an] if *ad == d && *an == n => false,
                s => return shape_err("diagonal A", &[d, n], s),
            };
            let mut a_bar = Tensor::zeros(&[steps, d, n]);
            let mut b_bar = Tensor::zeros(&[steps, d, n]);
            for t in 0..steps {
                for ch in 0..d {
                    let dt = delta_at(t, ch);
                    let b = b_at(t, ch);
                    let base = (t * d + ch) * n;
                    for k in 0..n {
                        let av = if shared { a.data()[k] } else { a.data()[ch * n + k] };
                        let z = dt * av;
                        a_bar.data_mut()[base + k] = z.exp();
                        let phi = if z.abs() < SMALL_DELTA_A { 1.0 } else { z.exp_m1() / z };
                        b_bar.data_mut()[base + k] = phi * dt * b[k];
                    }
                }
            }
            DiscreteSsm::from_parts(a_bar, b_bar)
        }
        StateMatrix::Dense(a) => {
            let [an, an2] = a.dims2("dense A")?;
            if an != n || an2 != n {
                return shape_err("dense A", &[n, n], a.shape());
            }
            if n > MAX_DENSE_STATE {
                return Err(Error::InvalidArgument(format!(
                    "dense A supports at most {MAX_DENSE_STATE} states, got {n}"
                )));
            }
            let a_norm = (0..n)
                .map(|j| (0..n).map(|i| a.at(&[i, j]).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            let mut a_bar = Tensor::zeros(&[steps, d, n, n]);
            let mut b_bar = Tensor::zeros(&[steps, d, n]);
            for t in 0..steps {
                for ch in 0..d {
                    let dt = delta_at(t, ch);
                    let b = b_at(t, ch);
                    // Augmented (n+1)×(n+1) matrix [[ΔA, ΔB], [0, 0]].
                    let m = n + 1;
                    let mut aug = Tensor::zeros(&[m, m]);
                    for i in 0..n {
                        for j in 0..n {
                            aug.set(&[i, j], dt * a.at(&[i, j]));
                        }
                        aug.set(&[i, n], dt * b[i]);
                    }
                    let e = expm(&aug)?;
                    let abase = (t * d + ch) * n * n;
                    let bbase = (t * d + ch) * n;
                    for i in 0..n {
                        for j in 0..n {
                            a_bar.data_mut()[abase + i * n + j] = e.at(&[i, j]);
                        }
                        b_bar.data_mut()[bbase + i] = if dt * a_norm < SMALL_DELTA_A {
                            dt * b[i]
                        } else {
                            e.at(&[i, n])
                        };
                    }
                }
            }
            if !a_bar.is_finite() || !b_bar.is_finite() {
                return Err(Error::NonFinite("discretize"));
            }
            DiscreteSsm::from_parts(a_bar, b_bar)
        }
    }
}

fn forward_states(disc: &DiscreteSsm, c: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let [len, d] = check_scan_input(disc, c, x)?;
    let n = disc.n_state();
    let mut states = Tensor::zeros(&[len, d, n]);
    let mut y = Tensor::zeros(&[len, d]);
    let mut h = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for ch in 0..d {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            disc.evolve(t, ch, &mut h, &mut scratch);
            let xv = x.data()[t * d + ch];
            for (hv, bv) in h.iter_mut().zip(disc.b_row(t, ch)) {
                *hv += bv * xv;
            }
            y.data_mut()[t * d + ch] = h.iter().zip(c_row(c, t, ch)).map(|(a, b)| a * b).sum();
            states.data_mut()[(t * d + ch) * n..][..n].copy_from_slice(&h);
        }
    }
    opcount::record(len as u64 * d as u64 * disc.ops_per_step());
    Ok((y, states))
}

/// `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t`, with `h_{−1} = 0`.
pub fn scan_recurrent(disc: &DiscreteSsm, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    forward_states(disc, c, x).map(|(y, _)| y)
}

/// A discretised system bundled with its output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOperator {
    pub disc: DiscreteSsm,
    pub c: Tensor,
}

impl ScanOperator {
    pub fn new(disc: DiscreteSsm, c: Tensor) -> Result<Self> {
        check_c(&c, disc.steps(), disc.channels(), disc.n_state())?;
        Ok(Self { disc, c })
    }

    pub fn from_params(p: &SsmParams) -> Result<Self> {
        Self::new(discretize(p)?, p.c.clone())
    }

    pub fn is_time_invariant(&self) -> bool {
        self.disc.is_time_invariant() && self.c.rank() == 2
    }

    pub fn channels(&self) -> usize {
        self.disc.channels()
    }

    pub fn scan(&self, x: &Tensor) -> Result<Tensor> {
        scan_recurrent(&self.disc, &self.c, x)
    }
}

/// Convolution taps `K̄_t = C Ā^t B̄`, `L×D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub taps: Tensor,
}

impl Kernel {
    pub fn len(&self) -> usize {
        self.taps.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_kernel(disc: &DiscreteSsm, c: &Tensor, len: usize) -> Result<Kernel> {
    if !disc.is_time_invariant() || c.rank() != 2 {
        return Err(Error::InvalidArgument(
            "convolution kernel needs time-invariant parameters".into(),
        ));
    }
    let d = disc.channels();
    let n = disc.n_state();
    check_c(c, len, d, n)?;
    let mut taps = Tensor::zeros(&[len, d]);
    let mut v = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for ch in 0..d {
        v.copy_from_slice(disc.b_row(0, ch));
        for t in 0..len {
            taps.data_mut()[t * d + ch] = v.iter().zip(c_row(c, 0, ch)).map(|(a, b)| a * b).sum();
            disc.evolve(0, ch, &mut v, &mut scratch);
        }
    }
    Ok(Kernel { taps })
}

/// Causal convolution `y_t = Σ_{s≤t} K̄_s x_{t−s}` per channel.
pub fn scan_convolutional(k: &Kernel, x: &Tensor) -> Result<Tensor> {
    let [len, d] = x.dims2("convolution input")?;
    if k.taps.shape() != [len, d] {
        return shape_err("kernel", &[len, d], k.taps.shape());
    }
    let mut y = Tensor::zeros(&[len, d]);
    for t in 0..len {
        for s in 0..=t {
            for ch in 0..d {
                y.data_mut()[t * d + ch] += k.taps.data()[s * d + ch] * x.data()[(t - s) * d + ch];
            }
        }
    }
    Ok(y)
}

/// Gradients of a scalar loss w.r.t. every input of [`scan_recurrent`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads {
    pub dx: Tensor,
    pub da_bar: Tensor,
    pub db_bar: Tensor,
    pub dc: Tensor,
}

/// Adjoint scan: given `dy = ∂loss/∂y`, propagates `λ_t = C_tᵀ dy_t + Ā_{t+1}ᵀ λ_{t+1}`
/// right to left and accumulates parameter gradients.
pub fn scan_backward(disc: &DiscreteSsm, c: &Tensor, x: &Tensor, dy: &Tensor) -> Result<ScanGrads> {
    let [len, d] = check_scan_input(disc, c, x)?;
    if dy.shape() != x.shape() {
        return shape_err("scan_backward dy", x.shape(), dy.shape());
    }
    let n = disc.n_state();
    let (_, states) = forward_states(disc, c, x)?;
    let mut dx = Tensor::zeros(&[len, d]);
    let mut da_bar = Tensor::zeros(disc.a_bar.shape());
    let mut db_bar = Tensor::zeros(disc.b_bar.shape());
    let mut dc = Tensor::zeros(c.shape());
    let c_steps = c.rank() == 3;
    let mut lambda = vec![0.0; n];
    let mut next = vec![0.0; n];
    for ch in 0..d {
        lambda.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            // λ_t = Ā_{t+1}ᵀ λ_{t+1} + C_tᵀ dy_t
            if t + 1 < len {
                let s = disc.step_index(t + 1);
                match disc.evolution {
                    Evolution::Diagonal => {
                        let a = &disc.a_bar.data()[(s * d + ch) * n..][..n];
                        for k in 0..n {
                            next[k] = a[k] * lambda[k];
                        }
                    }
                    Evolution::Dense => {
                        let a = &disc.a_bar.data()[(s * d + ch) * n * n..][..n * n];
                        for j in 0..n {
                            next[j] = (0..n).map(|i| a[i * n + j] * lambda[i]).sum();
                        }
                    }
                }
                lambda.copy_from_slice(&next);
            }
            let g = dy.data()[t * d + ch];
            let crow = c_row(c, t, ch);
            for k in 0..n {
                lambda[k] += crow[k] * g;
            }
            let h = &states.data()[(t * d + ch) * n..][..n];
            let cs = if c_steps { t } else { 0 };
            for k in 0..n {
                dc.data_mut()[(cs * d + ch) * n + k] += g * h[k];
            }
            let xv = x.data()[t * d + ch];
            let s = disc.step_index(t);
            dx.data_mut()[t * d + ch] = disc.b_row(t, ch).iter().zip(&lambda).map(|(b, l)| b * l).sum();
            for k in 0..n {
                db_bar.data_mut()[(s * d + ch) * n + k] += lambda[k] * xv;
            }
            if t > 0 {
                let hp = &states.data()[((t - 1) * d + ch) * n..][..n];
                match disc.evolution {
                    Evolution::Diagonal => {
                        for k in 0..n {
                            da_bar.data_mut()[(s * d + ch) * n + k] += lambda[k] * hp[k];
                        }
                    }
                    Evolution::Dense => {
                        for i in 0..n {
                            for j in 0..n {
                                da_bar.data_mut()[(s * d + ch) * n * n + i * n + j] += lambda[i] * hp[j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ScanGrads {
        dx,
        da_bar,
        db_bar,
        dc,
    })
}
