//! Small dense linear algebra: LU solve and the matrix exponential.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Solves `a · x = b` for square `a` (n×n) and `b` (n×m) by LU with partial pivoting.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, n2] = a.dims2("solve")?;
    let [bn, m] = b.dims2("solve")?;
    if n != n2 {
        return shape_err("solve", &[n, n], a.shape());
    }
    if bn != n {
        return shape_err("solve", &[n, m], b.shape());
    }
    let mut lu = a.data().to_vec();
    let mut x = b.data().to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
            .unwrap();
        if lu[pivot * n + col].abs() <= 1e-14 * scale {
            return Err(Error::Singular("solve"));
        }
        if pivot != col {
            for k in 0..n {
                lu.swap(col * n + k, pivot * n + k);
            }
            for k in 0..m {
                x.swap(col * m + k, pivot * m + k);
            }
        }
        let p = lu[col * n + col];
        for row in col + 1..n {
            let f = lu[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                lu[row * n + k] -= f * lu[col * n + k];
            }
            for k in 0..m {
                x[row * m + k] -= f * x[col * m + k];
            }
        }
    }
    for col in (0..n).rev() {
        let p = lu[col * n + col];
        for k in 0..m {
            let mut s = x[col * m + k];
            for j in col + 1..n {
                s -= lu[col * n + j] * x[j * m + k];
            }
            x[col * m + k] = s / p;
        }
    }
    Tensor::new(vec![n, m], x)
}

fn one_norm(a: &Tensor) -> f64 {
    let n = a.dim(0);
    (0..n)
        .map(|j| (0..n).map(|i| a.data()[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé(13) coefficients (Higham 2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling-and-squaring with a degree-13 Padé approximant.
pub fn expm(a: &Tensor) -> Result<Tensor> {
    let [n, n2] = a.dims2("expm")?;
    if n != n2 {
        return shape_err("expm", &[n, n], a.shape());
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("expm"));
    }
    let norm = one_norm(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a.scale(0.5f64.powi(squarings));
    let id = Tensor::eye(n);
    let a2 = a.matmul(&a)?;
    let a4 = a2.matmul(&a2)?;
    let a6 = a4.matmul(&a2)?;
    let c = &PADE13;
    let lin = |terms: &[(&Tensor, f64)]| -> Result<Tensor> {
        let mut acc = Tensor::zeros(&[n, n]);
        for (m, coef) in terms {
            acc = acc.add(&m.scale(*coef))?;
        }
        Ok(acc)
    };
    let u_inner = lin(&[(&a6, c[13]), (&a4, c[11]), (&a2, c[9])])?;
    let u = a6
        .matmul(&u_inner)?
        .add(&lin(&[(&a6, c[7]), (&a4, c[5]), (&a2, c[3]), (&id, c[1])])?)?;
    let u = a.matmul(&u)?;
    let v_inner = lin(&[(&a6, c[12]), (&a4, c[10]), (&a2, c[8])])?;
    let v = a6
        .matmul(&v_inner)?
        .add(&lin(&[(&a6, c[6]), (&a4, c[4]), (&a2, c[2]), (&id, c[0])])?)?;
    let mut r = solve(&v.sub(&u)?, &v.add(&u)?)?;
    for _ in 0..squarings {
        r = r.matmul(&r)?;
    }
    Ok(r)
}
