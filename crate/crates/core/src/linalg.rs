//! Dense symmetric positive-definite factorization with a jitter policy.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Lower-triangular Cholesky factor `L` with `A + jitter·I = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
    jitter: f64,
}

/// Where a factorization broke down.
#[derive(Debug, Clone, Copy)]
pub struct Breakdown {
    /// One-based index of the first leading minor that is not positive.
    pub minor: usize,
    pub pivot: f64,
}

impl Cholesky {
    /// Plain factorization without jitter.
    pub fn factor(a: ArrayView2<f64>) -> std::result::Result<Self, Breakdown> {
        Self::factor_shifted(a, 0.0)
    }

    /// Factors `A + shift·I`.
    pub fn factor_shifted(a: ArrayView2<f64>, shift: f64) -> std::result::Result<Self, Breakdown> {
        let p = a.nrows();
        assert_eq!(p, a.ncols(), "Cholesky needs a square matrix");
        let mut l = a.to_owned();
        if shift != 0.0 {
            for i in 0..p {
                l[[i, i]] += shift;
            }
        }
        blocked_cholesky(&mut l)?;
        // zero the strict upper triangle left over from the input
        for i in 0..p {
            for j in (i + 1)..p {
                l[[i, j]] = 0.0;
            }
        }
        Ok(Self {
            lower: l,
            jitter: shift,
        })
    }

    /// Tries `A` first, then `A + j·I` for each jitter in turn.
    pub fn factor_with_jitter(
        a: ArrayView2<f64>,
        jitters: impl IntoIterator<Item = f64>,
    ) -> Result<Self> {
        let mut last = match Self::factor(a) {
            Ok(c) => return Ok(c),
            Err(b) => (b, 0.0),
        };
        for j in jitters {
            match Self::factor_shifted(a, j) {
                Ok(c) => return Ok(c),
                Err(b) => last = (b, j),
            }
        }
        Err(Error::Decomposition {
            minor: last.0.minor,
            pivot: last.0.pivot,
            jitter: last.1,
        })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn into_lower(self) -> Array2<f64> {
        self.lower
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `(L Lᵀ) X = B` in place, `B` holding one right-hand side per column.
    pub fn solve_in_place(&self, b: &mut Array2<f64>) {
        let p = self.dim();
        assert_eq!(b.nrows(), p);
        let l = &self.lower;
        for col in 0..b.ncols() {
            let mut x = b.column(col).to_owned();
            // forward: L y = b
            for i in 0..p {
                let row = l.row(i);
                let mut acc = x[i];
                for k in 0..i {
                    acc -= row[k] * x[k];
                }
                x[i] = acc / row[i];
            }
            // backward: Lᵀ x = y
            for i in (0..p).rev() {
                let mut acc = x[i];
                for k in (i + 1)..p {
                    acc -= l[[k, i]] * x[k];
                }
                x[i] = acc / l[[i, i]];
            }
            b.column_mut(col).assign(&x);
        }
    }

    /// Solves `(L Lᵀ) x = b` for a single vector.
    pub fn solve_vec(&self, b: &Array1<f64>) -> Array1<f64> {
        let mut m = b.clone().insert_axis(Axis(1));
        self.solve_in_place(&mut m);
        m.remove_axis(Axis(1))
    }
}

fn unblocked(a: &mut Array2<f64>, start: usize, end: usize) -> std::result::Result<(), Breakdown> {
    for j in start..end {
        let mut d = a[[j, j]];
        for k in start..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Breakdown {
                minor: j + 1,
                pivot: d,
            });
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..end {
            let mut v = a[[i, j]];
            for k in start..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    Ok(())
}

/// Right-looking blocked Cholesky on the lower triangle of `a`.
fn blocked_cholesky(a: &mut Array2<f64>) -> std::result::Result<(), Breakdown> {
    let p = a.nrows();
    let mut k0 = 0;
    while k0 < p {
        let k1 = (k0 + BLOCK).min(p);
        unblocked(a, k0, k1)?;
        if k1 == p {
            break;
        }
        // panel: L21 = A21 L11^{-T}, row by row
        let l11 = a.slice(s![k0..k1, k0..k1]).to_owned();
        for i in k1..p {
            for j in k0..k1 {
                let mut v = a[[i, j]];
                for k in k0..j {
                    v -= a[[i, k]] * l11[[j - k0, k - k0]];
                }
                a[[i, j]] = v / l11[[j - k0, j - k0]];
            }
        }
        // trailing update of the lower trapezoid: A22 -= L21 L21ᵀ
        let panel = a.slice(s![k1..p, k0..k1]).to_owned();
        let mut j0 = k1;
        while j0 < p {
            let j1 = (j0 + BLOCK).min(p);
            let rows = panel.slice(s![(j0 - k1).., ..]);
            let cols = panel.slice(s![(j0 - k1)..(j1 - k1), ..]);
            let mut target = a.slice_mut(s![j0..p, j0..j1]);
            general_mat_mul(-1.0, &rows, &cols.t(), 1.0, &mut target);
            j0 = j1;
        }
        k0 = k1;
    }
    Ok(())
}

/// Extreme eigenvalue estimates of a symmetric matrix through power
/// iteration; the smallest uses inverse iteration on its Cholesky factor.
pub fn condition_estimate(a: ArrayView2<f64>, chol: &Cholesky, iterations: usize) -> f64 {
    let p = a.nrows();
    if p == 0 {
        return 1.0;
    }
    let start = Array1::from_iter((0..p).map(|i| 1.0 + 0.01 * ((i * 7919) % 97) as f64));
    let normalize = |v: &mut Array1<f64>| {
        let n = v.dot(v).sqrt();
        if n > 0.0 {
            *v /= n;
        }
        n
    };
    let mut v = start.clone();
    normalize(&mut v);
    let mut lmax = 0.0;
    for _ in 0..iterations {
        let mut w = a.dot(&v);
        for i in 0..p {
            w[i] += chol.jitter() * v[i];
        }
        lmax = normalize(&mut w);
        v = w;
    }
    let mut u = start;
    normalize(&mut u);
    let mut inv_lmin = 0.0;
    for _ in 0..iterations {
        let mut w = chol.solve_vec(&u);
        inv_lmin = normalize(&mut w);
        u = w;
    }
    if inv_lmin > 0.0 && lmax > 0.0 {
        lmax * inv_lmin
    } else {
        f64::INFINITY
    }
}
