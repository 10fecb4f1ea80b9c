//! Normal-equation moments for one-dimensional reservoir inputs without
//! materializing the `n × p` feature matrix.
//!
//! Every feature used by the solvers has the form
//! `X_jk = H(a_k x_j + b_k) · (c_k · z_j)` where `x_j` is the scalar input of
//! path `j`, `z_j ∈ R^q` is a short per-path basis and `c_k ∈ R^q` a
//! per-feature coefficient row. With the paths sorted by `x`, the set of paths
//! on which unit `k` is active is a prefix or a suffix of that order, so
//!
//! ```text
//! Gram_kl  = c_kᵀ (Σ_{j ∈ S_k ∩ S_l} z_j z_jᵀ) c_l
//! Cross_mk = (Σ_{j ∈ S_k} y_jm z_j) · c_k
//! ```
//!
//! reduce to prefix and suffix sums of `z zᵀ` and `y zᵀ`. Cost is
//! `O(n log n + n q² + p² q²)` instead of `O(n p²)`.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::rls::MomentAccumulator;

/// Paths sorted by their scalar input, with compensated prefix and suffix sums
/// of the per-path moment records.
#[derive(Debug, Clone)]
pub struct SortedDesign {
    sorted_x: Vec<f64>,
    q: usize,
    m: usize,
    width: usize,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
}

/// Half-open range `[lo, hi)` of sorted path positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Support {
    pub lo: usize,
    pub hi: usize,
}

impl SortedDesign {
    /// `x`: inputs (length `n`); `basis`: `n × q`; `targets`: `n × m`.
    pub fn new(x: ArrayView1<f64>, basis: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Self> {
        let n = x.len();
        if basis.nrows() != n || targets.nrows() != n {
            return Err(Error::invalid("inputs, basis and targets must have the same number of rows"));
        }
        let (q, m) = (basis.ncols(), targets.ncols());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
        let sorted_x: Vec<f64> = order.iter().map(|&j| x[j]).collect();

        let tri = q * (q + 1) / 2;
        let width = tri + m * q;
        let record = |j: usize, out: &mut [f64]| {
            let z = basis.row(j);
            let mut t = 0;
            for a in 0..q {
                for b in a..q {
                    out[t] = z[a] * z[b];
                    t += 1;
                }
            }
            for o in 0..m {
                let y = targets[[j, o]];
                for a in 0..q {
                    out[t] = y * z[a];
                    t += 1;
                }
            }
        };

        let mut prefix = vec![0.0; (n + 1) * width];
        let mut suffix = vec![0.0; (n + 1) * width];
        let mut rec = vec![0.0; width];
        let mut sum = vec![0.0; width];
        let mut comp = vec![0.0; width];
        for (pos, &j) in order.iter().enumerate() {
            record(j, &mut rec);
            neumaier_add(&mut sum, &mut comp, &rec);
            for t in 0..width {
                prefix[(pos + 1) * width + t] = sum[t] + comp[t];
            }
        }
        sum.fill(0.0);
        comp.fill(0.0);
        for (pos, &j) in order.iter().enumerate().rev() {
            record(j, &mut rec);
            neumaier_add(&mut sum, &mut comp, &rec);
            for t in 0..width {
                suffix[pos * width + t] = sum[t] + comp[t];
            }
        }
        Ok(Self {
            sorted_x,
            q,
            m,
            width,
            prefix,
            suffix,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_x.is_empty()
    }

    pub fn basis_dim(&self) -> usize {
        self.q
    }

    /// Sorted positions where `weight · x + bias > 0`, evaluated with the same
    /// floating-point expression as the dense feature map.
    pub fn support(&self, weight: f64, bias: f64) -> Support {
        let n = self.len();
        let active = |x: f64| weight * x + bias > 0.0;
        if weight > 0.0 {
            Support {
                lo: self.sorted_x.partition_point(|&x| !active(x)),
                hi: n,
            }
        } else if weight < 0.0 {
            Support {
                lo: 0,
                hi: self.sorted_x.partition_point(|&x| active(x)),
            }
        } else if bias > 0.0 {
            Support { lo: 0, hi: n }
        } else {
            Support { lo: 0, hi: 0 }
        }
    }

    /// Sum of the moment records over `[lo, hi)`, or `None` when empty.
    fn range_sum(&self, lo: usize, hi: usize, out: &mut [f64]) -> bool {
        let n = self.len();
        if lo >= hi {
            return false;
        }
        let w = self.width;
        if lo == 0 {
            out.copy_from_slice(&self.prefix[hi * w..(hi + 1) * w]);
        } else if hi == n {
            out.copy_from_slice(&self.suffix[lo * w..(lo + 1) * w]);
        } else {
            for (t, o) in out.iter_mut().enumerate() {
                *o = self.prefix[hi * w + t] - self.prefix[lo * w + t];
            }
        }
        true
    }

    /// Moments of the features described by `weights`, `biases` (one entry
    /// per feature) and the coefficient rows `coeffs` (`p × q`).
    pub fn moments(&self, weights: &[f64], biases: &[f64], coeffs: ArrayView2<f64>) -> Result<MomentAccumulator> {
        let p = weights.len();
        if biases.len() != p || coeffs.nrows() != p || coeffs.ncols() != self.q {
            return Err(Error::invalid("feature description has inconsistent shapes"));
        }
        let (q, m) = (self.q, self.m);
        let supports: Vec<Support> = weights
            .iter()
            .zip(biases)
            .map(|(&a, &b)| self.support(a, b))
            .collect();
        let mut acc = MomentAccumulator::new(p, m);
        acc.count = self.len();

        let mut buf = vec![0.0; self.width];
        let mut mat = vec![0.0; q * q];
        let mut mc = vec![0.0; q];
        let unpack = |buf: &[f64], mat: &mut [f64]| {
            let mut t = 0;
            for a in 0..q {
                for b in a..q {
                    mat[a * q + b] = buf[t];
                    mat[b * q + a] = buf[t];
                    t += 1;
                }
            }
        };

        for k in 0..p {
            let sk = supports[k];
            let ck = coeffs.row(k);
            if self.range_sum(sk.lo, sk.hi, &mut buf) {
                let base = q * (q + 1) / 2;
                for o in 0..m {
                    let mut v = 0.0;
                    for a in 0..q {
                        v += buf[base + o * q + a] * ck[a];
                    }
                    acc.cross[[o, k]] = v;
                }
            }
            for (l, &sl) in supports.iter().enumerate().take(k + 1) {
                let lo = sk.lo.max(sl.lo);
                let hi = sk.hi.min(sl.hi);
                if !self.range_sum(lo, hi, &mut buf) {
                    continue;
                }
                unpack(&buf, &mut mat);
                let cl = coeffs.row(l);
                for a in 0..q {
                    let mut v = 0.0;
                    for b in 0..q {
                        v += mat[a * q + b] * cl[b];
                    }
                    mc[a] = v;
                }
                let mut g = 0.0;
                for a in 0..q {
                    g += ck[a] * mc[a];
                }
                acc.gram[[k, l]] = g;
                acc.gram[[l, k]] = g;
            }
        }
        Ok(acc)
    }
}

fn neumaier_add(sum: &mut [f64], comp: &mut [f64], rec: &[f64]) {
    for t in 0..sum.len() {
        let s = sum[t];
        let v = rec[t];
        let r = s + v;
        if s.abs() >= v.abs() {
            comp[t] += (s - r) + v;
        } else {
            comp[t] += (v - r) + s;
        }
        sum[t] = r;
    }
}

/// Dense feature matrix for the same description, used by tests and by the
/// dense route to cross-check the sorted one.
pub fn dense_features(
    x: ArrayView1<f64>,
    basis: ArrayView2<f64>,
    weights: &[f64],
    biases: &[f64],
    coeffs: ArrayView2<f64>,
) -> Array2<f64> {
    let (n, p) = (x.len(), weights.len());
    Array2::from_shape_fn((n, p), |(j, k)| {
        if weights[k] * x[j] + biases[k] > 0.0 {
            coeffs.row(k).dot(&basis.row(j))
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `(x, basis, targets, weights, biases, coeffs)`.
    type Problem = (Array1<f64>, Array2<f64>, Array2<f64>, Vec<f64>, Vec<f64>, Array2<f64>);

    fn random_problem(n: usize, p: usize, q: usize, m: usize, seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random_range(-1.0..1.0);
        let x = Array1::from_shape_simple_fn(n, &mut u);
        let basis = Array2::from_shape_simple_fn((n, q), &mut u);
        let y = Array2::from_shape_simple_fn((n, m), &mut u);
        let mut w: Vec<f64> = (0..p).map(|_| u()).collect();
        let b: Vec<f64> = (0..p).map(|_| u()).collect();
        w[0] = 0.0;
        let c = Array2::from_shape_simple_fn((p, q), &mut u);
        (x, basis, y, w, b, c)
    }

    #[test]
    fn matches_dense_accumulation() {
        let (x, basis, y, w, b, c) = random_problem(3000, 40, 3, 2, 11);
        let design = SortedDesign::new(x.view(), basis.view(), y.view()).unwrap();
        let sorted = design.moments(&w, &b, c.view()).unwrap();
        let feats = dense_features(x.view(), basis.view(), &w, &b, c.view());
        let mut dense = MomentAccumulator::new(40, 2);
        dense.accumulate(feats.view(), y.view()).unwrap();
        let gscale = dense.gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cscale = dense.cross.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (s, d) in sorted.gram.iter().zip(dense.gram.iter()) {
            assert!((s - d).abs() <= 1e-10 * gscale, "{s} vs {d}");
        }
        for (s, d) in sorted.cross.iter().zip(dense.cross.iter()) {
            assert!((s - d).abs() <= 1e-10 * cscale, "{s} vs {d}");
        }
        assert_eq!(sorted.count, 3000);
    }

    #[test]
    fn tied_inputs() {
        // every path at the same point, as at the first backward step
        let x = Array1::from_elem(50, 0.25);
        let basis = Array2::from_shape_fn((50, 2), |(j, a)| if a == 0 { 1.0 } else { j as f64 });
        let y = Array2::from_shape_fn((50, 1), |(j, _)| j as f64 * 0.5);
        let w = [1.0, -1.0, 4.0];
        let b = [0.0, 0.1, -1.0];
        let c = array![[1.0, 2.0], [0.5, -1.0], [3.0, 3.0]];
        let design = SortedDesign::new(x.view(), basis.view(), y.view()).unwrap();
        let sorted = design.moments(&w, &b, c.view()).unwrap();
        let feats = dense_features(x.view(), basis.view(), &w, &b, c.view());
        let mut dense = MomentAccumulator::new(3, 1);
        dense.accumulate(feats.view(), y.view()).unwrap();
        // unit 2 sits exactly on its kink (4·0.25 − 1 = 0) and is inactive
        assert!(feats.column(2).iter().all(|v| *v == 0.0));
        for (s, d) in sorted.gram.iter().zip(dense.gram.iter()) {
            assert!((s - d).abs() <= 1e-12 * (1.0 + d.abs()));
        }
    }

    #[test]
    fn support_shapes() {
        let x = array![-2.0, -1.0, 0.0, 1.0, 2.0];
        let basis = Array2::ones((5, 1));
        let y = Array2::zeros((5, 1));
        let d = SortedDesign::new(x.view(), basis.view(), y.view()).unwrap();
        assert_eq!(d.support(1.0, 0.0), Support { lo: 3, hi: 5 });
        assert_eq!(d.support(-1.0, 0.5), Support { lo: 0, hi: 3 });
        assert_eq!(d.support(0.0, 1.0), Support { lo: 0, hi: 5 });
        assert_eq!(d.support(0.0, 0.0), Support { lo: 0, hi: 0 });
    }

    #[test]
    fn shape_errors() {
        let x = Array1::zeros(3);
        assert!(SortedDesign::new(x.view(), Array2::zeros((2, 1)).view(), Array2::zeros((3, 1)).view()).is_err());
        let d = SortedDesign::new(x.view(), Array2::zeros((3, 2)).view(), Array2::zeros((3, 1)).view()).unwrap();
        assert!(d.moments(&[1.0], &[0.0], Array2::zeros((1, 3)).view()).is_err());
    }
}
