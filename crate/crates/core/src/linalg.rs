//! Dense symmetric and tridiagonal linear algebra for the block solver.
//!
//! The joint posterior precision of the latent field has an arrow shape:
//! a large symmetric tridiagonal block for the temporal states plus a small
//! dense block for fixed effects and group deviations. Everything here is
//! sized for that split, so no general sparse machinery is needed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Symmetric tridiagonal matrix: `diag[i]` on the diagonal, `off[i]`
/// coupling indices `i` and `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl Tridiag {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert_eq!(off.len() + 1, diag.len().max(1), "off-diagonal length");
        Tridiag { diag, off }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// y = T x.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = self.diag[i] * x[i];
            if i > 0 {
                y[i] += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                y[i] += self.off[i] * x[i + 1];
            }
        }
        y
    }

    pub fn quadform(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..self.n() {
            q += self.diag[i] * x[i] * x[i];
            if i + 1 < self.n() {
                q += 2.0 * self.off[i] * x[i] * x[i + 1];
            }
        }
        q
    }

    /// Cholesky factor T = L Lᵀ with L lower bidiagonal.
    pub fn cholesky(&self) -> Result<BidiagChol> {
        let n = self.n();
        let mut d = vec![0.0; n];
        let mut e = vec![0.0; n.saturating_sub(1)];
        let mut prev_e = 0.0;
        for i in 0..n {
            let s = self.diag[i] - prev_e * prev_e;
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Factorization {
                    detail: format!("tridiagonal pivot {i} not positive ({s})"),
                });
            }
            d[i] = math::sqrt(s);
            if i + 1 < n {
                e[i] = self.off[i] / d[i];
                prev_e = e[i];
            }
        }
        Ok(BidiagChol { d, e })
    }

    /// Dense copy, for oracle comparisons in tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = self.diag[i];
            if i + 1 < n {
                a[i][i + 1] = self.off[i];
                a[i + 1][i] = self.off[i];
            }
        }
        a
    }
}

/// Lower-bidiagonal Cholesky factor of a [`Tridiag`].
#[derive(Debug, Clone)]
pub struct BidiagChol {
    /// Diagonal of L.
    pub d: Vec<f64>,
    /// Subdiagonal of L (`e[i]` is L[i+1, i]).
    pub e: Vec<f64>,
}

impl BidiagChol {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// log |T| for T = L Lᵀ.
    pub fn log_det(&self) -> f64 {
        2.0 * self.d.iter().map(|&v| math::ln(v)).sum::<f64>()
    }

    /// Solve L x = b in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            if i > 0 {
                b[i] -= self.e[i - 1] * b[i - 1];
            }
            b[i] /= self.d[i];
        }
    }

    /// Solve Lᵀ x = b in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = self.n();
        for i in (0..n).rev() {
            if i + 1 < n {
                b[i] -= self.e[i] * b[i + 1];
            }
            b[i] /= self.d[i];
        }
    }

    /// Solve T x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// Diagonal of T⁻¹ via the Takahashi recursion restricted to the
    /// tridiagonal sparsity pattern.
    pub fn inverse_diag(&self) -> Vec<f64> {
        let n = self.n();
        let mut z = vec![0.0; n];
        if n == 0 {
            return z;
        }
        z[n - 1] = 1.0 / (self.d[n - 1] * self.d[n - 1]);
        for i in (0..n - 1).rev() {
            let r = self.e[i] / self.d[i];
            let z_cross = -r * z[i + 1];
            z[i] = 1.0 / (self.d[i] * self.d[i]) - r * z_cross;
        }
        z
    }
}

/// Dense symmetric matrix, full row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    n: usize,
    a: Vec<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        SymMat { n, a: vec![0.0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
        self.a[j * self.n + i] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
        if i != j {
            self.a[j * self.n + i] += v;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.a[i * self.n..(i + 1) * self.n];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    pub fn quadform(&self, x: &[f64]) -> f64 {
        x.iter().zip(self.mul(x)).map(|(a, b)| a * b).sum()
    }

    pub fn cholesky(&self) -> Result<DenseChol> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut s = self.get(j, j);
            for k in 0..j {
                s -= l[j * n + k] * l[j * n + k];
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Factorization {
                    detail: format!("dense pivot {j} not positive ({s})"),
                });
            }
            let djj = math::sqrt(s);
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut v = self.get(i, j);
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / djj;
            }
        }
        Ok(DenseChol { n, l })
    }
}

/// Lower Cholesky factor of a [`SymMat`].
#[derive(Debug, Clone)]
pub struct DenseChol {
    n: usize,
    l: Vec<f64>,
}

impl DenseChol {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * math::ln(self.l[i * self.n + i])).sum()
    }

    pub fn solve_lower(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= self.l[i * n + k] * b[k];
            }
            b[i] = v / self.l[i * n + i];
        }
    }

    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut v = b[i];
            for k in i + 1..n {
                v -= self.l[k * n + i] * b[k];
            }
            b[i] = v / self.l[i * n + i];
        }
    }

    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// Full inverse of the factored matrix.
    pub fn inverse(&self) -> SymMat {
        let n = self.n;
        let mut inv = SymMat::zeros(n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve(&mut col);
            for i in 0..n {
                inv.a[i * n + j] = col[i];
            }
        }
        // Symmetrize against round-off drift between columns.
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv.a[i * n + j] + inv.a[j * n + i]);
                inv.a[i * n + j] = v;
                inv.a[j * n + i] = v;
            }
        }
        inv
    }
}
