//! Bordered block-banded normal equations.
//!
//! The Gauss-Newton matrix of a spline problem has the form
//!
//! ```text
//! [ A   B ]   A: symmetric banded (trajectory), half-bandwidth w
//! [ Bᵀ  C ]   B: n×8 border, C: 8×8 (calibration)
//! ```
//!
//! and is solved by a banded Cholesky of `A` and an 8×8 Schur complement.

use crate::residuals::N_CALIB;
use nalgebra::{SMatrix, SVector};

pub type CalibMatrix = SMatrix<f64, N_CALIB, N_CALIB>;
pub type CalibVector = SVector<f64, N_CALIB>;

/// Lower-band storage: `A[i][i−d]` lives at `band[i·(w+1) + d]`.
#[derive(Debug, Clone)]
pub struct BandedSymmetric {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandedSymmetric {
    pub fn zeros(n: usize, w: usize) -> Self {
        BandedSymmetric { n, w, band: vec![0.0; n * (w + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.w
    }

    /// Entry `(i, j)` with `j ≤ i`; zero outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        if i - j > self.w {
            0.0
        } else {
            self.band[i * (self.w + 1) + (i - j)]
        }
    }

    /// Adds to entry `(i, j)`, `j ≤ i`, `i − j ≤ w`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && i - j <= self.w);
        self.band[i * (self.w + 1) + (i - j)] += v;
    }

    #[inline]
    pub fn diag(&self, i: usize) -> f64 {
        self.band[i * (self.w + 1)]
    }

    #[inline]
    pub fn set_diag(&mut self, i: usize, v: f64) {
        self.band[i * (self.w + 1)] = v;
    }

    /// Zeroes row and column `i` and puts 1 on the diagonal.
    pub fn pin(&mut self, i: usize) {
        let w = self.w;
        for d in 1..=w.min(i) {
            self.band[i * (w + 1) + d] = 0.0;
        }
        for q in i + 1..(i + w + 1).min(self.n) {
            self.band[q * (w + 1) + (q - i)] = 0.0;
        }
        self.set_diag(i, 1.0);
    }

    pub fn cholesky(&self) -> Option<BandedCholesky> {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        let mut l = vec![0.0; n * stride];
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                let mut s = self.band[i * stride + (i - j)];
                let p0 = j0.max(j.saturating_sub(w));
                for p in p0..j {
                    s -= l[i * stride + (i - p)] * l[j * stride + (j - p)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l[i * stride] = s.sqrt();
                } else {
                    l[i * stride + (i - j)] = s / l[j * stride];
                }
            }
        }
        Some(BandedCholesky { n, w, l })
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { self.get(i, j) } else { self.get(j, i) })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    w: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Solves `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        for i in 0..n {
            let mut s = b[i];
            for p in i.saturating_sub(w)..i {
                s -= self.l[i * stride + (i - p)] * b[p];
            }
            b[i] = s / self.l[i * stride];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for q in i + 1..(i + w + 1).min(n) {
                s -= self.l[q * stride + (q - i)] * b[q];
            }
            b[i] = s / self.l[i * stride];
        }
    }
}

/// Normal equations `H = JᵀJ`, `g = Jᵀe` of a spline calibration problem.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub a: BandedSymmetric,
    /// Row-major `n × 8`.
    pub b: Vec<f64>,
    pub c: CalibMatrix,
    pub g_traj: Vec<f64>,
    pub g_calib: CalibVector,
}

/// Result of the bordered solve.
#[derive(Debug, Clone)]
pub struct BorderedSolution {
    pub traj: Vec<f64>,
    pub calib: CalibVector,
}

impl NormalEquations {
    pub fn zeros(n: usize, w: usize) -> Self {
        NormalEquations {
            a: BandedSymmetric::zeros(n, w),
            b: vec![0.0; n * N_CALIB],
            c: CalibMatrix::zeros(),
            g_traj: vec![0.0; n],
            g_calib: CalibVector::zeros(),
        }
    }

    pub fn dim_traj(&self) -> usize {
        self.a.dim()
    }

    /// Adds the contribution of one whitened residual block.
    ///
    /// `jt` is `rows × jt_cols` row-major for trajectory columns starting at
    /// `offset`; `jc` is `rows × 8` row-major.
    pub fn accumulate(&mut self, rows: usize, offset: usize, jt: &[f64], jt_cols: usize, jc: &[f64], e: &[f64]) {
        for r in 0..rows {
            let jr = &jt[r * jt_cols..(r + 1) * jt_cols];
            let cr = &jc[r * N_CALIB..(r + 1) * N_CALIB];
            let er = e[r];
            for a in 0..jt_cols {
                let va = jr[a];
                if va == 0.0 {
                    continue;
                }
                let ia = offset + a;
                for bb in 0..=a {
                    let vb = jr[bb];
                    if vb != 0.0 {
                        self.a.add(ia, offset + bb, va * vb);
                    }
                }
                let brow = &mut self.b[ia * N_CALIB..(ia + 1) * N_CALIB];
                for c in 0..N_CALIB {
                    brow[c] += va * cr[c];
                }
                self.g_traj[ia] += va * er;
            }
            for i in 0..N_CALIB {
                if cr[i] == 0.0 {
                    continue;
                }
                for j in 0..N_CALIB {
                    self.c[(i, j)] += cr[i] * cr[j];
                }
                self.g_calib[i] += cr[i] * er;
            }
        }
    }

    /// Pins trajectory parameters no residual touches and calibration
    /// parameters that are flagged in `fixed` or untouched. Returns the
    /// pinned calibration mask.
    pub fn pin_unused(&mut self, fixed: &[bool; N_CALIB]) -> [bool; N_CALIB] {
        let mut pinned = *fixed;
        for i in 0..self.dim_traj() {
            if self.a.diag(i) == 0.0 {
                self.a.pin(i);
                self.b[i * N_CALIB..(i + 1) * N_CALIB].fill(0.0);
                self.g_traj[i] = 0.0;
            }
        }
        for (i, &f) in fixed.iter().enumerate() {
            if f || self.c[(i, i)] == 0.0 {
                pinned[i] = true;
                for j in 0..N_CALIB {
                    self.c[(i, j)] = 0.0;
                    self.c[(j, i)] = 0.0;
                }
                self.c[(i, i)] = 1.0;
                self.g_calib[i] = 0.0;
                for r in 0..self.dim_traj() {
                    self.b[r * N_CALIB + i] = 0.0;
                }
            }
        }
        pinned
    }

    /// Returns a copy with `λ·diag` added to every diagonal entry.
    pub fn damped(&self, lambda: f64) -> NormalEquations {
        let mut out = self.clone();
        for i in 0..out.dim_traj() {
            let d = out.a.diag(i);
            out.a.set_diag(i, d + lambda * d.max(1e-12));
        }
        for i in 0..N_CALIB {
            let d = out.c[(i, i)];
            out.c[(i, i)] = d + lambda * d.max(1e-12);
        }
        out
    }

    /// `A⁻¹B` column by column, along with the factorization of `A`.
    fn a_inv_b(&self) -> Option<(BandedCholesky, Vec<f64>)> {
        let chol = self.a.cholesky()?;
        let n = self.dim_traj();
        let mut x = vec![0.0; n * N_CALIB];
        let mut col = vec![0.0; n];
        for c in 0..N_CALIB {
            for r in 0..n {
                col[r] = self.b[r * N_CALIB + c];
            }
            chol.solve_in_place(&mut col);
            for r in 0..n {
                x[r * N_CALIB + c] = col[r];
            }
        }
        Some((chol, x))
    }

    /// Schur complement `C − BᵀA⁻¹B`; `None` if `A` is not positive definite.
    pub fn schur_complement(&self) -> Option<CalibMatrix> {
        let (_, x) = self.a_inv_b()?;
        Some(self.c - self.bt_times(&x))
    }

    fn bt_times(&self, x: &[f64]) -> CalibMatrix {
        let mut out = CalibMatrix::zeros();
        for r in 0..self.dim_traj() {
            let br = &self.b[r * N_CALIB..(r + 1) * N_CALIB];
            let xr = &x[r * N_CALIB..(r + 1) * N_CALIB];
            for i in 0..N_CALIB {
                if br[i] == 0.0 {
                    continue;
                }
                for j in 0..N_CALIB {
                    out[(i, j)] += br[i] * xr[j];
                }
            }
        }
        out
    }

    /// Solves `H·δ = −g`.
    pub fn solve_step(&self) -> Option<BorderedSolution> {
        let (chol, x) = self.a_inv_b()?;
        let n = self.dim_traj();
        let s = self.c - self.bt_times(&x);
        let mut a_inv_g = self.g_traj.clone();
        chol.solve_in_place(&mut a_inv_g);
        // rhs_c = −g_c + Bᵀ A⁻¹ g_a
        let mut rhs = -self.g_calib;
        for r in 0..n {
            for i in 0..N_CALIB {
                rhs[i] += self.b[r * N_CALIB + i] * a_inv_g[r];
            }
        }
        let s_chol = nalgebra::Cholesky::new((s + s.transpose()) * 0.5)?;
        let calib = s_chol.solve(&rhs);
        // δa = A⁻¹(−g_a − B δc) = −A⁻¹g_a − X δc
        let mut traj = vec![0.0; n];
        for r in 0..n {
            let mut v = -a_inv_g[r];
            for i in 0..N_CALIB {
                v -= x[r * N_CALIB + i] * calib[i];
            }
            traj[r] = v;
        }
        Some(BorderedSolution { traj, calib })
    }
}
