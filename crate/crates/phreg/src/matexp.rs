//! Matrix-exponential kernels for sub-intensity matrices.
//!
//! `exp(Ty)` is evaluated by uniformization: with `phi = max_k(-t_kk)` and
//! `Q = I + T/phi`, the exponential is the Poisson mixture
//! `exp(Ty) = sum_n e^{-phi y} (phi y)^n / n! * Q^n`. Every term is
//! entrywise nonnegative, so truncating at order `M` incurs an error no
//! larger than the Poisson tail `P(N_{phi y} > M)`. Large `phi y` is
//! handled by scaling: `exp(Ty) = exp(T y / 2^m)^{2^m}` with `m` chosen so
//! the halved Poisson mean drops below one, after which the result is
//! recovered by sequential squaring.
//!
//! The convolution-type integral `int_0^y e^{T(y-u)} t pi' e^{Tu} du` is
//! read off the upper-right block of the exponential of the augmented
//! matrix `[[T, t pi'], [0, T]]` (Van Loan's block method), so it costs a
//! single 2p x 2p exponential.

use crate::error::{Error, Result};
use std::ops::{Index, IndexMut};

/// Default entrywise tolerance for the kernels. Chosen well below the EM
/// stopping tolerance so kernel error cannot break likelihood monotonicity.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Dense square matrix with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("matrix dimension must be at least 1".into()));
        }
        Ok(Self { dim, data: vec![0.0; dim * dim] })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut m = Self::zeros(dim)?;
        for k in 0..dim {
            m[(k, k)] = 1.0;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut m = Self::zeros(dim)?;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Dimension(format!(
                    "row {} has length {}, expected {}",
                    r,
                    row.len(),
                    dim
                )));
            }
            m.data[r * dim..(r + 1) * dim].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let mut best = 0.0f64;
        for c in 0..self.dim {
            let s: f64 = (0..self.dim).map(|r| self[(r, c)].abs()).sum();
            best = best.max(s);
        }
        best
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        let mut out = Self { dim: self.dim, data: vec![0.0; self.dim * self.dim] };
        self.matmul_into(rhs, &mut out);
        out
    }

    pub fn matmul_into(&self, rhs: &Self, out: &mut Self) {
        let p = self.dim;
        assert_eq!(p, rhs.dim);
        assert_eq!(p, out.dim);
        out.data.fill(0.0);
        for i in 0..p {
            for k in 0..p {
                let a = self.data[i * p + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[k * p..(k + 1) * p];
                let orow = &mut out.data[i * p..(i + 1) * p];
                for (o, r) in orow.iter_mut().zip(rrow) {
                    *o += a * r;
                }
            }
        }
    }

    /// Matrix-vector product `A v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        (0..self.dim)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Row-vector product `v' A`.
    pub fn vecmat(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += vr * a;
            }
        }
        out
    }

    /// Solves `A x = b` by LU decomposition with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::Dimension("right-hand side length mismatch".into()));
        }
        let p = self.dim;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for col in 0..p {
            let mut piv = col;
            for r in col + 1..p {
                if a[r * p + col].abs() > a[piv * p + col].abs() {
                    piv = r;
                }
            }
            if a[piv * p + col] == 0.0 {
                return Err(Error::Singular);
            }
            if piv != col {
                for c in 0..p {
                    a.swap(col * p + c, piv * p + c);
                }
                x.swap(col, piv);
            }
            let d = a[col * p + col];
            for r in col + 1..p {
                let f = a[r * p + col] / d;
                if f == 0.0 {
                    continue;
                }
                a[r * p + col] = 0.0;
                for c in col + 1..p {
                    a[r * p + c] -= f * a[col * p + c];
                }
                x[r] -= f * x[col];
            }
        }
        for col in (0..p).rev() {
            x[col] /= a[col * p + col];
            for r in 0..col {
                x[r] -= a[r * p + col] * x[col];
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(x)
    }

    /// Inverse by column-wise solves. Fails on singular input.
    pub fn inverse(&self) -> Result<Self> {
        let p = self.dim;
        let mut inv = Self::zeros(p)?;
        let mut e = vec![0.0; p];
        for c in 0..p {
            e[c] = 1.0;
            let col = self.solve(&e)?;
            e[c] = 0.0;
            for r in 0..p {
                inv[(r, c)] = col[r];
            }
        }
        Ok(inv)
    }

    /// True when every entry strictly below (above) the diagonal is zero.
    pub fn is_upper_triangular(&self) -> bool {
        (0..self.dim).all(|r| (0..r).all(|c| self[(r, c)] == 0.0))
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.dim).all(|r| (r + 1..self.dim).all(|c| self[(r, c)] == 0.0))
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.dim + c]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.dim + c]
    }
}

/// Checks the sub-intensity contract: finite entries, strictly negative
/// diagonal, nonnegative off-diagonal, row sums bounded by zero up to
/// rounding at the matrix scale.
pub fn validate_sub_intensity(t: &SquareMatrix) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NumericDomain("sub-intensity matrix has non-finite entries".into()));
    }
    let scale = t.max_abs().max(1.0);
    let slack = 1e-10 * scale;
    for r in 0..t.dim() {
        if t[(r, r)] >= 0.0 {
            return Err(Error::NumericDomain(format!(
                "diagonal entry ({r},{r}) = {} must be negative",
                t[(r, r)]
            )));
        }
        let mut sum = 0.0;
        for c in 0..t.dim() {
            if c != r && t[(r, c)] < 0.0 {
                return Err(Error::NumericDomain(format!(
                    "off-diagonal entry ({r},{c}) = {} must be nonnegative",
                    t[(r, c)]
                )));
            }
            sum += t[(r, c)];
        }
        if sum > slack {
            return Err(Error::NumericDomain(format!("row {r} sums to {sum} > 0")));
        }
    }
    Ok(())
}

/// Smallest truncation order `M` whose Poisson tail bound drops below
/// `ln_tol` (given in log space to stay meaningful after tolerance
/// splitting across squarings). Uses the geometric bound
/// `P(N_mu > M) <= p_{M+1} / (1 - mu/(M+2))`.
fn poisson_truncation_order(mean: f64, ln_tol: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let ln_mean = mean.ln();
    let mut ln_fact = 0.0; // ln n!
    let mut n = 0usize;
    loop {
        n += 1;
        ln_fact += (n as f64).ln();
        // bound for truncation at M = n - 1, valid once mean < n + 1
        if (n as f64) + 1.0 > mean {
            let r = mean / (n as f64 + 1.0);
            let ln_bound = -mean + (n as f64) * ln_mean - ln_fact - (1.0 - r).ln();
            if ln_bound <= ln_tol {
                return n - 1;
            }
        }
        if n > 2_000_000 {
            // unreachable for the scaled means used here; fail loudly
            panic!("poisson truncation order did not terminate (mean = {mean})");
        }
    }
}

/// Precomputed uniformization of `exp(Ty)`: rate, sub-stochastic transition
/// matrix, Poisson truncation order for the scaled step, and squaring depth.
#[derive(Clone, Debug)]
pub struct UniformizationPlan {
    /// Uniformization rate `phi = max_k(-t_kk)`.
    pub rate: f64,
    /// `Q = I + T/phi`; nonnegative with row sums in [0, 1].
    pub transition: SquareMatrix,
    /// Series truncation order for the halved mean.
    pub truncation_order: usize,
    /// Number of squarings applied after the truncated series.
    pub squaring_depth: usize,
    step_mean: f64,
}

impl UniformizationPlan {
    pub fn build(t: &SquareMatrix, y: f64, tol: f64) -> Result<Self> {
        validate_sub_intensity(t)?;
        if !y.is_finite() || y < 0.0 {
            return Err(Error::Domain(format!("exponent time {y} must be finite and nonnegative")));
        }
        if !(tol > 0.0) {
            return Err(Error::Domain("tolerance must be positive".into()));
        }
        let p = t.dim();
        let rate = (0..p).fold(0.0f64, |acc, k| acc.max(-t[(k, k)]));
        let total_mean = rate * y;
        let squaring_depth =
            if total_mean > 1.0 { total_mean.log2().ceil().max(0.0) as usize } else { 0 };
        let step_mean = total_mean / (1u64 << squaring_depth.min(63)) as f64;
        // Entrywise error at most doubles per squaring of sub-stochastic
        // factors, so the series is run at tol / 2^m (in log space).
        let ln_tol = tol.ln() - squaring_depth as f64 * std::f64::consts::LN_2;
        let truncation_order = poisson_truncation_order(step_mean, ln_tol);
        let mut transition = SquareMatrix::identity(p)?;
        for r in 0..p {
            for c in 0..p {
                transition[(r, c)] += t[(r, c)] / rate;
            }
        }
        Ok(Self { rate, transition, truncation_order, squaring_depth, step_mean })
    }

    /// Runs the truncated series and the squarings.
    pub fn execute(&self) -> SquareMatrix {
        let (mut m, log_scale) = self.execute_log_scaled();
        m.scale_in_place(log_scale.exp());
        m
    }

    /// Like [`execute`](Self::execute) but keeps the result factored as
    /// `M * exp(log_scale)`, renormalizing between squarings. This keeps
    /// log-scale information available far past the point where `exp(Ty)`
    /// itself underflows f64.
    pub fn execute_log_scaled(&self) -> (SquareMatrix, f64) {
        let p = self.transition.dim();
        let mut acc = SquareMatrix::identity(p).expect("dim >= 1");
        if self.step_mean == 0.0 {
            return (acc, 0.0);
        }
        let mut weight = 1.0;
        let mut power = SquareMatrix::identity(p).expect("dim >= 1");
        let mut scratch = SquareMatrix::zeros(p).expect("dim >= 1");
        for n in 1..=self.truncation_order {
            power.matmul_into(&self.transition, &mut scratch);
            std::mem::swap(&mut power, &mut scratch);
            weight *= self.step_mean / n as f64;
            for (a, b) in acc.data.iter_mut().zip(&power.data) {
                *a += weight * b;
            }
        }
        // acc now holds e^{mu} exp(T h); absorb the factor into log space
        let mut log_scale = -self.step_mean;
        for _ in 0..self.squaring_depth {
            let norm = acc.max_abs();
            acc.scale_in_place(1.0 / norm);
            log_scale = 2.0 * (log_scale + norm.ln());
            acc.matmul_into(&acc.clone(), &mut scratch);
            std::mem::swap(&mut acc, &mut scratch);
        }
        let norm = acc.max_abs();
        acc.scale_in_place(1.0 / norm);
        log_scale += norm.ln();
        (acc, log_scale)
    }
}

/// `exp(Ty)` for a sub-intensity matrix `T`, entrywise accurate to `tol`.
/// The result is sub-stochastic: nonnegative entries, row sums in [0, 1].
pub fn matrix_exponential(t: &SquareMatrix, y: f64, tol: f64) -> Result<SquareMatrix> {
    let plan = UniformizationPlan::build(t, y, tol)?;
    Ok(plan.execute())
}

/// Evaluates `exp(Ty)` together with the Van Loan integral block
/// `int_0^y e^{T(y-u)} t pi' e^{Tu} du` via one exponential of the
/// augmented 2p x 2p matrix `[[T, t pi'], [0, T]]`.
///
/// `exit` must equal `-T e` and `pi` must be a sub-probability vector; the
/// augmented matrix is then itself a sub-intensity matrix, so the plain
/// uniformization bound applies.
pub fn van_loan_integral(
    t: &SquareMatrix,
    exit: &[f64],
    pi: &[f64],
    y: f64,
    tol: f64,
) -> Result<(SquareMatrix, SquareMatrix)> {
    let p = t.dim();
    if exit.len() != p || pi.len() != p {
        return Err(Error::Dimension(format!(
            "exit/initial vector lengths ({}, {}) do not match matrix dimension {}",
            exit.len(),
            pi.len(),
            p
        )));
    }
    let scale = t.max_abs().max(1.0);
    for k in 0..p {
        let row_sum: f64 = t.row(k).iter().sum();
        if (exit[k] + row_sum).abs() > 1e-10 * scale {
            return Err(Error::Dimension(format!(
                "exit vector entry {k} = {} is not -T e = {}",
                exit[k], -row_sum
            )));
        }
    }
    let pi_sum: f64 = pi.iter().sum();
    if pi.iter().any(|v| *v < 0.0) || pi_sum > 1.0 + 1e-10 {
        return Err(Error::Domain("initial vector must be sub-probability".into()));
    }
    let mut aug = SquareMatrix::zeros(2 * p)?;
    for r in 0..p {
        for c in 0..p {
            aug[(r, c)] = t[(r, c)];
            aug[(p + r, p + c)] = t[(r, c)];
            aug[(r, p + c)] = exit[r] * pi[c];
        }
    }
    let big = matrix_exponential(&aug, y, tol)?;
    let mut exp_ty = SquareMatrix::zeros(p)?;
    let mut integral = SquareMatrix::zeros(p)?;
    for r in 0..p {
        for c in 0..p {
            exp_ty[(r, c)] = big[(r, c)];
            integral[(r, c)] = big[(r, p + c)];
        }
    }
    Ok((exp_ty, integral))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> SquareMatrix {
        SquareMatrix::from_rows(&[vec![v]]).unwrap()
    }

    #[test]
    fn scalar_exponential() {
        let t = scalar(-0.1);
        let e = matrix_exponential(&t, 10.0, 1e-13).unwrap();
        assert!((e[(0, 0)] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_time_is_identity() {
        let t = SquareMatrix::from_rows(&[vec![-2.0, 1.0], vec![0.5, -3.0]]).unwrap();
        let e = matrix_exponential(&t, 0.0, 1e-12).unwrap();
        assert_eq!(e, SquareMatrix::identity(2).unwrap());
    }

    #[test]
    fn triangular_two_state_matches_eigendecomposition() {
        // T = [[-2, 1], [0, -3]] has eigenvalues -2, -3 with eigenvectors
        // (1, 0) and (1, -1); exp(Ty) follows in closed form.
        let t = SquareMatrix::from_rows(&[vec![-2.0, 1.0], vec![0.0, -3.0]]).unwrap();
        let y = 0.5f64;
        let (a, b) = ((-2.0 * y).exp(), (-3.0 * y).exp());
        let expected =
            SquareMatrix::from_rows(&[vec![a, a - b], vec![0.0, b]]).unwrap();
        let e = matrix_exponential(&t, y, 1e-13).unwrap();
        assert!(e.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn sub_stochastic_output() {
        let t = SquareMatrix::from_rows(&[
            vec![-4.0, 1.5, 2.0],
            vec![0.3, -2.0, 0.2],
            vec![1.0, 0.5, -3.0],
        ])
        .unwrap();
        for &y in &[0.01, 0.7, 3.0, 40.0] {
            let e = matrix_exponential(&t, y, 1e-12).unwrap();
            for r in 0..3 {
                let sum: f64 = e.row(r).iter().sum();
                assert!(sum <= 1.0 + 1e-10, "row sum {sum} at y={y}");
                assert!(e.row(r).iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn semigroup_property() {
        let t = SquareMatrix::from_rows(&[
            vec![-1.0, 0.4, 0.1],
            vec![0.2, -2.5, 1.3],
            vec![0.0, 0.9, -1.7],
        ])
        .unwrap();
        let tol = 1e-12;
        let (y1, y2) = (0.8, 2.3);
        let lhs = matrix_exponential(&t, y1 + y2, tol).unwrap();
        let rhs =
            matrix_exponential(&t, y1, tol).unwrap().matmul(&matrix_exponential(&t, y2, tol).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 10.0 * tol);
    }

    #[test]
    fn van_loan_scalar_closed_form() {
        // p = 1, T = (-a), pi = (1): the integral is a y e^{-a y}.
        let t = scalar(-1.0);
        let (e, j) = van_loan_integral(&t, &[1.0], &[1.0], 2.0, 1e-13).unwrap();
        assert!((e[(0, 0)] - (-2.0f64).exp()).abs() < 1e-12);
        assert!((j[(0, 0)] - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn van_loan_zero_time() {
        let t = SquareMatrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, -2.0]]).unwrap();
        let (e, j) = van_loan_integral(&t, &[0.0, 2.0], &[1.0, 0.0], 0.0, 1e-12).unwrap();
        assert_eq!(e, SquareMatrix::identity(2).unwrap());
        assert!(j.max_abs() == 0.0);
    }

    #[test]
    fn van_loan_blocks_carry_the_plain_exponential() {
        let t = SquareMatrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, -2.0]]).unwrap();
        let exit = vec![0.0, 2.0];
        let pi = vec![0.6, 0.4];
        let y = 1.3;
        let (e, _) = van_loan_integral(&t, &exit, &pi, y, 1e-13).unwrap();
        let direct = matrix_exponential(&t, y, 1e-13).unwrap();
        assert!(e.max_abs_diff(&direct) < 1e-11);
    }

    #[test]
    fn rejects_bad_exit_vector() {
        let t = SquareMatrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, -2.0]]).unwrap();
        let err = van_loan_integral(&t, &[1.0, 2.0], &[1.0, 0.0], 1.0, 1e-12);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_non_finite_entries() {
        let t = SquareMatrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(matches!(matrix_exponential(&t, 1.0, 1e-12), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn plan_invariants() {
        let t = SquareMatrix::from_rows(&[vec![-3.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let plan = UniformizationPlan::build(&t, 7.0, 1e-12).unwrap();
        assert!(plan.rate == 3.0);
        // halved mean below (or at) one
        assert!(plan.rate * 7.0 / (1u64 << plan.squaring_depth) as f64 <= 1.0 + 1e-12);
        for r in 0..2 {
            let sum: f64 = plan.transition.row(r).iter().sum();
            assert!((0.0..=1.0 + 1e-12).contains(&sum));
            assert!(plan.transition.row(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn lu_solve_roundtrip() {
        let a = SquareMatrix::from_rows(&[
            vec![4.0, -2.0, 1.0],
            vec![1.0, 3.0, -1.0],
            vec![2.0, 0.5, 5.0],
        ])
        .unwrap();
        let x = vec![1.5, -0.25, 2.0];
        let b = a.matvec(&x);
        let solved = a.solve(&b).unwrap();
        for (u, v) in solved.iter().zip(&x) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
