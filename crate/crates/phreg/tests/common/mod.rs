//! Shared test oracles, independent of the library's evaluation paths:
//! eigendecomposition-based matrix exponentials for triangular and
//! symmetric sub-intensity matrices, adaptive Simpson quadrature, and
//! seeded random matrix generators.

#![allow(dead_code)]

use phreg::matexp::SquareMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// `exp(Ty)` for an upper-triangular `T` with well-separated diagonal
/// entries, via explicit eigenvectors from back-substitution.
pub fn triangular_expm(t: &SquareMatrix, y: f64) -> SquareMatrix {
    let p = t.dim();
    assert!(t.is_upper_triangular());
    // V has unit diagonal; column k solves (T - t_kk I) v = 0
    let mut v = SquareMatrix::identity(p).unwrap();
    for k in 0..p {
        for i in (0..k).rev() {
            let mut acc = 0.0;
            for j in i + 1..=k {
                acc += t[(i, j)] * v[(j, k)];
            }
            v[(i, k)] = acc / (t[(k, k)] - t[(i, i)]);
        }
    }
    // V^{-1} for unit upper-triangular V by forward substitution
    let mut vinv = SquareMatrix::identity(p).unwrap();
    for k in 0..p {
        for i in (0..k).rev() {
            let mut acc = 0.0;
            for j in i + 1..=k {
                acc += v[(i, j)] * vinv[(j, k)];
            }
            vinv[(i, k)] = -acc;
        }
    }
    let mut out = SquareMatrix::zeros(p).unwrap();
    for r in 0..p {
        for c in 0..p {
            let mut acc = 0.0;
            for k in 0..p {
                acc += v[(r, k)] * (t[(k, k)] * y).exp() * vinv[(k, c)];
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Jacobi eigendecomposition of a symmetric matrix: returns the
/// eigenvalues and the orthogonal matrix of column eigenvectors.
pub fn jacobi_eigen(a: &SquareMatrix) -> (Vec<f64>, SquareMatrix) {
    let p = a.dim();
    let mut m = a.clone();
    let mut v = SquareMatrix::identity(p).unwrap();
    for _ in 0..200 {
        // largest off-diagonal element
        let (mut best, mut bi, mut bj) = (0.0f64, 0, 1);
        for i in 0..p {
            for j in i + 1..p {
                if m[(i, j)].abs() > best {
                    best = m[(i, j)].abs();
                    bi = i;
                    bj = j;
                }
            }
        }
        if best < 1e-14 {
            break;
        }
        let (i, j) = (bi, bj);
        let theta = 0.5 * (m[(j, j)] - m[(i, i)]) / m[(i, j)];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..p {
            let (mik, mjk) = (m[(i, k)], m[(j, k)]);
            m[(i, k)] = c * mik - s * mjk;
            m[(j, k)] = s * mik + c * mjk;
        }
        for k in 0..p {
            let (mki, mkj) = (m[(k, i)], m[(k, j)]);
            m[(k, i)] = c * mki - s * mkj;
            m[(k, j)] = s * mki + c * mkj;
            let (vki, vkj) = (v[(k, i)], v[(k, j)]);
            v[(k, i)] = c * vki - s * vkj;
            v[(k, j)] = s * vki + c * vkj;
        }
    }
    let evals = (0..p).map(|k| m[(k, k)]).collect();
    (evals, v)
}

/// `exp(Ay)` for symmetric `A` through the Jacobi eigendecomposition.
pub fn symmetric_expm(a: &SquareMatrix, y: f64) -> SquareMatrix {
    let p = a.dim();
    let (evals, v) = jacobi_eigen(a);
    let mut out = SquareMatrix::zeros(p).unwrap();
    for r in 0..p {
        for c in 0..p {
            let mut acc = 0.0;
            for k in 0..p {
                acc += v[(r, k)] * (evals[k] * y).exp() * v[(c, k)];
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Random upper-triangular sub-intensity matrix with diagonal entries
/// separated by at least `gap`, so the eigen oracle stays well-conditioned.
pub fn random_triangular_sub_intensity(rng: &mut ChaCha12Rng, p: usize, gap: f64) -> SquareMatrix {
    let mut diag: Vec<f64>;
    loop {
        diag = (0..p).map(|_| -rng.gen_range(0.2..3.0)).collect();
        let mut sorted = diag.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        if sorted.windows(2).all(|w| (w[1] - w[0]).abs() > gap) {
            break;
        }
    }
    let mut t = SquareMatrix::zeros(p).unwrap();
    for k in 0..p {
        t[(k, k)] = diag[k];
        if k + 1 < p {
            // spread part of the total rate over upper entries, keep an exit
            let budget = -diag[k] * rng.gen_range(0.1..0.9);
            let mut shares: Vec<f64> = (k + 1..p).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = shares.iter().sum::<f64>().max(1e-12);
            for (idx, c) in (k + 1..p).enumerate() {
                shares[idx] *= budget / total;
                t[(k, c)] = shares[idx];
            }
        }
    }
    t
}

/// Random symmetric sub-intensity matrix (diagonalizable with real
/// spectrum): nonnegative symmetric off-diagonal plus a positive exit.
pub fn random_symmetric_sub_intensity(rng: &mut ChaCha12Rng, p: usize) -> SquareMatrix {
    let mut t = SquareMatrix::zeros(p).unwrap();
    for i in 0..p {
        for j in i + 1..p {
            let v = rng.gen_range(0.0..0.6);
            t[(i, j)] = v;
            t[(j, i)] = v;
        }
    }
    for i in 0..p {
        let off: f64 = (0..p).filter(|j| *j != i).map(|j| t[(i, j)]).sum();
        t[(i, i)] = -(off + rng.gen_range(0.05..1.5));
    }
    t
}

/// Adaptive Simpson quadrature, deliberately different from the library's
/// Gauss-Kronrod integrator.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse<F: FnMut(f64) -> f64>(
        f: &mut F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 40)
}

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
