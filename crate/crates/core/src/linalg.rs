//! Small dense linear algebra: LU solves, cyclic Jacobi symmetric eigen,
//! one-sided Jacobi SVD, and inner-product-parameterized Gram-Schmidt.
//!
//! Matrices here stay tiny (a few dozen rows at most), so O(n^3) Jacobi
//! methods are both fast enough and more accurate than the tolerances any
//! caller asks for.

use std::ops::{Index, IndexMut};

use crate::error::{CoreError, CoreResult};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_cols(cols: &[Vec<T>]) -> Self {
        let rows = cols.first().map_or(0, Vec::len);
        Self::from_fn(rows, cols.len(), |r, c| cols[c][r])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == T::zero() {
                    continue;
                }
                for c in 0..other.cols {
                    out[(r, c)] = out[(r, c)] + a * other[(k, c)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)] * x[c]).sum())
            .collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] + other[(r, c)])
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] - other[(r, c)])
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * s)
    }

    /// (A + A^T) / 2, the cheap guard against drift in symmetric pipelines.
    pub fn symmetrize(&self) -> Self {
        assert_eq!(self.rows, self.cols);
        Self::from_fn(self.rows, self.cols, |r, c| {
            (self[(r, c)] + self[(c, r)]) * T::half()
        })
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/* ---- elementary vector helpers (Euclidean) ---- */

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// y += s * x
pub fn axpy<T: Scalar>(y: &mut [T], s: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + s * xi;
    }
}

pub fn scale_vec<T: Scalar>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|&x| x * s).collect()
}

pub fn sub_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn add_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/* ---- LU with partial pivoting ---- */

/// Solves A X = B for X; A square, consumed by copy.
pub fn lu_solve<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> CoreResult<Mat<T>> {
    assert_eq!(a.rows(), a.cols(), "LU needs a square matrix");
    assert_eq!(a.rows(), b.rows());
    let n = a.rows();
    let mut lu = a.clone();
    let mut x = b.clone();
    let tiny = T::epsilon() * T::lit(16.0) * a.max_abs().max(T::one());

    for k in 0..n {
        let mut piv = k;
        let mut best = lu[(k, k)].abs();
        for r in k + 1..n {
            let v = lu[(r, k)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= tiny {
            return Err(CoreError::Numerical(format!(
                "singular pivot {best} at column {k} of {n}"
            )));
        }
        if piv != k {
            for c in 0..n {
                lu.data.swap(k * n + c, piv * n + c);
            }
            for c in 0..x.cols() {
                let (kc, pc) = (k * x.cols() + c, piv * x.cols() + c);
                x.data.swap(kc, pc);
            }
        }
        for r in k + 1..n {
            let f = lu[(r, k)] / lu[(k, k)];
            lu[(r, k)] = f;
            for c in k + 1..n {
                lu[(r, c)] = lu[(r, c)] - f * lu[(k, c)];
            }
            for c in 0..x.cols() {
                x[(r, c)] = x[(r, c)] - f * x[(k, c)];
            }
        }
    }
    for c in 0..x.cols() {
        for k in (0..n).rev() {
            let mut s = x[(k, c)];
            for j in k + 1..n {
                s = s - lu[(k, j)] * x[(j, c)];
            }
            x[(k, c)] = s / lu[(k, k)];
        }
    }
    Ok(x)
}

/* ---- cyclic Jacobi for symmetric matrices ---- */

/// Eigenvalues (ascending) and matching eigenvector columns of a symmetric matrix.
pub fn sym_eigen<T: Scalar>(a: &Mat<T>) -> CoreResult<(Vec<T>, Mat<T>)> {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    if n == 0 {
        return Ok((Vec::new(), Mat::zeros(0, 0)));
    }
    let mut m = a.symmetrize();
    let mut v = Mat::identity(n);
    let stop = T::epsilon() * m.frobenius().max(T::epsilon());

    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off = off + m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= stop {
            let mut pairs: Vec<(T, usize)> =
                (0..n).map(|i| (m[(i, i)], i)).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
            let vals = pairs.iter().map(|&(x, _)| x).collect();
            let vecs = Mat::from_fn(n, n, |r, c| v[(r, pairs[c].1)]);
            return Ok((vals, vecs));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= stop * T::lit(1e-3) {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::two() * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(CoreError::Numerical("Jacobi eigen did not converge".into()))
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn sym_operator_norm<T: Scalar>(a: &Mat<T>) -> CoreResult<T> {
    let (vals, _) = sym_eigen(a)?;
    Ok(vals.iter().fold(T::zero(), |m, &x| m.max(x.abs())))
}

/// Smallest eigenvalue of a symmetric matrix (PSD check: >= -tol).
pub fn sym_min_eigenvalue<T: Scalar>(a: &Mat<T>) -> CoreResult<T> {
    let (vals, _) = sym_eigen(a)?;
    vals.first()
        .copied()
        .ok_or_else(|| CoreError::Numerical("empty matrix".into()))
}

/* ---- one-sided Jacobi SVD (rows >= cols) ---- */

#[derive(Debug, Clone)]
pub struct Svd<T> {
    /// Left singular columns (rows x cols); zero columns where sigma = 0.
    pub u: Mat<T>,
    /// Singular values, descending.
    pub sigma: Vec<T>,
    /// Right singular columns (cols x cols), complete orthonormal basis.
    pub v: Mat<T>,
}

/// SVD of a tall (rows >= cols) matrix by one-sided Jacobi column rotations.
pub fn svd<T: Scalar>(a: &Mat<T>) -> CoreResult<Svd<T>> {
    assert!(
        a.rows() >= a.cols(),
        "one-sided Jacobi SVD expects rows >= cols"
    );
    let (m, n) = (a.rows(), a.cols());
    let mut u = a.clone();
    let mut v = Mat::identity(n);
    let eps = T::epsilon() * T::lit(n.max(2) as f64);

    let mut converged = n < 2;
    for _sweep in 0..60 {
        if converged {
            break;
        }
        converged = true;
        for p in 0..n {
            for q in p + 1..n {
                let mut alpha = T::zero();
                let mut beta = T::zero();
                let mut gamma = T::zero();
                for r in 0..m {
                    let up = u[(r, p)];
                    let uq = u[(r, q)];
                    alpha = alpha + up * up;
                    beta = beta + uq * uq;
                    gamma = gamma + up * uq;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (T::two() * gamma);
                let t = {
                    let s = if zeta >= T::zero() { T::one() } else { -T::one() };
                    s / (zeta.abs() + (T::one() + zeta * zeta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let up = u[(r, p)];
                    let uq = u[(r, q)];
                    u[(r, p)] = c * up - s * uq;
                    u[(r, q)] = s * up + c * uq;
                }
                for r in 0..n {
                    let vp = v[(r, p)];
                    let vq = v[(r, q)];
                    v[(r, p)] = c * vp - s * vq;
                    v[(r, q)] = s * vp + c * vq;
                }
            }
        }
    }
    if !converged {
        return Err(CoreError::Numerical("Jacobi SVD did not converge".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = (0..n).map(|c| norm(&u.col(c))).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma: Vec<T> = order.iter().map(|&c| norms[c]).collect();
    let v_sorted = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    let u_sorted = Mat::from_fn(m, n, |r, c| {
        let s = norms[order[c]];
        if s > T::zero() {
            u[(r, order[c])] / s
        } else {
            T::zero()
        }
    });
    Ok(Svd { u: u_sorted, sigma, v: v_sorted })
}

/* ---- Gram-Schmidt over an arbitrary inner product ---- */

/// Orthonormalizes `candidates` against `seed` (assumed already orthonormal)
/// and each other under `inner`, dropping remainders with norm below `tol`.
pub fn gram_schmidt<T: Scalar>(
    seed: &[Vec<T>],
    candidates: &[Vec<T>],
    inner: &dyn Fn(&[T], &[T]) -> T,
    tol: T,
) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = seed.to_vec();
    let mut out = Vec::new();
    for cand in candidates {
        let mut w = cand.clone();
        // two rounds of classical GS for numerical hygiene
        for _ in 0..2 {
            for b in &basis {
                let c = inner(&w, b);
                axpy(&mut w, -c, b);
            }
        }
        let nw = inner(&w, &w).sqrt();
        if nw > tol {
            let w: Vec<T> = w.iter().map(|&x| x / nw).collect();
            basis.push(w.clone());
            out.push(w);
        }
    }
    out
}

/// Principal angles (radians, ascending) between the spans of two orthonormal
/// bases under `inner`. Bases must have equal cardinality.
pub fn principal_angles<T: Scalar>(
    a: &[Vec<T>],
    b: &[Vec<T>],
    inner: &dyn Fn(&[T], &[T]) -> T,
) -> CoreResult<Vec<T>> {
    assert_eq!(a.len(), b.len(), "bases must have equal dimension");
    let k = a.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let c = Mat::from_fn(k, k, |r, col| inner(&a[r], &b[col]));
    let s = svd(&c)?;
    // descending cosines -> ascending angles
    Ok(s.sigma
        .iter()
        .map(|&x| x.min(T::one()).max(-T::one()).acos())
        .collect())
}
