//! Dense row-major matrices and the SVD / norm primitives used by every
//! other module.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slower than a
//! bidiagonalization-based solver but gives orthonormal factors to working
//! precision even for tiny singular values, which keeps the merge and
//! adaptation invariants simple to state.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Square diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds an `rows x columns.len()` matrix whose j-th column is `columns[j]`.
    pub fn from_columns(rows: usize, columns: &[&[f64]]) -> Result<Self> {
        let mut m = Self::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "column {j} has length {}, expected {rows}",
                    col.len()
                )));
            }
            m.set_col(j, col);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &x) in values.iter().enumerate() {
            self.data[r * self.cols + c] = x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply transpose of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    norm2(a.as_slice())
}

/// Thin SVD `A = U diag(s) V^T` truncated to its effective rank.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    /// `m x r`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `n x r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v)
            .expect("factor shapes are consistent by construction")
    }

    /// Columns `(u_j, s_j, v_j)` in order.
    pub fn triplets(&self) -> Vec<(Vec<f64>, f64, Vec<f64>)> {
        (0..self.rank())
            .map(|j| (self.u.col(j), self.s[j], self.v.col(j)))
            .collect()
    }
}

/// One rank-one term `u * sigma * v^T`.
#[derive(Clone, Copy, Debug)]
pub struct RankOne<'a> {
    pub u: &'a [f64],
    pub sigma: f64,
    pub v: &'a [f64],
}

impl<'a> RankOne<'a> {
    pub fn new(u: &'a [f64], sigma: f64, v: &'a [f64]) -> Self {
        Self { u, sigma, v }
    }
}

/// `sum_k u_k sigma_k v_k^T` as a `rows x cols` matrix.
pub fn rank_one_sum(rows: usize, cols: usize, components: &[RankOne<'_>]) -> Result<Matrix> {
    let mut out = Matrix::zeros(rows, cols);
    for (k, comp) in components.iter().enumerate() {
        let (u, v) = (comp.u, comp.v);
        if u.len() != rows || v.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "component {k} is {}x{}, expected {rows}x{cols}",
                u.len(),
                v.len()
            )));
        }
        let sigma = comp.sigma;
        for (r, &ur) in u.iter().enumerate() {
            let coeff = ur * sigma;
            if coeff == 0.0 {
                continue;
            }
            for (o, &vc) in out.row_mut(r).iter_mut().zip(v) {
                *o += coeff * vc;
            }
        }
    }
    Ok(out)
}

const MAX_SWEEPS: usize = 100;

/// Thin SVD by one-sided Jacobi rotations.
///
/// Keeps the singular values strictly greater than `rank_tol * s_max`
/// (with `rank_tol = 0` every nonzero value is kept). Each `(u_j, v_j)` pair
/// is signed so the largest-magnitude entry of `u_j` is positive.
pub fn svd(a: &Matrix, rank_tol: f64) -> Result<SvdFactors> {
    if !(rank_tol.is_finite() && rank_tol >= 0.0) {
        return Err(Error::InvalidInput(format!("rank_tol must be >= 0, got {rank_tol}")));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("svd of a non-finite matrix".into()));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(SvdFactors {
            u: Matrix::zeros(m, 0),
            s: Vec::new(),
            v: Matrix::zeros(n, 0),
        });
    }

    // Work on the tall orientation so the accumulated rotation is the small side.
    let transposed = m < n;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (tall, wide) = work.shape();

    let mut cols: Vec<Vec<f64>> = (0..wide).map(|j| work.col(j)).collect();
    let mut rot: Vec<Vec<f64>> = (0..wide)
        .map(|j| {
            let mut e = vec![0.0; wide];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * (tall as f64).max(4.0);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..wide {
            for q in p + 1..wide {
                let (alpha, beta, gamma) = gram(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut rot, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..wide).collect();
    // Stable: equal singular values keep their column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s_max = norms[order[0]];
    let keep: Vec<usize> = if s_max > 0.0 {
        order
            .into_iter()
            .filter(|&j| norms[j] > 0.0 && norms[j] > rank_tol * s_max)
            .collect()
    } else {
        Vec::new()
    };

    let r = keep.len();
    let mut left = Matrix::zeros(tall, r);
    let mut right = Matrix::zeros(wide, r);
    let mut s = Vec::with_capacity(r);
    for (k, &j) in keep.iter().enumerate() {
        let sigma = norms[j];
        let u: Vec<f64> = cols[j].iter().map(|x| x / sigma).collect();
        left.set_col(k, &u);
        right.set_col(k, &rot[j]);
        s.push(sigma);
    }

    let (mut u, mut v) = if transposed { (right, left) } else { (left, right) };
    canonicalize_signs(&mut u, &mut v);
    Ok(SvdFactors { u, s, v })
}

fn gram(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    (aa, bb, ab)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn canonicalize_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for r in 0..u.rows() {
            let x = u[(r, j)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for r in 0..u.rows() {
                u[(r, j)] = -u[(r, j)];
            }
            for r in 0..v.rows() {
                v[(r, j)] = -v[(r, j)];
            }
        }
    }
}
