//! Small dense linear algebra: row-major matrices, Householder QR least
//! squares, inversion, condition estimates, and a symmetric eigensolver.
//!
//! The systems solved here are tiny (tens of columns), so everything is
//! written for determinism and clarity rather than raw speed.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// `self' * self` (Gram matrix), symmetric by construction.
    pub fn gram(&self) -> Mat {
        let mut g = Mat::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..self.cols {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..self.cols {
                    g.data[a * self.cols + b] += ra * r[b];
                }
            }
        }
        for a in 0..self.cols {
            for b in 0..a {
                g.data[a * self.cols + b] = g.data[b * self.cols + a];
            }
        }
        g
    }

    /// Maximum absolute column sum (operator 1-norm).
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s = x.mul_add(*y, s);
    }
    s
}

/// Householder QR factorization. `r` is upper triangular (cols x cols);
/// `qty` holds `Q' y` for each provided right-hand side.
struct QrFactor {
    r: Mat,
    qty: Vec<Vec<f64>>,
}

fn householder_qr(a: &Mat, rhs: &[&[f64]]) -> QrFactor {
    let m = a.rows;
    let n = a.cols;
    let mut work = a.clone();
    let mut ys: Vec<Vec<f64>> = rhs.iter().map(|y| y.to_vec()).collect();

    for k in 0..n.min(m) {
        // build the Householder vector for column k
        let mut norm = 0.0;
        for i in k..m {
            let v = work.at(i, k);
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let akk = work.at(k, k);
        let alpha = if akk >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| work.at(i, k)).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }

        // apply the reflector to the remaining columns and right-hand sides
        for j in k..n {
            let mut proj = 0.0;
            for (off, vi) in v.iter().enumerate() {
                proj += vi * work.at(k + off, j);
            }
            let scale = 2.0 * proj / vnorm2;
            for (off, vi) in v.iter().enumerate() {
                let cur = work.at(k + off, j);
                work.set(k + off, j, cur - scale * vi);
            }
        }
        for y in ys.iter_mut() {
            let mut proj = 0.0;
            for (off, vi) in v.iter().enumerate() {
                proj += vi * y[k + off];
            }
            let scale = 2.0 * proj / vnorm2;
            for (off, vi) in v.iter().enumerate() {
                y[k + off] -= scale * vi;
            }
        }
    }

    let mut r = Mat::zeros(n, n);
    for i in 0..n.min(m) {
        for j in i..n {
            r.set(i, j, work.at(i, j));
        }
    }
    QrFactor { r, qty: ys }
}

fn back_substitute(r: &Mat, qty: &[f64], rank_tol: f64) -> Result<Vec<f64>> {
    let n = r.cols;
    let rmax = (0..n).map(|i| r.at(i, i).abs()).fold(0.0, f64::max);
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let pivot = r.at(i, i);
        if pivot.abs() <= rank_tol * rmax.max(1e-300) {
            return Err(Error::Conditioning {
                context: format!("rank-deficient column {i}"),
                cond: f64::INFINITY,
            });
        }
        let mut s = qty[i];
        for j in (i + 1)..n {
            s -= r.at(i, j) * x[j];
        }
        x[i] = s / pivot;
    }
    Ok(x)
}

/// Least squares `min ||a x - y||` via Householder QR.
///
/// Rank deficiency (relative pivot below 1e-12) raises a conditioning error.
pub fn lstsq(a: &Mat, y: &[f64]) -> Result<Vec<f64>> {
    if a.rows != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows but response has {}",
            a.rows,
            y.len()
        )));
    }
    if a.rows < a.cols {
        return Err(Error::Dimension(format!(
            "underdetermined system: {} rows < {} columns",
            a.rows, a.cols
        )));
    }
    let f = householder_qr(a, &[y]);
    back_substitute(&f.r, &f.qty[0], 1e-12)
}

/// Solve the square system `a x = y` via QR.
pub fn solve(a: &Mat, y: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.rows, a.cols, "solve expects a square matrix");
    lstsq(a, y)
}

/// Inverse of a square matrix via QR against the identity columns.
pub fn inverse(a: &Mat) -> Result<Mat> {
    assert_eq!(a.rows, a.cols, "inverse expects a square matrix");
    let n = a.rows;
    let eye = Mat::identity(n);
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| eye.at(i, j)).collect())
        .collect();
    let col_refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let f = householder_qr(a, &col_refs);
    let mut inv = Mat::zeros(n, n);
    for (j, qty) in f.qty.iter().enumerate() {
        let x = back_substitute(&f.r, qty, 1e-14)?;
        for i in 0..n {
            inv.set(i, j, x[i]);
        }
    }
    Ok(inv)
}

/// 1-norm condition estimate `||a||_1 ||a^-1||_1`. Returns +inf when the
/// matrix is numerically singular.
pub fn condition_number(a: &Mat) -> f64 {
    match inverse(a) {
        Ok(inv) => a.norm_one() * inv.norm_one(),
        Err(_) => f64::INFINITY,
    }
}

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.norm_one()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}
