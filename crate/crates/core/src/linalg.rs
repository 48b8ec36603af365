//! Fixed-capacity vectors and matrices for the inner loops.
//!
//! Dimensions never exceed four, so the integrator and spray code work on
//! stack arrays with an explicit active size `n` instead of heap matrices.

use nalgebra::DMatrix;

pub type Vec4 = [f64; 4];
pub type Mat4 = [[f64; 4]; 4];

pub const ZERO4: Vec4 = [0.0; 4];
pub const ZERO44: Mat4 = [[0.0; 4]; 4];

pub fn to4(v: &[f64]) -> Vec4 {
    let mut out = ZERO4;
    out[..v.len()].copy_from_slice(v);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn identity(n: usize) -> Mat4 {
    let mut m = ZERO44;
    for (i, row) in m.iter_mut().enumerate().take(n) {
        row[i] = 1.0;
    }
    m
}

pub fn mat_vec(m: &Mat4, v: &[f64], n: usize) -> Vec4 {
    let mut out = ZERO4;
    for i in 0..n {
        out[i] = (0..n).map(|k| m[i][k] * v[k]).sum();
    }
    out
}

pub fn mat_t_vec(m: &Mat4, v: &[f64], n: usize) -> Vec4 {
    let mut out = ZERO4;
    for i in 0..n {
        out[i] = (0..n).map(|k| m[k][i] * v[k]).sum();
    }
    out
}

pub fn mat_mul(a: &Mat4, b: &Mat4, n: usize) -> Mat4 {
    let mut out = ZERO44;
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (0..n).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat4) -> Mat4 {
    let mut out = ZERO44;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

/// LU factorisation with partial pivoting; `None` when a pivot vanishes.
pub struct Lu {
    lu: Mat4,
    perm: [usize; 4],
    n: usize,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Mat4, n: usize) -> Option<Lu> {
        let mut lu = *a;
        let mut perm = [0, 1, 2, 3];
        let mut sign = 1.0;
        let scale = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max(a[i][j].abs()));
        if scale == 0.0 || !scale.is_finite() {
            return None;
        }
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| lu[i][k].abs().total_cmp(&lu[j][k].abs())).unwrap();
            if lu[p][k].abs() <= 1e-14 * scale {
                return None;
            }
            if p != k {
                lu.swap(p, k);
                perm.swap(p, k);
                sign = -sign;
            }
            for i in k + 1..n {
                let f = lu[i][k] / lu[k][k];
                lu[i][k] = f;
                for j in k + 1..n {
                    lu[i][j] -= f * lu[k][j];
                }
            }
        }
        Some(Lu { lu, perm, n, sign })
    }

    pub fn solve(&self, b: &[f64]) -> Vec4 {
        let n = self.n;
        let mut x = ZERO4;
        for i in 0..n {
            x[i] = b[self.perm[i]] - (0..i).map(|k| self.lu[i][k] * x[k]).sum::<f64>();
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.lu[i][k] * x[k]).sum();
            x[i] = (x[i] - s) / self.lu[i][i];
        }
        x
    }

    pub fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[i][i])
    }

    pub fn inverse(&self) -> Mat4 {
        let mut inv = ZERO44;
        for j in 0..self.n {
            let mut e = ZERO4;
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..self.n {
                inv[i][j] = col[i];
            }
        }
        inv
    }
}

/// Determinant by Gaussian elimination; exact zero for singular input.
pub fn det(a: &Mat4, n: usize) -> f64 {
    let mut m = *a;
    let mut d = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        if m[p][k] == 0.0 {
            return 0.0;
        }
        if p != k {
            m.swap(p, k);
            d = -d;
        }
        d *= m[k][k];
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k + 1..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    d
}

/// True when the symmetric matrix admits a Cholesky factorisation.
pub fn is_positive_definite(a: &Mat4, n: usize) -> bool {
    let mut l = ZERO44;
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}

pub fn to_dmatrix(a: &Mat4, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| a[i][j])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Mat4 {
    let mut out = ZERO44;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
