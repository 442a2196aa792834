//! Dense float64 matrices and the small eigensolver kit.
//!
//! Everything here is row-major `Vec<f64>` storage. The matmul kernels are
//! dispatched at runtime to an AVX2+FMA variant when the CPU supports it;
//! both variants run the same scalar code, so results are bit-identical
//! across the dispatch boundary on a given machine.

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Mat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat[{}x{}]", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Mat::from_vec(v.len(), 1, v.to_vec())
    }

    /// 1 x n row vector from a slice.
    pub fn row_vec(v: &[f64]) -> Self {
        Mat::from_vec(1, v.len(), v.to_vec())
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

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    /// C = self * other.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut c = Mat::zeros(self.rows, other.cols);
        matmul_nn(
            &self.data,
            &other.data,
            &mut c.data,
            self.rows,
            self.cols,
            other.cols,
        );
        c
    }

    /// C = self * other^T.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let mut c = Mat::zeros(self.rows, other.rows);
        matmul_nt(
            &self.data,
            &other.data,
            &mut c.data,
            self.rows,
            self.cols,
            other.rows,
        );
        c
    }

    /// C = self^T * other.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let mut c = Mat::zeros(self.cols, other.cols);
        matmul_tn(
            &self.data,
            &other.data,
            &mut c.data,
            self.rows,
            self.cols,
            other.cols,
        );
        c
    }

    /// self += alpha * other (elementwise, same shape).
    pub fn add_scaled(&mut self, other: &Mat, alpha: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Relative Frobenius distance, guarded against a zero reference.
pub fn rel_frob_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut num = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        num += (x - y) * (x - y);
    }
    num.sqrt() / b.frob_norm().max(1e-300)
}

// ---------------------------------------------------------------------------
// matmul kernels
// ---------------------------------------------------------------------------

macro_rules! dispatch_kernel {
    ($inner:ident, $avx:ident, $name:ident) => {
        fn $name(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2")
                    && std::arch::is_x86_feature_detected!("fma")
                {
                    // SAFETY: feature presence checked above; the kernel body
                    // is plain safe Rust compiled with the features enabled.
                    unsafe {
                        $avx(a, b, c, n, k, m);
                    }
                    return;
                }
            }
            $inner(a, b, c, n, k, m);
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2", enable = "fma")]
        unsafe fn $avx(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
            $inner(a, b, c, n, k, m);
        }
    };
}

/// C(n x m) = A(n x k) * B(k x m); c must be zeroed.
///
/// Four A rows per pass so each B row load feeds four FMA chains.
#[inline(always)]
fn kernel_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let n4 = n / 4 * 4;
    let mut i = 0;
    while i < n4 {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let (head, tail) = c[i * m..].split_at_mut(m);
        let (c0, tail) = (head, tail);
        let (c1, tail) = tail.split_at_mut(m);
        let (c2, tail) = tail.split_at_mut(m);
        let c3 = &mut tail[..m];
        for kk in 0..k {
            let b_row = &b[kk * m..(kk + 1) * m];
            let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..m {
                let bv = b_row[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    for i in n4..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * m..(i + 1) * m];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// C(n x m) = A(n x k) * B(m x k)^T; c must be zeroed.
#[inline(always)]
fn kernel_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let chunks = k / 4;
    let m4 = m / 4 * 4;
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * m..(i + 1) * m];
        // four B rows at a time: reuses each a_row load and keeps four
        // independent accumulator chains per output
        let mut j = 0;
        while j < m4 {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let mut acc = [[0.0f64; 4]; 4];
            for t in 0..chunks {
                let at = &a_row[t * 4..t * 4 + 4];
                let (s0, s1, s2, s3) = (
                    &b0[t * 4..t * 4 + 4],
                    &b1[t * 4..t * 4 + 4],
                    &b2[t * 4..t * 4 + 4],
                    &b3[t * 4..t * 4 + 4],
                );
                for u in 0..4 {
                    acc[0][u] += at[u] * s0[u];
                    acc[1][u] += at[u] * s1[u];
                    acc[2][u] += at[u] * s2[u];
                    acc[3][u] += at[u] * s3[u];
                }
            }
            for (c_off, accr) in acc.iter().enumerate() {
                let mut s = (accr[0] + accr[1]) + (accr[2] + accr[3]);
                let brow = &b[(j + c_off) * k..(j + c_off + 1) * k];
                for t in chunks * 4..k {
                    s += a_row[t] * brow[t];
                }
                c_row[j + c_off] += s;
            }
            j += 4;
        }
        for (j, cv) in c_row.iter_mut().enumerate().skip(m4) {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = [0.0f64; 4];
            for t in 0..chunks {
                let av = &a_row[t * 4..t * 4 + 4];
                let bv = &b_row[t * 4..t * 4 + 4];
                acc[0] += av[0] * bv[0];
                acc[1] += av[1] * bv[1];
                acc[2] += av[2] * bv[2];
                acc[3] += av[3] * bv[3];
            }
            let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for t in chunks * 4..k {
                s += a_row[t] * b_row[t];
            }
            *cv += s;
        }
    }
}

/// C(k x m) = A(n x k)^T * B(n x m); c must be zeroed.
///
/// Rank-1 updates, four input rows per pass.
#[inline(always)]
fn kernel_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let n4 = n / 4 * 4;
    let mut i = 0;
    while i < n4 {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let (b0, b1, b2, b3) = (
            &b[i * m..(i + 1) * m],
            &b[(i + 1) * m..(i + 2) * m],
            &b[(i + 2) * m..(i + 3) * m],
            &b[(i + 3) * m..(i + 4) * m],
        );
        for kk in 0..k {
            let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            let c_row = &mut c[kk * m..(kk + 1) * m];
            for j in 0..m {
                c_row[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
        i += 4;
    }
    for i in n4..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (kk, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * m..(kk + 1) * m];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

dispatch_kernel!(kernel_nn, kernel_nn_avx2, matmul_nn);
dispatch_kernel!(kernel_nt, kernel_nt_avx2, matmul_nt);
dispatch_kernel!(kernel_tn, kernel_tn_avx2, matmul_tn);

// ---------------------------------------------------------------------------
// Symmetric eigensolver: Householder tridiagonalization + implicit QL
// ---------------------------------------------------------------------------

/// Eigendecomposition of a real symmetric matrix.
///
/// Returns eigenvalues in ascending order and the matrix whose column j is
/// the eigenvector for eigenvalue j. Only the lower triangle of `a` is read.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen needs a square matrix");
    if n == 0 {
        return Ok((Vec::new(), Mat::zeros(0, 0)));
    }
    let mut v = a.clone();
    // symmetrize from the lower triangle
    for i in 0..n {
        for j in 0..i {
            let x = v.at(i, j);
            v.set(j, i, x);
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut d, &mut e, &mut v)?;
    sort_eigenpairs(&mut d, &mut v);
    Ok((d, v))
}

/// Eigendecomposition of a symmetric tridiagonal matrix given by its
/// diagonal and subdiagonal. Returns ascending eigenvalues and eigenvector
/// columns.
pub fn tridiagonal_eigen(diag: &[f64], offdiag: &[f64]) -> Result<(Vec<f64>, Mat)> {
    let n = diag.len();
    assert_eq!(offdiag.len() + 1, n.max(1), "offdiag must have length n-1");
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[1..].copy_from_slice(offdiag);
    let mut v = Mat::eye(n);
    tql2(&mut d, &mut e, &mut v)?;
    sort_eigenpairs(&mut d, &mut v);
    Ok((d, v))
}

fn sort_eigenpairs(d: &mut [f64], v: &mut Mat) {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let sorted_d: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut sorted_v = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            sorted_v.set(i, new_j, v.at(i, old_j));
        }
    }
    d.copy_from_slice(&sorted_d);
    *v = sorted_v;
}

/// Householder reduction to tridiagonal form (in-place on `v`, which turns
/// into the accumulated orthogonal transform).
fn tred2(v: &mut Mat, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v.at(n - 1, j);
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for item in d.iter_mut().take(i) {
                *item /= scale;
                h += *item * *item;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v.set(j, i, f);
                g = e[j] + v.at(j, j) * f;
                for k in j + 1..i {
                    g += v.at(k, j) * d[k];
                    e[k] += v.at(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let x = v.at(k, j) - (f * e[k] + g * d[k]);
                    v.set(k, j, x);
                }
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        let x = v.at(i, i);
        v.set(n - 1, i, x);
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v.at(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.at(k, i + 1) * v.at(k, j);
                }
                for k in 0..=i {
                    let x = v.at(k, j) - g * d[k];
                    v.set(k, j, x);
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for j in 0..n {
        d[j] = v.at(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicit QL iteration with shifts on a tridiagonal matrix, accumulating
/// rotations into `v`.
fn tql2(d: &mut [f64], e: &mut [f64], v: &mut Mat) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(Error::numeric(format!(
                        "tridiagonal QL failed to converge at eigenvalue {l} after {iter} iterations"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v.at(k, i + 1);
                        v.set(k, i + 1, s * v.at(k, i) + c * h);
                        v.set(k, i, c * v.at(k, i) - s * h);
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.at(i, k) * b.at(k, j);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn matmul_small_exact() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    proptest! {
        #[test]
        fn matmul_variants_agree(n in 1usize..8, k in 1usize..8, m in 1usize..8, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_fn(n, k, |_, _| rng.gen_range(-2.0..2.0));
            let b = Mat::from_fn(k, m, |_, _| rng.gen_range(-2.0..2.0));
            let c = a.matmul(&b);
            let c_ref = naive_matmul(&a, &b);
            prop_assert!(rel_frob_diff(&c, &c_ref) < 1e-12);

            let c_nt = a.matmul_nt(&b.transpose());
            prop_assert!(rel_frob_diff(&c_nt, &c_ref) < 1e-12);

            let c_tn = a.transpose().matmul_tn(&b);
            prop_assert!(rel_frob_diff(&c_tn, &c_ref) < 1e-12);
        }
    }

    #[test]
    fn eigen_diagonal() {
        let a = Mat::from_vec(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vals[2] - 3.0).abs() < 1e-12);
        // eigenvector for eigenvalue 1.0 is e_1
        assert!(vecs.at(1, 0).abs() > 0.99);
    }

    #[test]
    fn eigen_path_graph_laplacian() {
        // path graph on 2 nodes: eigenvalues {0, 2}
        let a = Mat::from_vec(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
        let (vals, _) = symmetric_eigen(&a).unwrap();
        assert!(vals[0].abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 24;
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let x = rng.gen_range(-1.0..1.0);
                a.set(i, j, x);
                a.set(j, i, x);
            }
        }
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        // A v_j = lambda_j v_j
        for j in 0..n {
            let v = Mat::col_vec(&vecs.column(j));
            let av = a.matmul(&v);
            let mut lv = v.clone();
            lv.scale(vals[j]);
            assert!(
                rel_frob_diff(&av, &lv) < 1e-9 || (av.frob_norm() < 1e-9 && vals[j].abs() < 1e-9),
                "residual too large for eigenpair {j}"
            );
        }
        // orthonormal columns
        let g = vecs.matmul_tn(&vecs);
        assert!(rel_frob_diff(&g, &Mat::eye(n)) < 1e-10);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let d = [2.0, 2.5, 3.0, 1.0];
        let e = [0.5, -0.3, 0.8];
        let mut dense = Mat::zeros(4, 4);
        for i in 0..4 {
            dense.set(i, i, d[i]);
        }
        for i in 0..3 {
            dense.set(i + 1, i, e[i]);
            dense.set(i, i + 1, e[i]);
        }
        let (v1, _) = tridiagonal_eigen(&d, &e).unwrap();
        let (v2, _) = symmetric_eigen(&dense).unwrap();
        for (a, b) in v1.iter().zip(&v2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
