//! Generalized eigendecomposition of the Laplacian, heat diffusion, and
//! heat kernel signatures.
//!
//! The generalized problem L phi = lambda W phi is reduced to standard form
//! S = W^{-1/2} L W^{-1/2} (W is diagonal). Small problems go through the
//! dense solver; larger ones use a thick-restart Krylov iteration with full
//! reorthogonalization, which keeps the smallest Ritz pairs across restarts.

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Mat};
use crate::mesh::OperatorSet;
use crate::sparse::CsrMatrix;

/// Eigenpairs of the generalized problem, W-orthonormal.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    /// N x k, column j is the eigenvector for eigenvalue j.
    eigenvectors: Mat,
    /// Mass diagonal of the mesh the basis was computed on.
    mass: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(eigenvalues: Vec<f64>, eigenvectors: Mat, mass: Vec<f64>) -> Self {
        assert_eq!(eigenvalues.len(), eigenvectors.cols());
        assert_eq!(mass.len(), eigenvectors.rows());
        SpectralBasis {
            eigenvalues,
            eigenvectors,
            mass,
        }
    }

    pub fn n(&self) -> usize {
        self.eigenvectors.rows()
    }

    pub fn k_eig(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Mat {
        &self.eigenvectors
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Basis restricted to the first k modes.
    pub fn truncated(&self, k: usize) -> SpectralBasis {
        assert!(k <= self.k_eig());
        let vecs = Mat::from_fn(self.n(), k, |i, j| self.eigenvectors.at(i, j));
        SpectralBasis::new(self.eigenvalues[..k].to_vec(), vecs, self.mass.clone())
    }

    /// Relabel the vertex axis by `perm` (perm[old] = new).
    pub fn permuted(&self, perm: &[usize]) -> SpectralBasis {
        assert_eq!(perm.len(), self.n());
        let mut vecs = Mat::zeros(self.n(), self.k_eig());
        let mut mass = vec![0.0; self.n()];
        for i in 0..self.n() {
            mass[perm[i]] = self.mass[i];
            for j in 0..self.k_eig() {
                vecs.set(perm[i], j, self.eigenvectors.at(i, j));
            }
        }
        SpectralBasis::new(self.eigenvalues.clone(), vecs, mass)
    }
}

/// Which eigensolver path to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenSolver {
    /// Dense for small meshes (N <= 512), iterative otherwise.
    #[default]
    Auto,
    Dense,
    Iterative,
}

const DENSE_FALLBACK_N: usize = 512;

/// Solve for the `k_eig` smallest generalized eigenpairs.
pub fn eigendecompose(ops: &OperatorSet, k_eig: usize) -> Result<SpectralBasis> {
    eigendecompose_with(ops, k_eig, EigenSolver::Auto)
}

pub fn eigendecompose_with(
    ops: &OperatorSet,
    k_eig: usize,
    solver: EigenSolver,
) -> Result<SpectralBasis> {
    let n = ops.n();
    if k_eig == 0 || k_eig > n {
        return Err(Error::domain(format!(
            "k_eig must be in [1, {n}], got {k_eig}"
        )));
    }
    let s = ops.l.diag_scale_sym(&ops.w);
    let use_dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::Iterative => false,
        EigenSolver::Auto => n <= DENSE_FALLBACK_N || k_eig * 2 + 33 >= n,
    };
    let (vals, std_vecs) = if use_dense {
        let (vals, vecs) = symmetric_eigen(&s.to_dense())?;
        let kept = Mat::from_fn(n, k_eig, |i, j| vecs.at(i, j));
        (vals[..k_eig].to_vec(), kept)
    } else {
        krylov_smallest(&s, k_eig)?
    };

    // map standard-form vectors back to generalized eigenvectors
    let inv_sqrt_w: Vec<f64> = ops.w.iter().map(|&x| 1.0 / x.sqrt()).collect();
    let eigenvectors = Mat::from_fn(n, k_eig, |i, j| std_vecs.at(i, j) * inv_sqrt_w[i]);
    let eigenvalues: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
    Ok(SpectralBasis::new(
        eigenvalues,
        eigenvectors,
        ops.w.clone(),
    ))
}

/// Thick-restart Rayleigh-Ritz iteration for the smallest eigenpairs of a
/// sparse symmetric matrix, with full (two-pass) reorthogonalization.
///
/// A single-vector Krylov space cannot represent more than one member of an
/// exactly degenerate eigenspace, so missing copies only enter through
/// noise. Two measures make that reliable: the restart residual vector is
/// perturbed by a small random component each cycle, and the iteration
/// only stops once the smallest Ritz values are converged AND unchanged
/// over several consecutive cycles.
fn krylov_smallest(s: &CsrMatrix, k: usize) -> Result<(Vec<f64>, Mat)> {
    let n = s.n();
    let ncv = (2 * k + 1).max(k + 32).min(n);
    let keep = (k + 8).min(ncv.saturating_sub(1)).max(1);
    let scale = s.inf_norm().max(1e-300);
    let tol = 1e-10 * scale;
    let max_restarts = 600;
    let required_stable_cycles = 3;

    let mut rng = crate::rng::seeded(0x9e37_79b9_7f4a_7c15);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(ncv + 1);
    basis.push(random_unit_vec(n, &mut rng));
    let mut h = Mat::zeros(ncv, ncv);
    let mut processed = 0usize;
    let mut beta_final;
    let mut prev_theta: Option<Vec<f64>> = None;
    let mut stable_cycles = 0usize;

    for restart in 0..max_restarts {
        beta_final = 0.0;
        // extend the chain to ncv columns; h accumulates V^T S V
        while processed < ncv {
            let j = processed;
            let mut w = vec![0.0; n];
            s.spmv(&basis[j], &mut w);
            let mut hcol = vec![0.0; j + 1];
            for _pass in 0..2 {
                for (i, vi) in basis.iter().enumerate().take(j + 1) {
                    let c = dot(vi, &w);
                    hcol[i] += c;
                    axpy(&mut w, vi, -c);
                }
            }
            for (i, &c) in hcol.iter().enumerate() {
                h.set(i, j, c);
                h.set(j, i, c);
            }
            let beta = dot(&w, &w).sqrt();
            let negligible = beta <= 1e-13 * scale.max(1.0);
            if j + 1 < ncv {
                let b = if negligible { 0.0 } else { beta };
                h.set(j + 1, j, b);
                h.set(j, j + 1, b);
                if !negligible {
                    basis.push(w.iter().map(|x| x / beta).collect());
                } else {
                    // invariant subspace: continue in a fresh direction
                    let mut fresh = random_unit_vec(n, &mut rng);
                    orthogonalize(&mut fresh, &basis);
                    basis.push(fresh);
                }
            } else {
                beta_final = if negligible { 0.0 } else { beta };
                if !negligible {
                    basis.push(w.iter().map(|x| x / beta).collect());
                }
            }
            processed += 1;
        }

        // Rayleigh-Ritz on the projected matrix
        let m = processed;
        let hm = Mat::from_fn(m, m, |i, j| h.at(i, j));
        let (theta, sv) = symmetric_eigen(&hm)?;
        let residual = |i: usize| beta_final * sv.at(m - 1, i).abs();
        let converged = (0..k).all(|i| residual(i) <= tol.max(1e-11 * theta[i].abs()));
        let stable = match &prev_theta {
            Some(prev) => {
                (0..k).all(|i| (theta[i] - prev[i]).abs() <= tol.max(1e-10 * theta[i].abs()))
            }
            None => false,
        };
        if converged && stable {
            stable_cycles += 1;
        } else {
            stable_cycles = 0;
        }
        prev_theta = Some(theta[..k].to_vec());

        let exhausted_space = m >= n;
        let done = converged && (stable_cycles >= required_stable_cycles || exhausted_space);
        if done || restart == max_restarts - 1 {
            if !converged {
                let worst = (0..k).map(residual).fold(0.0f64, f64::max);
                return Err(Error::numeric(format!(
                    "eigensolver did not converge after {max_restarts} restarts; worst residual {worst:.3e} vs tolerance {tol:.3e}"
                )));
            }
            let mut out = Mat::zeros(n, k);
            for j in 0..k {
                let col = combine(&basis[..m], &sv, j, n);
                for i in 0..n {
                    out.set(i, j, col[i]);
                }
            }
            return Ok((theta[..k].to_vec(), out));
        }

        // thick restart: smallest Ritz vectors plus the (noise-seeded)
        // residual direction, fully chained
        let mut new_basis: Vec<Vec<f64>> = (0..keep)
            .map(|j| combine(&basis[..m], &sv, j, n))
            .collect();
        for j in 0..new_basis.len() {
            let (head, tail) = new_basis.split_at_mut(j);
            let v = &mut tail[0];
            for prev in head.iter() {
                let c = dot(prev, v);
                axpy(v, prev, -c);
            }
            let nrm = dot(v, v).sqrt();
            if nrm > 1e-13 {
                for x in v.iter_mut() {
                    *x /= nrm;
                }
            } else {
                let mut fresh = random_unit_vec(n, &mut rng);
                orthogonalize(&mut fresh, head);
                *v = fresh;
            }
        }
        if new_basis.len() < ncv {
            let mut resid = if basis.len() > m {
                basis.swap_remove(m)
            } else {
                random_unit_vec(n, &mut rng)
            };
            // small random component re-seeds eigendirections that the
            // chain has no overlap with (exact multiplicities)
            let noise = random_unit_vec(n, &mut rng);
            axpy(&mut resid, &noise, 1e-7);
            orthogonalize(&mut resid, &new_basis);
            new_basis.push(resid);
        }

        h = Mat::zeros(ncv, ncv);
        for (i, &t) in theta.iter().enumerate().take(keep) {
            h.set(i, i, t);
        }
        basis = new_basis;
        processed = keep;
    }
    unreachable!()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn random_unit_vec(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| crate::rng::normal(rng)).collect();
    let nrm = dot(&v, &v).sqrt();
    for x in &mut v {
        *x /= nrm;
    }
    v
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in against {
            let c = dot(b, v);
            axpy(v, b, -c);
        }
    }
    let nrm = dot(v, v).sqrt();
    if nrm > 1e-300 {
        for x in v.iter_mut() {
            *x /= nrm;
        }
    }
}

fn combine(basis: &[Vec<f64>], coeffs: &Mat, col: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, b) in basis.iter().enumerate() {
        let c = coeffs.at(i, col);
        axpy(&mut out, b, c);
    }
    out
}

// ---------------------------------------------------------------------------
// diffusion and HKS
// ---------------------------------------------------------------------------

/// Heat diffusion h_t(x) = Phi (e^{-lambda t} (.) (Phi^T W x)) with an
/// independent time per channel.
pub fn diffuse(basis: &SpectralBasis, x: &Mat, times: &[f64]) -> Result<Mat> {
    let n = basis.n();
    let d = x.cols();
    if x.rows() != n {
        return Err(Error::shape(
            "diffuse",
            format!("features have {} rows, basis has {n}", x.rows()),
        ));
    }
    if times.len() != d {
        return Err(Error::shape(
            "diffuse",
            format!("{} times for {d} channels", times.len()),
        ));
    }
    if let Some(t) = times.iter().find(|t| **t < 0.0 || !t.is_finite() && **t != f64::INFINITY) {
        return Err(Error::domain(format!("diffusion time must be >= 0, got {t}")));
    }
    // coeffs = Phi^T (W x)
    let wx = Mat::from_fn(n, d, |i, j| basis.mass()[i] * x.at(i, j));
    let mut coeffs = basis.eigenvectors().matmul_tn(&wx);
    for (m, &lam) in basis.eigenvalues().iter().enumerate() {
        for (j, &t) in times.iter().enumerate() {
            let decay = (-lam * t).exp();
            coeffs.set(m, j, coeffs.at(m, j) * decay);
        }
    }
    Ok(basis.eigenvectors().matmul(&coeffs))
}

/// Strictly increasing positive diffusion times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSamples {
    times: Vec<f64>,
}

impl TimeSamples {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Geometric progression from t_min to t_max inclusive.
pub fn log_time_samples(t_min: f64, t_max: f64, count: usize) -> Result<TimeSamples> {
    if !(t_min > 0.0) || !t_min.is_finite() || !t_max.is_finite() {
        return Err(Error::domain(format!(
            "time range must be positive and finite, got [{t_min}, {t_max}]"
        )));
    }
    if count == 0 {
        return Err(Error::domain("need at least one time sample"));
    }
    if count == 1 {
        if t_min != t_max {
            return Err(Error::domain(
                "a single sample requires t_min == t_max",
            ));
        }
        return Ok(TimeSamples {
            times: vec![t_min],
        });
    }
    if !(t_min < t_max) {
        return Err(Error::domain(format!(
            "t_min must be < t_max, got [{t_min}, {t_max}]"
        )));
    }
    let ratio = (t_max / t_min).powf(1.0 / (count - 1) as f64);
    let mut times: Vec<f64> = (0..count)
        .map(|i| t_min * ratio.powi(i as i32))
        .collect();
    times[count - 1] = t_max;
    Ok(TimeSamples { times })
}

/// Per-vertex heat kernel signature matrix (N x T), strictly positive.
#[derive(Debug, Clone)]
pub struct HksFeatures {
    values: Mat,
}

impl HksFeatures {
    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn n_times(&self) -> usize {
        self.values.cols()
    }
}

/// HKS(x, t) = sum_m e^{-lambda_m t} phi_m(x)^2 over the basis modes.
pub fn compute_hks(basis: &SpectralBasis, ts: &TimeSamples) -> HksFeatures {
    let n = basis.n();
    let t = ts.len();
    let mut values = Mat::zeros(n, t);
    for i in 0..n {
        for (j, &time) in ts.times().iter().enumerate() {
            let mut acc = 0.0;
            for (m, &lam) in basis.eigenvalues().iter().enumerate() {
                let phi = basis.eigenvectors().at(i, m);
                acc += (-lam * time).exp() * phi * phi;
            }
            values.set(i, j, acc);
        }
    }
    HksFeatures { values }
}
