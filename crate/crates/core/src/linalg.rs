//! Small dense complex-matrix helpers shared by the full SME and its tests.

use nalgebra::{Complex, DMatrix, SymmetricEigen};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;

pub fn zeros(n: usize) -> CMat {
    CMat::zeros(n, n)
}

pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().iter().sum()
}

/// `(m + m†) / 2`.
pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// Max-abs entry of `m - m†`.
pub fn hermiticity_defect(m: &CMat) -> f64 {
    let d = m - m.adjoint();
    d.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Hilbert–Schmidt pairing `Re Tr(a† b)`.
pub fn hs_inner(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[CMat]) -> CMat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(n);
    let mut off = 0;
    for b in blocks {
        let d = b.nrows();
        out.view_mut((off, off), (d, d)).copy_from(b);
        off += d;
    }
    out
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMat) -> f64 {
    SymmetricEigen::new(hermitize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky test with real pivots; `true` iff the Hermitian matrix is positive definite.
pub fn is_positive_definite(m: &CMat) -> bool {
    let n = m.nrows();
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)].re - (0..j).map(|k| l[(j, k)].norm_sqr()).sum::<f64>();
        if !(d > 0.0) {
            return false;
        }
        let ljj = d.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in j + 1..n {
            let s: C64 = (0..j).map(|k| l[(i, k)] * l[(j, k)].conj()).sum();
            l[(i, j)] = (m[(i, j)] - s) / ljj;
        }
    }
    true
}

/// Clip negative eigenvalues of a Hermitian matrix to zero.
///
/// Returns the projected matrix and whether any clipping happened. Positive
/// definite inputs are detected by a Cholesky pass and returned untouched.
pub fn clip_negative(m: CMat) -> (CMat, bool) {
    if is_positive_definite(&m) {
        return (m, false);
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (m, false);
    }
    let vals = eig.eigenvalues.map(|v| C64::new(v.max(0.0), 0.0));
    let v = &eig.eigenvectors;
    let out = v * CMat::from_diagonal(&vals) * v.adjoint();
    (hermitize(&out), true)
}

/// Pure state `|ψ⟩⟨ψ|` from an (unnormalised) amplitude vector.
pub fn pure_state(psi: &[C64]) -> CMat {
    let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let n = psi.len();
    CMat::from_fn(n, n, |i, j| psi[i] * psi[j].conj() / (norm * norm))
}
