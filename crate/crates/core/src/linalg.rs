//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative tolerance used by every positive-semidefiniteness check.
pub const PSD_RTOL: f64 = 1e-9;

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Smallest eigenvalue and the absolute tolerance implied by [`PSD_RTOL`].
pub fn psd_margin(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    let largest = ev.iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
    let min = ev.first().copied().unwrap_or(0.0);
    (min, PSD_RTOL * largest)
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let (min, tol) = psd_margin(m);
    min >= -tol
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Right pseudo-inverse `σᵀ(σσᵀ)⁻¹` of a full-row-rank matrix.
pub fn right_pseudo_inverse(sigma: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gram = sigma * sigma.transpose();
    let inv = spd_inverse(&gram)?;
    let (min, _) = psd_margin(&gram);
    let scale = gram.iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
    if min <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return None;
    }
    Some(sigma.transpose() * inv)
}

/// `out += alpha * m * x` with `m` column-major; no allocation.
#[inline]
pub fn gemv_acc(out: &mut [f64], alpha: f64, m: &DMatrix<f64>, x: &[f64]) {
    let rows = m.nrows();
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(x.len(), m.ncols());
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        let a = alpha * xj;
        for (o, &c) in out.iter_mut().zip(col) {
            *o += a * c;
        }
    }
}

/// `xᵀ m y` for column-major `m`.
#[inline]
pub fn bilinear(x: &[f64], m: &DMatrix<f64>, y: &[f64]) -> f64 {
    let rows = m.nrows();
    let data = m.as_slice();
    let mut acc = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        let mut s = 0.0;
        for (&xi, &c) in x.iter().zip(col) {
            s += xi * c;
        }
        acc += s * yj;
    }
    acc
}

/// Copy `block` into `m` with its top-left corner at `(r, c)`.
pub fn set_block(m: &mut DMatrix<f64>, r: usize, c: usize, block: &DMatrix<f64>) {
    m.view_mut((r, c), (block.nrows(), block.ncols())).copy_from(block);
}

pub fn block(m: &DMatrix<f64>, r: usize, c: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    m.view((r, c), (rows, cols)).into_owned()
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        set_block(&mut out, r, c, b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `[I_k, 0_{k×(total−k)}]`, the selector used to lift weights onto extended states.
pub fn leading_selector(k: usize, total: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(k, total);
    for i in 0..k {
        e[(i, i)] = 1.0;
    }
    e
}

pub fn lerp(a: &DMatrix<f64>, b: &DMatrix<f64>, w: f64) -> DMatrix<f64> {
    a * (1.0 - w) + b * w
}

pub fn lerp_vec(a: &DVector<f64>, b: &DVector<f64>, w: f64) -> DVector<f64> {
    a * (1.0 - w) + b * w
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}
