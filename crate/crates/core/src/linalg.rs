//! Small dense linear-algebra helpers shared by the splitting, certificate
//! and engine code.

use nalgebra::DMatrix;

/// Singular values in descending order. Empty matrices have none.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Operator 2-norm; zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// `min_{|v| = 1} |M v|`: the smallest singular value for tall or square
/// matrices, zero for wide ones, `+inf` when there is no domain.
pub fn conorm(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// 2-norm condition number; `inf` for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Orthonormal basis of the column span (thin QR); keeps zero-column
/// matrices as they are.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 || (m.transpose() * m - DMatrix::identity(m.ncols(), m.ncols())).amax() == 0.0 {
        return m.clone();
    }
    let qr = m.clone().qr();
    let q = qr.q();
    let r = qr.r();
    // fix signs so the basis does not flip between neighbouring indices
    let mut q = q.columns(0, m.ncols()).into_owned();
    for j in 0..m.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// The leading `count` left singular vectors of `m`.
pub fn leading_left_singular_vectors(m: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    if count == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested left singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(m.nrows(), count);
    for (col, &idx) in order.iter().take(count).enumerate() {
        out.set_column(col, &u.column(idx));
    }
    out
}
