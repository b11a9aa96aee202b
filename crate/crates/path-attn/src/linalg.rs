//! Small dense helpers shared by the UT-transform and attention paths.

use ndarray::{Array1, Array2, ArrayView2};

/// Solve `T x = b` for unit-lower-triangular `T` by forward substitution.
/// Only the strict lower part of `T` is read; the diagonal is taken as 1.
pub fn forward_substitute_unit(t: &ArrayView2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= t[[i, j]] * x[j];
        }
        x[i] = s;
    }
    x
}

/// Solve `T X = B` column by column (unit-lower-triangular `T`).
pub fn forward_substitute_unit_multi(t: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (b.nrows(), b.ncols());
    let mut x = b.to_owned();
    for i in 0..n {
        for j in 0..i {
            let tij = t[[i, j]];
            if tij != 0.0 {
                let row_j = x.row(j).to_owned();
                let mut row_i = x.row_mut(i);
                for c in 0..m {
                    row_i[c] -= tij * row_j[c];
                }
            }
        }
    }
    x
}

/// Solve `Tᵀ X = B` where `T` is unit lower triangular (so `Tᵀ` is unit
/// upper triangular), by backward substitution.
pub fn backward_substitute_unit_transposed(t: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (b.nrows(), b.ncols());
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            // (Tᵀ)_{i,j} = T_{j,i}
            let tji = t[[j, i]];
            if tji != 0.0 {
                let row_j = x.row(j).to_owned();
                let mut row_i = x.row_mut(i);
                for c in 0..m {
                    row_i[c] -= tji * row_j[c];
                }
            }
        }
    }
    x
}

/// Zero out entries above the diagonal (keeps the diagonal).
pub fn tril_inplace(a: &mut Array2<f64>) {
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            a[[i, j]] = 0.0;
        }
    }
}

/// Zero out the diagonal and everything above it.
pub fn strict_tril_inplace(a: &mut Array2<f64>) {
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            a[[i, j]] = 0.0;
        }
    }
}

pub fn identity(d: usize) -> Array2<f64> {
    Array2::eye(d)
}

/// Max absolute difference between two matrices of equal shape.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max relative deviation, normalized by the largest magnitude seen in `b`
/// (guarded below by 1.0 so zero outputs do not blow up the ratio).
pub fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(1.0, f64::max);
    max_abs_diff(a, b) / scale
}
