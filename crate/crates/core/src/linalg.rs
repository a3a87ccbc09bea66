//! Dense symmetric eigendecomposition backed by LAPACK (dsyevd).

use ndarray::Array2;
use std::os::raw::c_char;

use crate::error::{Error, Result};

extern "C" {
    fn dsyevd_(
        jobz: *const c_char,
        uplo: *const c_char,
        n: *const i32,
        a: *mut f64,
        lda: *const i32,
        w: *mut f64,
        work: *mut f64,
        lwork: *const i32,
        iwork: *mut i32,
        liwork: *const i32,
        info: *mut i32,
    );
}

fn dsyevd(n: i32, a: &mut [f64], w: &mut [f64]) -> i32 {
    let (jobz, uplo) = (b'V' as c_char, b'L' as c_char);
    let mut info = 0i32;
    // workspace query
    let mut work_q = [0.0f64];
    let mut iwork_q = [0i32];
    let neg1 = -1i32;
    unsafe {
        dsyevd_(
            &jobz,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            w.as_mut_ptr(),
            work_q.as_mut_ptr(),
            &neg1,
            iwork_q.as_mut_ptr(),
            &neg1,
            &mut info,
        );
    }
    if info != 0 {
        return info;
    }
    let lwork = work_q[0] as i32;
    let liwork = iwork_q[0];
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        dsyevd_(
            &jobz,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    info
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
///
/// Returns `(eigenvalues, vectors)` where row `i` of `vectors` is the
/// eigenvector paired with `eigenvalues[i]`. Each eigenvector's sign is
/// fixed by making its largest-magnitude entry positive, so results are
/// reproducible across LAPACK builds.
pub fn sym_eigen_desc(mat: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = mat.nrows();
    assert_eq!(n, mat.ncols(), "matrix must be square");
    // dsyevd works column-major in place; the input is symmetric so the
    // row-major buffer is accepted as-is, and eigenvector j comes back in
    // the contiguous slice [j*n, (j+1)*n).
    let mut a: Vec<f64> = match mat.as_slice() {
        Some(s) => s.to_vec(),
        None => mat.iter().cloned().collect(),
    };
    let mut w = vec![0.0f64; n];
    let info = dsyevd(n as i32, &mut a, &mut w);
    if info != 0 {
        return Err(Error::EigenFailure { info });
    }
    // ascending -> descending
    let mut vectors = Array2::zeros((n, n));
    let mut values = vec![0.0f64; n];
    for k in 0..n {
        let src = n - 1 - k;
        values[k] = w[src];
        let col = &a[src * n..(src + 1) * n];
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (idx, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = idx;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        let mut row = vectors.row_mut(k);
        for (idx, &v) in col.iter().enumerate() {
            row[idx] = sign * v;
        }
    }
    Ok((values, vectors))
}
