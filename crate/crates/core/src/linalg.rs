//! Small dense vector/matrix helpers for the low-dimensional state spaces
//! used here (d and m are typically 1..4). Matrices are row-major `Vec<f64>`.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major (rows x cols) matrix times vector.
pub fn matvec(mat: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    (0..rows)
        .map(|i| dot(&mat[i * cols..(i + 1) * cols], v))
        .collect()
}

/// v^T M for a (rows x cols) matrix: returns a cols-vector.
pub fn vecmat(v: &[f64], mat: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(v.len(), rows);
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let vi = v[i];
        for j in 0..cols {
            out[j] += vi * mat[i * cols + j];
        }
    }
    out
}

pub fn frobenius_norm(mat: &[f64]) -> f64 {
    mat.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral norm by power iteration on M^T M. Deterministic start vector;
/// adequate for the small coefficient matrices handled here.
pub fn operator_norm(mat: &[f64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(mat.len(), rows * cols);
    if mat.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..cols).map(|j| 1.0 + (j as f64) * 0.25).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut sigma = 0.0;
    for _ in 0..200 {
        let mv = matvec(mat, rows, cols, &v);
        let mut w = vecmat(&mv, mat, rows, cols);
        let nw = norm(&w);
        if nw == 0.0 {
            // v landed in the null space; restart off-axis
            v = (0..cols).map(|j| 1.0 / (1.0 + j as f64)).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            continue;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let next = norm(&matvec(mat, rows, cols, &w));
        v = w;
        if (next - sigma).abs() <= 1e-14 * next.max(1.0) {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Largest eigenvalue of the symmetric part (A + A^T)/2 of a square matrix,
/// by cyclic Jacobi rotations.
pub fn max_symmetric_eigenvalue(mat: &[f64], n: usize) -> f64 {
    debug_assert_eq!(mat.len(), n * n);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (mat[i * n + j] + mat[j * n + i]);
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n)
        .map(|i| a[i * n + i])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solve A x = b in place by Gaussian elimination with partial pivoting.
/// Returns `None` for a numerically singular system.
pub fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for row in (col + 1)..n {
            if m[row * n + col].abs() > m[piv * n + col].abs() {
                piv = row;
            }
        }
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
        }
        let diag = m[col * n + col];
        for row in (col + 1)..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in (col + 1)..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
    }
    Some(x)
}
