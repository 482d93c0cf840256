//! Row-major matrix product kernels. All of them accumulate into `c`.
//!
//! The packed micro-kernels come from `matrixmultiply`, which runs
//! single-threaded with a fixed summation order, so results are reproducible.

use super::tensor::Real;

fn check(a: usize, b: usize, c: usize, m: usize, k: usize, n: usize) {
    assert!(a == m * k && b == k * n && c == m * n, "gemm operand lengths");
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), b.len(), c.len(), m, k, n);
    if m * n * k == 0 {
        return;
    }
    // SAFETY: lengths checked above; strides describe dense row-major storage.
    unsafe {
        T::gemm_strided(m, k, n, a.as_ptr(), (k as isize, 1), b.as_ptr(), (n as isize, 1), c.as_mut_ptr(), n as isize);
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), b.len(), c.len(), m, k, n);
    if m * n * k == 0 {
        return;
    }
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        T::gemm_strided(m, k, n, a.as_ptr(), (k as isize, 1), b.as_ptr(), (1, k as isize), c.as_mut_ptr(), n as isize);
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), b.len(), c.len(), k, m, n);
    if m * n * k == 0 {
        return;
    }
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        T::gemm_strided(k, m, n, a.as_ptr(), (1, k as isize), b.as_ptr(), (n as isize, 1), c.as_mut_ptr(), n as isize);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        for (m, k, n) in [(5, 11, 7), (13, 9, 37), (8, 3, 16)] {
            check(m, k, n);
        }
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 11) as f64) * 0.5 - 2.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, k, m, n);
        assert_eq!(c, want);
    }
}
