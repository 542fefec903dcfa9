//! Thin wrapper over the `matrixmultiply` single-threaded f32 GEMM.
//!
//! Accumulation stays in f32 and the kernel is deterministic for a fixed
//! input, which the trainer's bit-reproducibility contract relies on.

/// c[m,n] += a[m,k] * b[k,n], all row-major slices.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m,n] += a[k,m]^T * b[k,n] without materializing the transpose.
pub fn gemm_at_b_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T without materializing the transpose.
pub fn gemm_a_bt_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32) * 0.3 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32) * 0.1 - 0.7).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut c);

        let mut naive = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                naive[i * n + j] = s;
            }
        }
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_variants_match_materialized() {
        let (m, k, n) = (4, 3, 2);
        let a: Vec<f32> = (0..k * m).map(|i| i as f32 * 0.2).collect(); // [k,m]
        let b: Vec<f32> = (0..k * n).map(|i| i as f32 * -0.1).collect(); // [k,n]
        let mut c = vec![0.0; m * n];
        gemm_at_b_acc(m, k, n, &a, &b, &mut c);

        // materialize a^T and use plain gemm
        let mut at = vec![0.0f32; m * k];
        for r in 0..k {
            for col in 0..m {
                at[col * k + r] = a[r * m + col];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_acc(m, k, n, &at, &b, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-6);
        }

        // a[m,k] * b[n,k]^T
        let a2: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.05 - 0.2).collect();
        let b2: Vec<f32> = (0..n * k).map(|i| i as f32 * 0.3).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_a_bt_acc(m, k, n, &a2, &b2, &mut c3);
        let mut b2t = vec![0.0f32; k * n];
        for r in 0..n {
            for col in 0..k {
                b2t[col * n + r] = b2[r * k + col];
            }
        }
        let mut c4 = vec![0.0; m * n];
        gemm_acc(m, k, n, &a2, &b2t, &mut c4);
        for (x, y) in c3.iter().zip(&c4) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
