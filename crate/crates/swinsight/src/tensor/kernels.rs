//! Inner matmul kernels shared by forward and backward passes.
//!
//! Parallelism happens only across disjoint output slices, so results are
//! byte-identical to the sequential schedule regardless of thread count.

use super::Scalar;

/// C[m,n] = A[m,k] * B[k,n], overwriting `out`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (i.e. C[i,j] += dot(A row i, B row j)).
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + a_row[p] * b_row[p];
            }
            out_row[j] = out_row[j] + s;
        }
    }
}

/// C[k,n] += A[m,k]^T * G[m,n].
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * g_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_matches_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        matmul_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transposes() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.37 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.21 + 0.5).collect();
        let g: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.11 - 0.3).collect();

        // dA = G * B^T via nt
        let mut da = vec![0.0; m * k];
        matmul_nt_acc(&g, &b, &mut da, m, n, k);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut da_ref = vec![0.0; m * k];
        matmul_nn(&g, &bt, &mut da_ref, m, n, k);
        assert_eq!(da, da_ref);

        // dB = A^T * G via tn
        let mut db = vec![0.0; k * n];
        matmul_tn_acc(&a, &g, &mut db, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut db_ref = vec![0.0; k * n];
        matmul_nn(&at, &g, &mut db_ref, k, m, n);
        assert_eq!(db, db_ref);
    }
}
