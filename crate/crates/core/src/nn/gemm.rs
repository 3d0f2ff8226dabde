use super::Scalar;

/// Row counts up to this use a plain row-broadcast loop.
const SMALL_M: usize = 4;

/// Row-major `C (m x n) = op(A) * op(B) + beta * C`, where `op(A)` is `m x k`
/// and `op(B)` is `k x n`. A transposed operand is stored in its untransposed
/// layout (`k x m` for A, `n x k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    if m <= SMALL_M && !trans_a && !trans_b {
        // Packing B costs more than the product itself for a few rows.
        for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            for v in c_row.iter_mut() {
                *v *= beta;
            }
            for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked against the strides above.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(trans_a: bool, trans_b: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    let bv = if trans_b { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn small_row_path_matches_naive() {
        let (n, k) = (7, 9);
        for m in 1..=6 {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.29).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.13).cos()).collect();
            let mut c = vec![1.0; m * n];
            gemm(false, false, m, n, k, &a, &b, 0.5, &mut c);
            let want = naive(false, false, m, n, k, &a, &b);
            for (got, w) in c.iter().zip(&want) {
                assert!((got - (w + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_for_all_transpositions() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, n, k, &a, &b, 0.0, &mut c);
                let want = naive(ta, tb, m, n, k, &a, &b);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
