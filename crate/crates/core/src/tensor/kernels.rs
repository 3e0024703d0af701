//! Raw slice kernels shared by the tape ops.
//!
//! Every output element of a product is accumulated from zero over the
//! inner index in ascending order. Register blocking and SIMD width only
//! change which elements are computed together, never the order of any
//! element's additions, so all code paths give bitwise-identical results.

const MR: usize = 4;
const NR: usize = 8;

/// `out += a · b` with `a: m×k`, `b: k×n`, all row-major.
pub fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime just above.
            unsafe { matmul_avx2(out, a, b, m, k, n) };
            return;
        }
    }
    matmul_blocked(out, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    matmul_blocked(out, a, b, m, k, n);
}

#[inline(always)]
fn matmul_blocked(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (p, b_row) in b.chunks_exact(n).enumerate().take(k) {
                let bp: &[f64; NR] = b_row[j0..j0 + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a_rows[r][p];
                    for c in 0..NR {
                        acc[r][c] += av * bp[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for c in 0..NR {
                    o[c] += acc_r[c];
                }
            }
        }
        if n_main < n {
            for r in 0..MR {
                edge_row(out, a, b, i0 + r, k, n, n_main);
            }
        }
    }
    for i in m_main..m {
        edge_row(out, a, b, i, k, n, 0);
    }
}

/// Columns `j_start..n` of output row `i`.
#[inline(always)]
fn edge_row(out: &mut [f64], a: &[f64], b: &[f64], i: usize, k: usize, n: usize, j_start: usize) {
    let width = n - j_start;
    let mut acc = vec![0.0f64; width];
    for p in 0..k {
        let av = a[i * k + p];
        let bp = &b[p * n + j_start..(p + 1) * n];
        for (x, &bv) in acc.iter_mut().zip(bp) {
            *x += av * bv;
        }
    }
    for (o, x) in out[i * n + j_start..(i + 1) * n].iter_mut().zip(acc) {
        *o += x;
    }
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, giving `k×n`.
pub fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    let at = transpose(a, m, k);
    matmul_into(out, &at, b, k, m, n);
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
