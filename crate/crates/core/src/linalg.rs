//! Dense f64 kernels for the training hot path.
//!
//! The matmul walks four output rows at a time so each streamed `b` row
//! is reused from cache, with FMA when the target has it. All kernels
//! accumulate with a fixed inner iteration order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

/// Work threshold below which the kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline(always)]
fn fmadd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // One task = four output rows sharing every `b` row load.
    let quad = |ci: &mut [f64], ai: &[f64]| {
        let rows = ai.len() / k;
        match rows {
            4 => {
                let (c0, rest) = ci.split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                for p in 0..k {
                    let a0 = ai[p];
                    let a1 = ai[k + p];
                    let a2 = ai[2 * k + p];
                    let a3 = ai[3 * k + p];
                    let brow = &b[p * n..p * n + n];
                    for j in 0..n {
                        let bv = brow[j];
                        c0[j] = fmadd(a0, bv, c0[j]);
                        c1[j] = fmadd(a1, bv, c1[j]);
                        c2[j] = fmadd(a2, bv, c2[j]);
                        c3[j] = fmadd(a3, bv, c3[j]);
                    }
                }
            }
            _ => {
                for r in 0..rows {
                    let arow = &ai[r * k..(r + 1) * k];
                    let crow = &mut ci[r * n..(r + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[p * n..p * n + n];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = fmadd(av, bv, *cv);
                        }
                    }
                }
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        for i in (0..m).step_by(4) {
            let hi = (i + 4).min(m);
            quad(&mut c[i * n..hi * n], &a[i * k..hi * k]);
        }
    } else {
        // A handful of contiguous row bands per thread keeps scheduling
        // overhead negligible.
        let bands = 4 * rayon::current_num_threads();
        let rows_per = (m.div_ceil(bands)).div_ceil(4).max(1) * 4;
        c.par_chunks_mut(rows_per * n)
            .zip(a.par_chunks(rows_per * k))
            .for_each(|(cb, ab)| {
                let rows = ab.len() / k;
                for i in (0..rows).step_by(4) {
                    let hi = (i + 4).min(rows);
                    quad(&mut cb[i * n..hi * n], &ab[i * k..hi * k]);
                }
            });
    }
}

/// `c[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`, without materializing the
/// transpose: the`p` loop streams both inputs row by row.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let band = |cb: &mut [f64], i0: usize| {
        let rows = cb.len() / n;
        for p in 0..m {
            let arow = &a[p * k + i0..p * k + i0 + rows];
            let brow = &b[p * n..p * n + n];
            for (r, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut cb[r * n..(r + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = fmadd(av, bv, *cv);
                }
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        band(c, 0);
    } else {
        let bands = (2 * rayon::current_num_threads()).min(k);
        let rows_per = k.div_ceil(bands);
        c.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(bi, cb)| band(cb, bi * rows_per));
    }
}

/// Row-major transpose of `a[rows×cols]` into a fresh `[cols×rows]` buffer.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    // Block for cache friendliness on both strides.
    const BLK: usize = 32;
    for r0 in (0..rows).step_by(BLK) {
        let r1 = (r0 + BLK).min(rows);
        for c0 in (0..cols).step_by(BLK) {
            let c1 = (c0 + BLK).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        for (m, k, n) in [(3, 4, 2), (7, 5, 9), (8, 16, 8), (13, 3, 5)] {
            let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
            let mut c = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut c, m, k, n);
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    assert!((c[i * n + j] - s).abs() < 1e-12, "({m},{k},{n}) at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn tn_matches_transpose_then_matmul() {
        for (m, k, n) in [(5, 3, 4), (64, 17, 9), (200, 128, 64)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).cos()).collect();
            let b: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.3).sin()).collect();
            let mut c1 = vec![0.0; k * n];
            matmul_tn_acc(&a, &b, &mut c1, m, k, n);
            let at = transpose(&a, m, k);
            let mut c2 = vec![0.0; k * n];
            matmul_acc(&at, &b, &mut c2, k, m, n);
            for (x, y) in c1.iter().zip(&c2) {
                assert!((x - y).abs() < 1e-12, "({m},{k},{n})");
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let rows = 37;
        let cols = 53;
        let a: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.11).sin()).collect();
        let t = transpose(&a, rows, cols);
        let back = transpose(&t, cols, rows);
        assert_eq!(a, back);
    }

    #[test]
    fn parallel_path_is_deterministic() {
        let m = 128;
        let k = 96;
        let n = 64;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 97) as f64) / 97.0 - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 89) as f64) / 89.0 - 0.5).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c1, m, k, n);
        matmul_acc(&a, &b, &mut c2, m, k, n);
        assert_eq!(c1, c2);
    }
}
