//! Real-input Fourier transforms over the last tensor axis.
//!
//! Conventions are pinned: the forward transform is unnormalized,
//! `X[k] = Σ_t x[t]·exp(−2πi k t / n)` for `k in [0, n/2]`, and the inverse
//! carries the full `1/n` and enforces conjugate symmetry so its output is
//! real. Power-of-two lengths take an iterative radix-2 path; every other
//! length falls back to direct summation, and the two paths agree to
//! `1e-10`.
//!
//! Both directions participate in reverse-mode differentiation; their
//! adjoints are themselves Fourier transforms.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── Raw complex transforms ──────────────────────────────────────────

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place iterative radix-2 transform. `inverse` conjugates the
/// twiddles; no normalization is applied in either direction.
fn fft_radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(is_pow2(n));
    debug_assert_eq!(im.len(), n);
    if n < 2 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr0, vi0) = (re[i + k + len / 2], im[i + k + len / 2]);
                let vr = vr0 * cr - vi0 * ci;
                let vi = vr0 * ci + vi0 * cr;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Direct O(n²) transform for arbitrary lengths.
fn dft_direct(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let step = sign * 2.0 * PI / n as f64;
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let mut sr = 0.0;
        let mut si = 0.0;
        for t in 0..n {
            let ang = step * (k as f64) * (t as f64);
            let (c, s) = (ang.cos(), ang.sin());
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    (out_re, out_im)
}

/// Unnormalized complex transform, choosing the fast path when possible.
pub(crate) fn transform(re: &mut Vec<f64>, im: &mut Vec<f64>, inverse: bool) {
    if is_pow2(re.len()) {
        fft_radix2(re, im, inverse);
    } else {
        let (r, i) = dft_direct(re, im, inverse);
        *re = r;
        *im = i;
    }
}

/// Half-spectrum forward transform of one real sequence, interleaved
/// `(re, im)` pairs, `floor(n/2)+1` bins.
pub(crate) fn rfft_seq(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let n_half = n / 2 + 1;
    let mut re = x.to_vec();
    let mut im = vec![0.0; n];
    transform(&mut re, &mut im, false);
    let mut out = Vec::with_capacity(n_half * 2);
    for k in 0..n_half {
        out.push(re[k]);
        let mut v = im[k];
        // Real input makes these exactly zero analytically; pin them.
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            v = 0.0;
        }
        out.push(v);
    }
    out
}

/// Inverse of [`rfft_seq`] with `1/n` normalization. Imaginary parts of
/// the DC bin (and Nyquist bin for even `n`) are ignored.
pub(crate) fn irfft_seq(spec: &[f64], n: usize) -> Vec<f64> {
    let n_half = n / 2 + 1;
    debug_assert_eq!(spec.len(), n_half * 2);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n_half {
        re[k] = spec[2 * k];
        im[k] = spec[2 * k + 1];
    }
    im[0] = 0.0;
    if n % 2 == 0 {
        im[n / 2] = 0.0;
    }
    // Hermitian completion: X[n-k] = conj(X[k]).
    for k in 1..(n + 1) / 2 {
        re[n - k] = re[k];
        im[n - k] = -im[k];
    }
    transform(&mut re, &mut im, true);
    re.iter().map(|v| v / n as f64).collect()
}

// ── Spectrum container ──────────────────────────────────────────────

/// Half spectra of a batch of real sequences.
///
/// The underlying tensor has shape `(..., n_half, 2)` with interleaved
/// real/imaginary pairs; leading axes mirror the transformed input.
pub struct ComplexSpectrum {
    tensor: Tensor,
    n: usize,
}

impl ComplexSpectrum {
    pub(crate) fn from_tensor(tensor: Tensor, n: usize) -> ComplexSpectrum {
        ComplexSpectrum { tensor, n }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Original sequence length.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_half(&self) -> usize {
        self.n / 2 + 1
    }
}

// ── Differentiable ops ──────────────────────────────────────────────

const PAR_ROWS: usize = 32;

fn map_rows(input: &[f64], rows: usize, in_len: usize, out_len: usize, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_len];
    if rows >= PAR_ROWS {
        let band = (rows / (4 * rayon::current_num_threads())).max(1);
        out.par_chunks_mut(band * out_len)
            .zip(input.par_chunks(band * in_len))
            .for_each(|(ob, ib)| {
                for (o, i) in ob.chunks_mut(out_len).zip(ib.chunks(in_len)) {
                    o.copy_from_slice(&f(i));
                }
            });
    } else {
        for r in 0..rows {
            out[r * out_len..(r + 1) * out_len]
                .copy_from_slice(&f(&input[r * in_len..(r + 1) * in_len]));
        }
    }
    out
}

/// Forward real transform over the last axis.
///
/// `n` must equal the last-axis extent and be nonzero.
pub fn rfft(x: &Tensor, n: usize) -> Result<ComplexSpectrum> {
    if n == 0 {
        return Err(Error::InvalidLength("rfft length must be nonzero".into()));
    }
    let rank = x.shape().len();
    if rank == 0 || x.shape()[rank - 1] != n {
        return Err(Error::InvalidLength(format!(
            "rfft: last axis of {:?} does not match n = {n}",
            x.shape()
        )));
    }
    let rows = x.numel() / n;
    let n_half = n / 2 + 1;
    let mut shape = x.shape().to_vec();
    shape[rank - 1] = n_half;
    shape.push(2);

    let xc = x.clone();
    let out = x.with_data(|d| map_rows(d, rows, n, n_half * 2, rfft_seq));
    let t = Tensor::make_op(out, shape, vec![xc.clone()], move |g| {
        // d loss / d x[t] = Re( Σ_{k<n_half} G[k] e^{+2πikt/n} ): an
        // unnormalized inverse transform of the half spectrum without
        // Hermitian completion.
        let contrib = map_rows(g, rows, n_half * 2, n, |grow| {
            let mut re = vec![0.0; n];
            let mut im = vec![0.0; n];
            for k in 0..n_half {
                re[k] = grow[2 * k];
                im[k] = grow[2 * k + 1];
            }
            let mut re_v = re;
            let mut im_v = im;
            transform(&mut re_v, &mut im_v, true);
            re_v
        });
        xc.accum_grad_vec(contrib);
    });
    Ok(ComplexSpectrum::from_tensor(t, n))
}

/// Inverse real transform back to sequences of length `n`.
pub fn irfft(spec: &ComplexSpectrum, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidLength("irfft length must be nonzero".into()));
    }
    let n_half = n / 2 + 1;
    if spec.n_half() != n_half {
        return Err(Error::InvalidLength(format!(
            "irfft: spectrum has {} bins, length {n} needs {n_half}",
            spec.n_half()
        )));
    }
    let x = spec.tensor();
    let rank = x.shape().len();
    let rows = x.numel() / (n_half * 2);
    let mut shape = x.shape()[..rank - 1].to_vec();
    shape[rank - 2] = n;

    let xc = x.clone();
    let out = x.with_data(|d| map_rows(d, rows, n_half * 2, n, |row| irfft_seq(row, n)));
    Ok(Tensor::make_op(out, shape, vec![xc.clone()], move |g| {
        // Adjoint: forward-transform the upstream gradient, scale interior
        // bins by 2/n (they represent conjugate pairs), edge bins by 1/n.
        let contrib = map_rows(g, rows, n, n_half * 2, |grow| {
            let mut h = rfft_seq(grow);
            for k in 0..n_half {
                let c = if k == 0 || (n % 2 == 0 && k == n / 2) {
                    1.0
                } else {
                    2.0
                };
                h[2 * k] *= c / n as f64;
                h[2 * k + 1] *= c / n as f64;
            }
            h
        });
        xc.accum_grad_vec(contrib);
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    /// Independent direct-summation oracle for the forward transform.
    fn dft_oracle(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n / 2 + 1)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k as f64) * (t as f64) / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    fn seeded(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random values in [-1, 1].
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 20001) as f64 / 10000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn constant_sequence_is_dc_only() {
        let c = 0.7;
        let x = Tensor::from_vec(vec![c; 8], &[8]).unwrap();
        let s = rfft(&x, 8).unwrap();
        let d = s.tensor().to_vec();
        assert!((d[0] - 8.0 * c).abs() < 1e-12);
        for v in &d[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_lands_in_bin_one() {
        let x: Vec<f64> = (0..8).map(|t| (2.0 * PI * t as f64 / 8.0).cos()).collect();
        let s = rfft(&Tensor::from_vec(x.clone(), &[8]).unwrap(), 8).unwrap();
        let d = s.tensor().to_vec();
        // Oracle agreement on every bin.
        for (k, (or, oi)) in dft_oracle(&x).into_iter().enumerate() {
            assert!((d[2 * k] - or).abs() < 1e-10, "bin {k} re");
            assert!((d[2 * k + 1] - oi).abs() < 1e-10, "bin {k} im");
        }
        assert!((d[2] - 4.0).abs() < 1e-10);
        assert!(d[3].abs() < 1e-10);
        for k in [0usize, 2, 3, 4] {
            assert!(d[2 * k].abs() < 1e-10 || k == 1);
        }
    }

    #[test]
    fn dc_spectrum_inverts_to_constant() {
        let c = 1.25;
        let mut spec = vec![0.0; (8 / 2 + 1) * 2];
        spec[0] = 8.0 * c;
        let s = ComplexSpectrum::from_tensor(Tensor::from_vec(spec, &[5, 2]).unwrap(), 8);
        let y = irfft(&s, 8).unwrap();
        for v in y.to_vec() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let s = ComplexSpectrum::from_tensor(Tensor::zeros(&[5, 2]), 8);
        assert!(irfft(&s, 8).unwrap().to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_lengths_are_rejected() {
        let x = Tensor::from_vec(vec![1.0; 8], &[8]).unwrap();
        assert!(matches!(rfft(&x, 0), Err(Error::InvalidLength(_))));
        assert!(matches!(rfft(&x, 7), Err(Error::InvalidLength(_))));
        let s = ComplexSpectrum::from_tensor(Tensor::zeros(&[5, 2]), 8);
        assert!(matches!(irfft(&s, 12), Err(Error::InvalidLength(_))));
    }

    #[test]
    fn round_trip_identity_across_lengths() {
        for n in [8usize, 100, 128, 256] {
            let x = seeded(n, n as u64);
            let t = Tensor::from_vec(x.clone(), &[n]).unwrap();
            let y = irfft(&rfft(&t, n).unwrap(), n).unwrap().to_vec();
            let scale: f64 = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() / scale < 1e-10, "round trip n={n}");
            }
        }
    }

    #[test]
    fn radix2_agrees_with_direct_path() {
        for n in [8usize, 64, 256] {
            let x = seeded(n, 7 + n as u64);
            let mut re = x.clone();
            let mut im = vec![0.0; n];
            fft_radix2(&mut re, &mut im, false);
            let (dr, di) = dft_direct(&x, &vec![0.0; n], false);
            for k in 0..n {
                assert!((re[k] - dr[k]).abs() < 1e-10);
                assert!((im[k] - di[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parseval_identity() {
        for n in [8usize, 100, 128] {
            let x = seeded(n, 31 + n as u64);
            let t = Tensor::from_vec(x.clone(), &[n]).unwrap();
            let s = rfft(&t, n).unwrap();
            let d = s.tensor().to_vec();
            let mut rhs = d[0] * d[0] + d[1] * d[1];
            let interior_end = if n % 2 == 0 { n / 2 } else { n / 2 + 1 };
            for k in 1..interior_end {
                rhs += 2.0 * (d[2 * k] * d[2 * k] + d[2 * k + 1] * d[2 * k + 1]);
            }
            if n % 2 == 0 {
                let k = n / 2;
                rhs += d[2 * k] * d[2 * k] + d[2 * k + 1] * d[2 * k + 1];
            }
            rhs /= n as f64;
            let lhs: f64 = x.iter().map(|v| v * v).sum();
            assert!((lhs - rhs).abs() / lhs.abs() < 1e-9, "parseval n={n}");
        }
    }

    #[test]
    fn round_trip_gradient_matches_finite_differences() {
        let xs = seeded(8, 99);
        let rel = grad_check(&xs, |x| {
            let s = rfft(x, 8).unwrap();
            irfft(&s, 8).unwrap().square().sum()
        });
        assert!(rel < 1e-6, "irfft∘rfft grad rel err {rel}");
    }

    #[test]
    fn rfft_gradient_alone_matches_finite_differences() {
        let xs = seeded(10, 5);
        let rel = grad_check(&xs, |x| rfft(x, 10).unwrap().tensor().square().sum());
        assert!(rel < 1e-6, "rfft grad rel err {rel}");
    }

    proptest! {
        #[test]
        fn prop_round_trip(n in 2usize..64, seed in 0u64..1000) {
            let x = seeded(n, seed);
            let t = Tensor::from_vec(x.clone(), &[n]).unwrap();
            let y = irfft(&rfft(&t, n).unwrap(), n).unwrap().to_vec();
            let scale: f64 = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() / scale < 1e-10);
            }
        }
    }
}
