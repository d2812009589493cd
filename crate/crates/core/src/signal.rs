//! Savitzky–Golay smoothing and differentiation, plus band-limited
//! resampling.
//!
//! Speed traces are smoothed with a least-squares polynomial fit over a
//! sliding window; acceleration comes from the analytic first derivative
//! of the same fit. Edges are handled by re-solving the least squares on
//! the truncated asymmetric window rather than padding, which preserves
//! polynomial exactness at the boundaries.

use crate::error::{Error, Result};
use crate::fft;

/// Savitzky–Golay filter settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgConfig {
    /// Odd window length in samples, at least `order + 2`.
    pub window: usize,
    /// Polynomial degree of the local fit.
    pub order: usize,
    /// Sample rate in Hz; derivative weights are scaled to per-second.
    pub fs: f64,
}

impl SgConfig {
    pub fn new(window: usize, order: usize, fs: f64) -> Result<SgConfig> {
        let cfg = SgConfig { window, order, fs };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window from a time span: `round(span_s · fs)` forced odd.
    pub fn from_seconds(span_s: f64, order: usize, fs: f64) -> Result<SgConfig> {
        if !(fs > 0.0) || !(span_s > 0.0) {
            return Err(Error::Config(format!(
                "sg: span {span_s} s and sample rate {fs} Hz must be positive"
            )));
        }
        let mut window = (span_s * fs).round() as usize;
        if window % 2 == 0 {
            window += 1;
        }
        SgConfig::new(window.max(order + 2) | 1, order, fs)
    }

    /// The defaults used throughout: cubic fit over a 1.1 s window.
    pub fn default_for(fs: f64) -> Result<SgConfig> {
        SgConfig::from_seconds(1.1, 3, fs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("sg: window {} must be odd", self.window)));
        }
        if self.window < self.order + 2 {
            return Err(Error::Config(format!(
                "sg: window {} too small for order {}",
                self.window, self.order
            )));
        }
        if !(self.fs > 0.0) {
            return Err(Error::Config(format!("sg: sample rate {} must be positive", self.fs)));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        (self.window - 1) / 2
    }
}

/// Solves the `(order+1)` normal equations of the polynomial fit on the
/// given abscissa and returns per-sample weights for evaluating the
/// `deriv`-th derivative of the fit at `τ = 0`.
fn fit_weights(taus: &[f64], order: usize, deriv: usize) -> Vec<f64> {
    let cols = order + 1;
    let rows = taus.len();
    debug_assert!(rows >= cols);
    // Vandermonde A[i][j] = τ_i^j.
    let mut a = vec![0.0; rows * cols];
    for (i, &t) in taus.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..cols {
            a[i * cols + j] = p;
            p *= t;
        }
    }
    // G = AᵀA.
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += a[r * cols + i] * a[r * cols + j];
            }
            g[i * cols + j] = s;
        }
    }
    // Invert G by Gauss-Jordan with partial pivoting; tiny system.
    let mut inv = vec![0.0; cols * cols];
    for i in 0..cols {
        inv[i * cols + i] = 1.0;
    }
    for col in 0..cols {
        let mut piv = col;
        for r in col + 1..cols {
            if g[r * cols + col].abs() > g[piv * cols + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for j in 0..cols {
                g.swap(col * cols + j, piv * cols + j);
                inv.swap(col * cols + j, piv * cols + j);
            }
        }
        let d = g[col * cols + col];
        for j in 0..cols {
            g[col * cols + j] /= d;
            inv[col * cols + j] /= d;
        }
        for r in 0..cols {
            if r != col {
                let f = g[r * cols + col];
                if f != 0.0 {
                    for j in 0..cols {
                        g[r * cols + j] -= f * g[col * cols + j];
                        inv[r * cols + j] -= f * inv[col * cols + j];
                    }
                }
            }
        }
    }
    // w = row `deriv` of (AᵀA)⁻¹Aᵀ, scaled by deriv!.
    let mut fact = 1.0;
    for d in 1..=deriv {
        fact *= d as f64;
    }
    (0..rows)
        .map(|r| {
            let mut s = 0.0;
            for j in 0..cols {
                s += inv[deriv * cols + j] * a[r * cols + j];
            }
            s * fact
        })
        .collect()
}

/// Convolution weights of the centered window for the `deriv`-th
/// derivative, scaled to per-second units.
pub fn sg_coefficients(cfg: &SgConfig, deriv: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if deriv > cfg.order {
        return Err(Error::Config(format!(
            "sg: derivative order {deriv} exceeds polynomial order {}",
            cfg.order
        )));
    }
    let m = cfg.half() as isize;
    let taus: Vec<f64> = (-m..=m).map(|v| v as f64).collect();
    let scale = cfg.fs.powi(deriv as i32);
    Ok(fit_weights(&taus, cfg.order, deriv)
        .into_iter()
        .map(|w| w * scale)
        .collect())
}

fn sg_apply(x: &[f64], cfg: &SgConfig, deriv: usize) -> Result<Vec<f64>> {
    if x.len() < cfg.window {
        return Err(Error::InvalidLength(format!(
            "sg: series length {} shorter than window {}",
            x.len(),
            cfg.window
        )));
    }
    let n = x.len();
    let m = cfg.half();
    let center = sg_coefficients(cfg, deriv)?;
    let scale = cfg.fs.powi(deriv as i32);
    let mut out = vec![0.0; n];
    for t in m..n - m {
        let mut s = 0.0;
        for (j, w) in center.iter().enumerate() {
            s += w * x[t - m + j];
        }
        out[t] = s;
    }
    // Edge positions: refit on the window truncated to valid samples,
    // widened toward the interior when the fit would be underdetermined.
    let mut edge = |t: usize| {
        let mut lo = t.saturating_sub(m);
        let mut hi = (t + m).min(n - 1);
        if hi - lo < cfg.order {
            if lo == 0 {
                hi = cfg.order;
            } else {
                lo = n - 1 - cfg.order;
            }
        }
        let taus: Vec<f64> = (lo..=hi).map(|i| i as f64 - t as f64).collect();
        let w = fit_weights(&taus, cfg.order, deriv);
        let mut s = 0.0;
        for (j, wv) in w.iter().enumerate() {
            s += wv * x[lo + j];
        }
        out[t] = s * scale;
    };
    for t in 0..m {
        edge(t);
    }
    for t in n - m..n {
        edge(t);
    }
    Ok(out)
}

/// Smoothed series, same length as the input.
pub fn sg_smooth(x: &[f64], cfg: &SgConfig) -> Result<Vec<f64>> {
    sg_apply(x, cfg, 0)
}

/// First derivative in per-second units, same length as the input.
pub fn sg_derivative(x: &[f64], cfg: &SgConfig) -> Result<Vec<f64>> {
    sg_apply(x, cfg, 1)
}

/// Band-limited (Fourier-domain) resampling to a new rate.
///
/// Content below `min(fs_in, fs_out)/2` is preserved; interior samples of
/// periodic band-limited signals reproduce exactly.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in > 0.0) || !(fs_out > 0.0) {
        return Err(Error::Config(format!(
            "resample: rates must be positive, got {fs_in} -> {fs_out}"
        )));
    }
    if (fs_in - fs_out).abs() < 1e-12 * fs_in || x.len() < 2 {
        return Ok(x.to_vec());
    }
    let n = x.len();
    let m = ((n as f64) * fs_out / fs_in).round().max(1.0) as usize;
    if m == n {
        return Ok(x.to_vec());
    }

    let mut re = x.to_vec();
    let mut im = vec![0.0; n];
    fft::transform(&mut re, &mut im, false);

    let minn = n.min(m);
    let mut yre = vec![0.0; m];
    let mut yim = vec![0.0; m];
    let h_pos = (minn + 1) / 2;
    for k in 0..h_pos {
        yre[k] = re[k];
        yim[k] = im[k];
    }
    for j in 1..=(minn - 1) / 2 {
        yre[m - j] = re[n - j];
        yim[m - j] = im[n - j];
    }
    if minn % 2 == 0 {
        let nyq = minn / 2;
        if m < n {
            // Fold the conjugate half of the discarded band into the new
            // Nyquist bin so the downsampled signal stays real.
            yre[nyq] = re[nyq] + re[n - nyq];
            yim[nyq] = im[nyq] + im[n - nyq];
        } else {
            yre[nyq] = 0.5 * re[nyq];
            yim[nyq] = 0.5 * im[nyq];
            yre[m - nyq] = yre[nyq];
            yim[m - nyq] = -yim[nyq];
        }
    }
    fft::transform(&mut yre, &mut yim, true);
    let scale = 1.0 / n as f64;
    Ok(yre.iter().map(|v| v * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Independent oracle: each convolution weight is recovered by fitting
    /// the polynomial to an indicator series and evaluating the fit (or
    /// its derivative) at the window center.
    fn oracle_weight(window: usize, order: usize, deriv: usize, j: usize) -> f64 {
        let m = (window - 1) / 2;
        // Least squares on y = e_j over τ = -m..m via explicit
        // column-space projection: minimize ‖Ac - y‖².
        let cols = order + 1;
        let taus: Vec<f64> = (0..window).map(|i| i as f64 - m as f64).collect();
        let mut a = vec![0.0; window * cols];
        for (i, &t) in taus.iter().enumerate() {
            for c in 0..cols {
                a[i * cols + c] = t.powi(c as i32);
            }
        }
        // Solve AᵀA c = Aᵀ e_j by Cramer-style elimination on a copy.
        let mut g = vec![0.0; cols * (cols + 1)];
        for r in 0..cols {
            for c in 0..cols {
                let mut s = 0.0;
                for i in 0..window {
                    s += a[i * cols + r] * a[i * cols + c];
                }
                g[r * (cols + 1) + c] = s;
            }
            g[r * (cols + 1) + cols] = a[j * cols + r];
        }
        for col in 0..cols {
            let mut piv = col;
            for r in col + 1..cols {
                if g[r * (cols + 1) + col].abs() > g[piv * (cols + 1) + col].abs() {
                    piv = r;
                }
            }
            for c in 0..=cols {
                g.swap(col * (cols + 1) + c, piv * (cols + 1) + c);
            }
            let d = g[col * (cols + 1) + col];
            for c in 0..=cols {
                g[col * (cols + 1) + c] /= d;
            }
            for r in 0..cols {
                if r != col {
                    let f = g[r * (cols + 1) + col];
                    for c in 0..=cols {
                        g[r * (cols + 1) + c] -= f * g[col * (cols + 1) + c];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..cols).map(|r| g[r * (cols + 1) + cols]).collect();
        match deriv {
            0 => coef[0],
            1 => coef[1],
            _ => unreachable!(),
        }
    }

    #[test]
    fn weight_sums() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        let w0 = sg_coefficients(&cfg, 0).unwrap();
        let w1 = sg_coefficients(&cfg, 1).unwrap();
        let s0: f64 = w0.iter().sum();
        let s1: f64 = w1.iter().sum();
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!(s1.abs() < 1e-10);
    }

    #[test]
    fn weights_match_normal_equations_oracle() {
        let cfg = SgConfig { window: 11, order: 3, fs: 1.0 };
        for deriv in [0usize, 1] {
            let w = sg_coefficients(&cfg, deriv).unwrap();
            for j in 0..cfg.window {
                let o = oracle_weight(cfg.window, cfg.order, deriv, j);
                assert!((w[j] - o).abs() < 1e-12, "deriv {deriv} weight {j}: {} vs {o}", w[j]);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(matches!(SgConfig::new(10, 3, 10.0), Err(Error::Config(_))));
        assert!(matches!(SgConfig::new(5, 4, 10.0), Err(Error::Config(_))));
        assert!(matches!(SgConfig::new(11, 3, 0.0), Err(Error::Config(_))));
        let cfg = SgConfig::default_for(10.0).unwrap();
        assert_eq!(cfg.window, 11);
        assert_eq!(cfg.order, 3);
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        assert!(matches!(sg_coefficients(&cfg, 4), Err(Error::Config(_))));
    }

    #[test]
    fn constant_series_is_fixed_point() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        let x = vec![4.2; 64];
        let s = sg_smooth(&x, &cfg).unwrap();
        let d = sg_derivative(&x, &cfg).unwrap();
        for t in 0..x.len() {
            assert!((s[t] - 4.2).abs() < 1e-12);
            assert!(d[t].abs() < 1e-10);
        }
    }

    #[test]
    fn cubic_is_reproduced_exactly() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        let n = 100;
        let x: Vec<f64> = (0..n).map(|t| (t as f64 / cfg.fs).powi(3)).collect();
        let s = sg_smooth(&x, &cfg).unwrap();
        let d = sg_derivative(&x, &cfg).unwrap();
        let m = (cfg.window - 1) / 2;
        for t in m..n - m {
            let tt = t as f64 / cfg.fs;
            let rel_s = (s[t] - x[t]).abs() / x[t].abs().max(1e-12);
            let dx = 3.0 * tt * tt;
            let rel_d = (d[t] - dx).abs() / dx.abs().max(1e-12);
            assert!(rel_s < 1e-9, "smooth at {t}: rel {rel_s}");
            assert!(rel_d < 1e-9, "deriv at {t}: rel {rel_d}");
        }
    }

    #[test]
    fn ramp_derivative_is_one_including_edges() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        let x: Vec<f64> = (0..50).map(|t| t as f64 / cfg.fs).collect();
        let d = sg_derivative(&x, &cfg).unwrap();
        for (t, v) in d.iter().enumerate() {
            assert!((v - 1.0).abs() < 1e-9, "ramp deriv at {t}: {v}");
        }
    }

    #[test]
    fn smoothing_is_linear() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        let n = 64;
        let x: Vec<f64> = (0..n).map(|t| (t as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..n).map(|t| (t as f64 * 0.11).cos()).collect();
        let (alpha, beta) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = sg_smooth(&combo, &cfg).unwrap();
        let sx = sg_smooth(&x, &cfg).unwrap();
        let sy = sg_smooth(&y, &cfg).unwrap();
        for t in 0..n {
            assert!((lhs[t] - (alpha * sx[t] + beta * sy[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_has_odd_symmetry_under_time_reversal() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        let n = 48;
        let x: Vec<f64> = (0..n).map(|t| (t as f64 * 0.2).sin() + 0.1 * t as f64).collect();
        let rev: Vec<f64> = x.iter().rev().cloned().collect();
        let d = sg_derivative(&x, &cfg).unwrap();
        let dr = sg_derivative(&rev, &cfg).unwrap();
        for t in 0..n {
            assert!((d[t] + dr[n - 1 - t]).abs() < 1e-10);
        }
    }

    #[test]
    fn too_short_series_is_rejected() {
        let cfg = SgConfig::new(11, 3, 10.0).unwrap();
        assert!(matches!(sg_smooth(&[1.0; 5], &cfg), Err(Error::InvalidLength(_))));
    }

    #[test]
    fn resample_identity_and_constant() {
        let x: Vec<f64> = (0..40).map(|t| (t as f64 * 0.17).sin()).collect();
        assert_eq!(resample(&x, 10.0, 10.0).unwrap(), x);
        let c = resample(&vec![2.5; 50], 10.0, 4.0).unwrap();
        assert_eq!(c.len(), 20);
        for v in c {
            assert!((v - 2.5).abs() < 1e-10);
        }
    }

    #[test]
    fn resample_preserves_low_frequency_sine() {
        // 0.2 Hz sine, exactly periodic over the record so the Fourier
        // method reproduces it without leakage.
        let fs_in = 10.0;
        let n = 600; // 60 s -> 12 full periods
        let f = 0.2;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * f * t as f64 / fs_in).sin()).collect();
        let y = resample(&x, fs_in, 5.0).unwrap();
        assert_eq!(y.len(), 300);
        let interior = 10..y.len() - 10;
        for t in interior {
            let expect = (2.0 * PI * f * t as f64 / 5.0).sin();
            assert!((y[t] - expect).abs() < 1e-6, "t={t}: {} vs {expect}", y[t]);
        }
    }

    #[test]
    fn resample_round_trip_on_band_limited_signal() {
        let fs = 10.0;
        let n = 500;
        let x: Vec<f64> = (0..n)
            .map(|t| {
                let tt = t as f64 / fs;
                1.0 + 0.5 * (2.0 * PI * 0.1 * tt).sin() + 0.2 * (2.0 * PI * 0.3 * tt).cos()
            })
            .collect();
        let down = resample(&x, fs, 5.0).unwrap();
        let up = resample(&down, 5.0, 10.0).unwrap();
        assert_eq!(up.len(), n);
        for t in 20..n - 20 {
            assert!((up[t] - x[t]).abs() < 1e-6, "t={t}");
        }
    }
}
