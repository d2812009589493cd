//! Error metrics, Welch power-spectral-density comparison, stitched
//! prediction traces, the resolution-invariance harness, and parameter
//! reporting.
//!
//! Relative errors are scaled by the mean positive battery power of the
//! reference series. PSD peak alignment is judged on the three largest
//! bins of each side with one bin of slack, mutually.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::CheckpointMeta;
use crate::dataset::{make_windows, resample_log, DriveLog, WindowSet};
use crate::error::{Error, Result};
use crate::fft::transform;
use crate::operator::OperatorModel;
use crate::physics::VehicleSpec;
use crate::signal::SgConfig;
use crate::tensor::no_grad;

/// Absolute and relative error metrics in kW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// Mean positive reference power, the scale of the relative metrics.
    /// Absent when the reference never goes positive.
    pub scale: Option<f64>,
    pub rmae: Option<f64>,
    pub rrmse: Option<f64>,
}

pub fn metrics(p_true: &[f64], p_pred: &[f64]) -> Result<MetricsReport> {
    if p_true.is_empty() || p_true.len() != p_pred.len() {
        return Err(Error::InvalidLength(format!(
            "metrics: lengths {} vs {}",
            p_true.len(),
            p_pred.len()
        )));
    }
    let n = p_true.len() as f64;
    let mae = p_true.iter().zip(p_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let rmse =
        (p_true.iter().zip(p_pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / n).sqrt();
    let positives: Vec<f64> = p_true.iter().copied().filter(|v| *v > 0.0).collect();
    let scale = if positives.is_empty() {
        None
    } else {
        Some(positives.iter().sum::<f64>() / positives.len() as f64)
    };
    Ok(MetricsReport {
        mae,
        rmse,
        scale,
        rmae: scale.map(|s| mae / s),
        rrmse: scale.map(|s| rmse / s),
    })
}

// ── Welch PSD ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsdWindow {
    Rectangular,
    Hann,
}

fn window_weights(kind: PsdWindow, n: usize) -> Vec<f64> {
    match kind {
        PsdWindow::Rectangular => vec![1.0; n],
        // Periodic form, the spectral-analysis convention.
        PsdWindow::Hann => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
            .collect(),
    }
}

/// Welch's averaged periodogram.
///
/// Segments of `seg_len` samples advance by `seg_len·(1−overlap_frac)`;
/// each is windowed, transformed, and normalized to power density by
/// `fs·Σw²` with one-sided doubling of the interior bins. No detrending
/// is applied, so bin 0 carries the DC power.
pub fn welch_psd(
    x: &[f64],
    fs: f64,
    seg_len: usize,
    overlap_frac: f64,
    window: PsdWindow,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if seg_len == 0 || x.len() < seg_len {
        return Err(Error::InvalidLength(format!(
            "welch: series of {} vs segment of {seg_len}",
            x.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(Error::Config(format!(
            "welch: overlap {overlap_frac} must lie in [0, 1)"
        )));
    }
    let hop = ((seg_len as f64) * (1.0 - overlap_frac)).round().max(1.0) as usize;
    let w = window_weights(window, seg_len);
    let w_energy: f64 = w.iter().map(|v| v * v).sum();
    let n_half = seg_len / 2 + 1;
    let mut acc = vec![0.0; n_half];
    let mut segments = 0usize;
    let mut start = 0usize;
    while start + seg_len <= x.len() {
        let mut re: Vec<f64> = x[start..start + seg_len]
            .iter()
            .zip(&w)
            .map(|(v, wv)| v * wv)
            .collect();
        let mut im = vec![0.0; seg_len];
        transform(&mut re, &mut im, false);
        for k in 0..n_half {
            let mag2 = re[k] * re[k] + im[k] * im[k];
            let one_sided = if k == 0 || (seg_len % 2 == 0 && k == seg_len / 2) {
                1.0
            } else {
                2.0
            };
            acc[k] += one_sided * mag2 / (fs * w_energy);
        }
        segments += 1;
        start += hop;
    }
    for v in &mut acc {
        *v /= segments as f64;
    }
    let freqs: Vec<f64> = (0..n_half).map(|k| k as f64 * fs / seg_len as f64).collect();
    Ok((freqs, acc))
}

/// Indices of the three largest PSD bins, descending by power.
fn top3_bins(psd: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..psd.len()).collect();
    idx.sort_by(|a, b| psd[*b].partial_cmp(&psd[*a]).unwrap());
    idx.truncate(3);
    idx
}

/// Peak comparison of two same-length series.
#[derive(Debug, Clone)]
pub struct PsdReport {
    pub freqs: Vec<f64>,
    pub psd_true: Vec<f64>,
    pub psd_pred: Vec<f64>,
    pub peaks_true: Vec<usize>,
    pub peaks_pred: Vec<usize>,
    /// True when the top-3 bins of each side mutually fall within ±1 bin
    /// of the other side's top-3.
    pub aligned: bool,
}

pub const PSD_SEG_LEN: usize = 256;
pub const PSD_OVERLAP: f64 = 0.5;

/// Computes both PSDs with identical settings (Hann, 256-sample segments
/// or the largest power of two that fits, 50% overlap) and judges peak
/// alignment.
pub fn psd_compare(p_true: &[f64], p_pred: &[f64], fs: f64) -> Result<PsdReport> {
    if p_true.len() != p_pred.len() {
        return Err(Error::InvalidLength(format!(
            "psd_compare: lengths {} vs {}",
            p_true.len(),
            p_pred.len()
        )));
    }
    let mut seg = PSD_SEG_LEN;
    while seg > p_true.len() {
        seg /= 2;
    }
    if seg < 8 {
        return Err(Error::InvalidLength("psd_compare: series too short".into()));
    }
    let (freqs, psd_true) = welch_psd(p_true, fs, seg, PSD_OVERLAP, PsdWindow::Hann)?;
    let (_, psd_pred) = welch_psd(p_pred, fs, seg, PSD_OVERLAP, PsdWindow::Hann)?;
    let peaks_true = top3_bins(&psd_true);
    let peaks_pred = top3_bins(&psd_pred);
    let near = |a: usize, set: &[usize]| set.iter().any(|b| a.abs_diff(*b) <= 1);
    let aligned = peaks_pred.iter().all(|p| near(*p, &peaks_true))
        && peaks_true.iter().all(|t| near(*t, &peaks_pred));
    Ok(PsdReport { freqs, psd_true, psd_pred, peaks_true, peaks_pred, aligned })
}

/// Writes `(freq_hz, density_true, density_pred)` rows.
pub fn write_psd_csv(report: &PsdReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "freq_hz,density_true,density_pred")?;
    for i in 0..report.freqs.len() {
        writeln!(
            f,
            "{:.9},{:.12e},{:.12e}",
            report.freqs[i], report.psd_true[i], report.psd_pred[i]
        )?;
    }
    Ok(())
}

// ── Stitched prediction traces ──────────────────────────────────────

/// Per-sample outputs assembled from overlapping windows by uniform
/// averaging.
#[derive(Debug, Clone)]
pub struct StitchedTrace {
    /// Source sample index of each row.
    pub index: Vec<usize>,
    pub p_pred: Vec<f64>,
    pub p_res: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub paux: Vec<f64>,
}

/// Runs inference over the windows and averages overlapping predictions
/// back onto the source sample grid of `n_samples` points.
pub fn stitch_predictions(
    model: &OperatorModel,
    windows: &WindowSet,
    spec: &VehicleSpec,
    n_samples: usize,
) -> Result<StitchedTrace> {
    let out = no_grad(|| model.forward(windows, spec))?;
    let p_pred = out.p_pred.to_vec();
    let p_res = out.p_res.to_vec();
    let eta = out.trace.eta_t.to_vec();
    let mu = out.trace.mu_t.to_vec();
    let paux = match &out.trace.paux_t {
        Some(t) => t.to_vec(),
        None => vec![out.trace.paux0.item(); windows.b * windows.l],
    };

    let mut count = vec![0.0f64; n_samples];
    let mut acc = vec![[0.0f64; 5]; n_samples];
    for (wi, &start) in windows.starts.iter().enumerate() {
        for t in 0..windows.l {
            let src = start + t;
            let j = wi * windows.l + t;
            count[src] += 1.0;
            acc[src][0] += p_pred[j];
            acc[src][1] += p_res[j];
            acc[src][2] += eta[j];
            acc[src][3] += mu[j];
            acc[src][4] += paux[j];
        }
    }
    let mut trace = StitchedTrace {
        index: Vec::new(),
        p_pred: Vec::new(),
        p_res: Vec::new(),
        eta: Vec::new(),
        mu: Vec::new(),
        paux: Vec::new(),
    };
    for i in 0..n_samples {
        if count[i] > 0.0 {
            trace.index.push(i);
            trace.p_pred.push(acc[i][0] / count[i]);
            trace.p_res.push(acc[i][1] / count[i]);
            trace.eta.push(acc[i][2] / count[i]);
            trace.mu.push(acc[i][3] / count[i]);
            trace.paux.push(acc[i][4] / count[i]);
        }
    }
    Ok(trace)
}

// ── Resolution harness ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RateMetrics {
    pub rate_hz: f64,
    /// Absent when the rate was skipped; `note` says why.
    pub report: Option<MetricsReport>,
    pub note: Option<String>,
}

/// Evaluates a trained model on the same log resampled to each rate.
///
/// Inputs are band-limited resampled, windows are rebuilt with the same
/// window length and the checkpoint's scaler, and metrics are computed
/// against the resampled truth on the stitched trace. Rates whose
/// resampled log is shorter than one window are skipped with a notice.
pub fn resolution_eval(
    model: &OperatorModel,
    meta: &CheckpointMeta,
    log: &DriveLog,
    rates: &[f64],
) -> Result<Vec<RateMetrics>> {
    let mut out = Vec::with_capacity(rates.len());
    for &rate in rates {
        if !(rate > 0.0) {
            out.push(RateMetrics {
                rate_hz: rate,
                report: None,
                note: Some("rate must be positive".into()),
            });
            continue;
        }
        let rlog = resample_log(log, rate)?;
        if rlog.len() < meta.operator.l {
            out.push(RateMetrics {
                rate_hz: rate,
                report: None,
                note: Some(format!(
                    "resampled log has {} samples, window needs {}",
                    rlog.len(),
                    meta.operator.l
                )),
            });
            continue;
        }
        let sg = SgConfig::from_seconds(meta.sg_span_s, meta.sg_order, rate)?;
        let windows = make_windows(&rlog, &sg, meta.operator.l, meta.stride, Some(&meta.scaler))?;
        let trace = stitch_predictions(model, &windows, &meta.vehicle, rlog.len())?;
        let truth: Vec<f64> = trace.index.iter().map(|&i| rlog.p_bat[i]).collect();
        out.push(RateMetrics {
            rate_hz: rate,
            report: Some(metrics(&truth, &trace.p_pred)?),
            note: None,
        });
    }
    Ok(out)
}

pub fn write_rate_metrics_csv(rows: &[RateMetrics], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rate_hz,mae_kw,rmse_kw,rmae,rrmse,note")?;
    for r in rows {
        match &r.report {
            Some(m) => writeln!(
                f,
                "{},{:.9},{:.9},{},{},",
                r.rate_hz,
                m.mae,
                m.rmse,
                m.rmae.map(|v| format!("{v:.9}")).unwrap_or_default(),
                m.rrmse.map(|v| format!("{v:.9}")).unwrap_or_default(),
            )?,
            None => writeln!(
                f,
                "{},,,,,{}",
                r.rate_hz,
                r.note.clone().unwrap_or_default()
            )?,
        }
    }
    Ok(())
}

// ── Parameter reporting ─────────────────────────────────────────────

/// Optional reference values to print beside the estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FactoryReference {
    pub cd: Option<f64>,
    pub crr: Option<f64>,
    pub mass: Option<f64>,
    pub paux: Option<f64>,
    pub eta: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamRow {
    pub name: &'static str,
    /// Bounded baseline value.
    pub baseline: f64,
    /// Median over the evaluation windows (time-varying parameters only).
    pub median: Option<f64>,
    /// First and third quartiles.
    pub iqr: Option<(f64, f64)>,
    pub factory: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
}

fn quartiles(values: &mut [f64]) -> (f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |frac: f64| -> f64 {
        let pos = frac * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        values[lo] * (1.0 - w) + values[hi] * w
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Bounded baselines plus median/IQR of the time-varying traces over the
/// evaluation windows.
pub fn param_report(
    model: &OperatorModel,
    spec: &VehicleSpec,
    windows: &WindowSet,
    factory: Option<&FactoryReference>,
) -> Result<ParamReport> {
    let bb = model.bounded_baselines(spec)?;
    let out = no_grad(|| model.forward(windows, spec))?;
    let mut eta = out.trace.eta_t.to_vec();
    let mut mu = out.trace.mu_t.to_vec();
    let (eta_q1, eta_med, eta_q3) = quartiles(&mut eta);
    let (mu_q1, mu_med, mu_q3) = quartiles(&mut mu);
    let paux_stats = out.trace.paux_t.as_ref().map(|t| {
        let mut p = t.to_vec();
        quartiles(&mut p)
    });
    let fr = factory.copied().unwrap_or_default();
    let rows = vec![
        ParamRow { name: "cd", baseline: bb[0], median: None, iqr: None, factory: fr.cd },
        ParamRow { name: "crr", baseline: bb[1], median: None, iqr: None, factory: fr.crr },
        ParamRow { name: "mass_kg", baseline: bb[2], median: None, iqr: None, factory: fr.mass },
        ParamRow {
            name: "paux_w",
            baseline: bb[3],
            median: paux_stats.map(|(_, m, _)| m),
            iqr: paux_stats.map(|(q1, _, q3)| (q1, q3)),
            factory: fr.paux,
        },
        ParamRow {
            name: "eta",
            baseline: bb[4],
            median: Some(eta_med),
            iqr: Some((eta_q1, eta_q3)),
            factory: fr.eta,
        },
        ParamRow {
            name: "mu",
            baseline: bb[5],
            median: Some(mu_med),
            iqr: Some((mu_q1, mu_q3)),
            factory: fr.mu,
        },
    ];
    Ok(ParamReport { rows })
}

impl ParamReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "parameter,baseline,median,q1,q3,factory")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{:.9},{},{},{},{}",
                r.name,
                r.baseline,
                r.median.map(|v| format!("{v:.9}")).unwrap_or_default(),
                r.iqr.map(|(q1, _)| format!("{q1:.9}")).unwrap_or_default(),
                r.iqr.map(|(_, q3)| format!("{q3:.9}")).unwrap_or_default(),
                r.factory.map(|v| format!("{v:.6}")).unwrap_or_default(),
            )?;
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from(format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            "parameter", "baseline", "median", "q1", "q3", "factory"
        ));
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>12.5} {:>12} {:>12} {:>12} {:>12}\n",
                r.name,
                r.baseline,
                fmt(r.median),
                fmt(r.iqr.map(|(q1, _)| q1)),
                fmt(r.iqr.map(|(_, q3)| q3)),
                fmt(r.factory),
            ));
        }
        s
    }
}
