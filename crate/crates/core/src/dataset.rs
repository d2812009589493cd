//! Drive-log ingestion, standardization, and training-window assembly.
//!
//! Logs arrive as UTF-8 CSV with a header row; the schema section of the
//! run config maps column names and units. Battery power is derived as
//! `volt · amp / 1000` kW with discharge positive. Windows carry both raw
//! (physical-unit) and standardized copies of speed and acceleration plus
//! a normalized positional grid; the physics side always consumes the raw
//! copies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{sg_derivative, sg_smooth, SgConfig};
use crate::tensor::Tensor;

/// Uniformly sampled drive log.
///
/// Time is strictly increasing; the nominal sample rate is inferred from
/// the median step. Individual steps that deviate by more than 1% of the
/// nominal period are treated as gaps, and windows crossing them are
/// dropped rather than imputed.
#[derive(Debug, Clone)]
pub struct DriveLog {
    /// Timestamps in seconds.
    pub t: Vec<f64>,
    /// Speed in m/s.
    pub v: Vec<f64>,
    /// Pack voltage in V.
    pub volt: Vec<f64>,
    /// Pack current in A, discharge positive.
    pub amp: Vec<f64>,
    /// Battery power in kW, discharge positive.
    pub p_bat: Vec<f64>,
    /// Nominal sample rate in Hz.
    pub fs: f64,
}

impl DriveLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sample indices `i` where the step `t[i] -> t[i+1]` breaks the
    /// uniform grid.
    pub fn gap_steps(&self) -> Vec<usize> {
        let period = 1.0 / self.fs;
        let tol = 0.01 * period;
        (0..self.t.len().saturating_sub(1))
            .filter(|&i| ((self.t[i + 1] - self.t[i]) - period).abs() >= tol)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedUnit {
    Mps,
    Kph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    DischargePositive,
    DischargeNegative,
}

/// Column mapping and unit declarations for one CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogSchema {
    pub time_col: String,
    pub speed_col: String,
    pub volt_col: String,
    pub amp_col: String,
    pub speed_unit: SpeedUnit,
    pub current_sign: SignConvention,
}

impl Default for LogSchema {
    fn default() -> LogSchema {
        LogSchema {
            time_col: "t".into(),
            speed_col: "speed_mps".into(),
            volt_col: "pack_volts".into(),
            amp_col: "pack_amps".into(),
            speed_unit: SpeedUnit::Mps,
            current_sign: SignConvention::DischargePositive,
        }
    }
}

/// Parses a CSV drive log, converts units, derives battery power, and
/// infers the sample rate from the median time step.
pub fn load_log(path: &Path, schema: &LogSchema) -> Result<DriveLog> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column '{name}' in {}", path.display())))
    };
    let (ti, vi, ui, ai) = (
        col(&schema.time_col)?,
        col(&schema.speed_col)?,
        col(&schema.volt_col)?,
        col(&schema.amp_col)?,
    );

    let mut t = Vec::new();
    let mut v = Vec::new();
    let mut volt = Vec::new();
    let mut amp = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 2; // header occupies row 1
        let rec = rec.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        let get = |i: usize, name: &str| -> Result<f64> {
            let raw = rec
                .get(i)
                .ok_or_else(|| Error::Parse(format!("row {row}: missing field '{name}'")))?;
            let val: f64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {row}: '{raw}' is not a number ({name})")))?;
            if !val.is_finite() {
                return Err(Error::Parse(format!("row {row}: non-finite value in '{name}'")));
            }
            Ok(val)
        };
        t.push(get(ti, &schema.time_col)?);
        let mut speed = get(vi, &schema.speed_col)?;
        if schema.speed_unit == SpeedUnit::Kph {
            speed /= 3.6;
        }
        v.push(speed);
        volt.push(get(ui, &schema.volt_col)?);
        let mut current = get(ai, &schema.amp_col)?;
        if schema.current_sign == SignConvention::DischargeNegative {
            current = -current;
        }
        amp.push(current);
    }
    if t.len() < 2 {
        return Err(Error::Parse(format!(
            "{}: needs at least 2 data rows, found {}",
            path.display(),
            t.len()
        )));
    }
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            return Err(Error::Parse(format!(
                "row {}: time is not strictly increasing",
                i + 2
            )));
        }
    }
    let mut steps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = steps[steps.len() / 2];
    let fs = 1.0 / median;
    let p_bat: Vec<f64> = volt.iter().zip(&amp).map(|(u, i)| u * i / 1000.0).collect();
    Ok(DriveLog { t, v, volt, amp, p_bat, fs })
}

/// Per-channel z-score statistics for speed and acceleration.
///
/// Standard deviations are floored at `1e-6` so constant-speed logs do
/// not produce degenerate scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean_v: f64,
    pub std_v: f64,
    pub mean_a: f64,
    pub std_a: f64,
}

const STD_FLOOR: f64 = 1e-6;

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

impl Scaler {
    pub fn fit(v: &[f64], a: &[f64]) -> Scaler {
        let (mean_v, std_v) = mean_std(v);
        let (mean_a, std_a) = mean_std(a);
        Scaler { mean_v, std_v, mean_a, std_a }
    }

    pub fn apply_v(&self, x: f64) -> f64 {
        (x - self.mean_v) / self.std_v
    }

    pub fn apply_a(&self, x: f64) -> f64 {
        (x - self.mean_a) / self.std_a
    }

    pub fn invert_v(&self, z: f64) -> f64 {
        z * self.std_v + self.mean_v
    }

    pub fn invert_a(&self, z: f64) -> f64 {
        z * self.std_a + self.mean_a
    }
}

/// Standardized training windows with raw physical copies.
///
/// All `(B, L)` arrays are row-major; `xi` is the shared positional grid
/// `ξ_t = t/(L−1)` restarting at 0 in every window.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub v_raw: Vec<f64>,
    pub a_raw: Vec<f64>,
    /// Battery power target in kW.
    pub p: Vec<f64>,
    pub v_n: Vec<f64>,
    pub a_n: Vec<f64>,
    pub xi: Vec<f64>,
    /// Number of windows.
    pub b: usize,
    /// Window length.
    pub l: usize,
    pub stride: usize,
    /// Source sample index of each window start.
    pub starts: Vec<usize>,
    pub scaler: Scaler,
}

impl WindowSet {
    pub fn v_raw_tensor(&self) -> Tensor {
        Tensor::from_vec(self.v_raw.clone(), &[self.b, self.l]).expect("window shape")
    }

    pub fn a_raw_tensor(&self) -> Tensor {
        Tensor::from_vec(self.a_raw.clone(), &[self.b, self.l]).expect("window shape")
    }

    pub fn p_tensor(&self) -> Tensor {
        Tensor::from_vec(self.p.clone(), &[self.b, self.l]).expect("window shape")
    }

    /// Stacked operator input `[v_n, a_n, ξ]` of shape `(B, L, 3)`.
    pub fn input_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.b * self.l * 3);
        for w in 0..self.b {
            for t in 0..self.l {
                data.push(self.v_n[w * self.l + t]);
                data.push(self.a_n[w * self.l + t]);
                data.push(self.xi[t]);
            }
        }
        Tensor::from_vec(data, &[self.b, self.l, 3]).expect("window shape")
    }

    /// Rows (windows) selected by index, as a new `WindowSet`.
    pub fn select(&self, rows: &[usize]) -> WindowSet {
        let take = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows.len() * self.l);
            for &r in rows {
                out.extend_from_slice(&src[r * self.l..(r + 1) * self.l]);
            }
            out
        };
        WindowSet {
            v_raw: take(&self.v_raw),
            a_raw: take(&self.a_raw),
            p: take(&self.p),
            v_n: take(&self.v_n),
            a_n: take(&self.a_n),
            xi: self.xi.clone(),
            b: rows.len(),
            l: self.l,
            stride: self.stride,
            starts: rows.iter().map(|&r| self.starts[r]).collect(),
            scaler: self.scaler,
        }
    }
}

/// Smooths speed, derives acceleration, and cuts stride-aligned windows.
///
/// When `scaler` is absent one is fitted on these windows (training split
/// only); otherwise the given statistics are applied. Windows that would
/// cross a timing gap are dropped.
pub fn make_windows(
    log: &DriveLog,
    sg: &SgConfig,
    l: usize,
    stride: usize,
    scaler: Option<&Scaler>,
) -> Result<WindowSet> {
    if l < 2 {
        return Err(Error::Config(format!("window length {l} must be at least 2")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if (sg.fs - log.fs).abs() > 1e-9 * log.fs.max(1.0) {
        return Err(Error::Config(format!(
            "sg config rate {} Hz does not match log rate {} Hz",
            sg.fs, log.fs
        )));
    }
    let n = log.len();
    if n < l {
        return Err(Error::InvalidLength(format!(
            "log has {n} samples, window needs {l}"
        )));
    }
    let v_s = sg_smooth(&log.v, sg)?;
    let a = sg_derivative(&log.v, sg)?;

    let gaps = log.gap_steps();
    let crosses_gap = |start: usize| gaps.iter().any(|&g| g >= start && g + 1 < start + l);

    let mut starts = Vec::new();
    let mut s = 0usize;
    while s + l <= n {
        if !crosses_gap(s) {
            starts.push(s);
        }
        s += stride;
    }
    if starts.is_empty() {
        return Err(Error::InvalidLength(
            "no complete windows free of timing gaps".into(),
        ));
    }
    let b = starts.len();
    let mut v_raw = Vec::with_capacity(b * l);
    let mut a_raw = Vec::with_capacity(b * l);
    let mut p = Vec::with_capacity(b * l);
    for &st in &starts {
        v_raw.extend_from_slice(&v_s[st..st + l]);
        a_raw.extend_from_slice(&a[st..st + l]);
        p.extend_from_slice(&log.p_bat[st..st + l]);
    }
    let scaler = match scaler {
        Some(s) => *s,
        None => Scaler::fit(&v_raw, &a_raw),
    };
    let v_n: Vec<f64> = v_raw.iter().map(|&x| scaler.apply_v(x)).collect();
    let a_n: Vec<f64> = a_raw.iter().map(|&x| scaler.apply_a(x)).collect();
    let xi: Vec<f64> = (0..l).map(|t| t as f64 / (l - 1) as f64).collect();
    Ok(WindowSet { v_raw, a_raw, p, v_n, a_n, xi, b, l, stride, starts, scaler })
}

/// Contiguous prefix/suffix split; the scaler is fitted on the prefix only.
///
/// Errors if either side would end up shorter than `min_len` samples.
pub fn split_chronological(
    log: &DriveLog,
    frac_train: f64,
    min_len: usize,
) -> Result<(DriveLog, DriveLog)> {
    if !(frac_train > 0.0 && frac_train < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {frac_train} must lie in (0, 1)"
        )));
    }
    let n = log.len();
    let n_train = (frac_train * n as f64).floor() as usize;
    if n_train < min_len || n - n_train < min_len {
        return Err(Error::Config(format!(
            "split {n_train}/{} leaves a side shorter than {min_len} samples",
            n - n_train
        )));
    }
    let cut = |lo: usize, hi: usize| DriveLog {
        t: log.t[lo..hi].to_vec(),
        v: log.v[lo..hi].to_vec(),
        volt: log.volt[lo..hi].to_vec(),
        amp: log.amp[lo..hi].to_vec(),
        p_bat: log.p_bat[lo..hi].to_vec(),
        fs: log.fs,
    };
    Ok((cut(0, n_train), cut(n_train, n)))
}

/// Band-limited resampling of a whole log to a new rate.
///
/// Speed and power are resampled in the Fourier domain; current is
/// re-derived from power and voltage so `p == volt·amp/1000` keeps
/// holding exactly. Sub-zero speed overshoot from the resampler is
/// clipped at zero.
pub fn resample_log(log: &DriveLog, fs_out: f64) -> Result<DriveLog> {
    let v: Vec<f64> = crate::signal::resample(&log.v, log.fs, fs_out)?
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let p_bat = crate::signal::resample(&log.p_bat, log.fs, fs_out)?;
    let volt = crate::signal::resample(&log.volt, log.fs, fs_out)?;
    let n = v.len();
    let t0 = log.t.first().copied().unwrap_or(0.0);
    let t: Vec<f64> = (0..n).map(|i| t0 + i as f64 / fs_out).collect();
    let amp: Vec<f64> = p_bat
        .iter()
        .zip(&volt)
        .map(|(p, u)| if u.abs() > 1e-9 { p * 1000.0 / u } else { 0.0 })
        .collect();
    Ok(DriveLog { t, v, volt, amp, p_bat, fs: fs_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn uniform_log(n: usize, fs: f64, v: impl Fn(usize) -> f64) -> DriveLog {
        let t: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
        let v: Vec<f64> = (0..n).map(v).collect();
        let volt = vec![360.0; n];
        let amp: Vec<f64> = (0..n).map(|i| 10.0 + (i as f64 * 0.01).sin()).collect();
        let p_bat: Vec<f64> = volt.iter().zip(&amp).map(|(u, i)| u * i / 1000.0).collect();
        DriveLog { t, v, volt, amp, p_bat, fs }
    }

    #[test]
    fn three_row_csv_derives_power_and_rate() {
        let f = write_csv(
            "t,speed_mps,pack_volts,pack_amps\n0,10,350,20\n0.1,10,350,20\n0.2,10,350,20\n",
        );
        let log = load_log(f.path(), &LogSchema::default()).unwrap();
        assert_eq!(log.len(), 3);
        for p in &log.p_bat {
            assert!((p - 7.0).abs() < 1e-12);
        }
        assert!((log.fs - 10.0).abs() < 1e-9);
    }

    #[test]
    fn empty_and_malformed_files_are_parse_errors() {
        let f = write_csv("");
        assert!(matches!(
            load_log(f.path(), &LogSchema::default()),
            Err(Error::Parse(_))
        ));
        let f = write_csv("t,speed_mps,pack_volts,pack_amps\n");
        assert!(matches!(
            load_log(f.path(), &LogSchema::default()),
            Err(Error::Parse(_))
        ));
        let f = write_csv("t,speed_mps,pack_volts,pack_amps\n0,10,350,20\n0.1,NaN,350,20\n");
        let err = load_log(f.path(), &LogSchema::default()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        // Missing column names the offender.
        let f = write_csv("t,speed,pack_volts,pack_amps\n0,10,350,20\n0.1,10,350,20\n");
        let err = load_log(f.path(), &LogSchema::default()).unwrap_err();
        assert!(err.to_string().contains("speed_mps"), "{err}");
    }

    #[test]
    fn non_monotonic_time_is_rejected_with_row() {
        let f = write_csv("t,speed_mps,pack_volts,pack_amps\n0,10,350,20\n0.1,10,350,20\n0.1,10,350,20\n");
        let err = load_log(f.path(), &LogSchema::default()).unwrap_err();
        assert!(err.to_string().contains("row 4"), "{err}");
    }

    #[test]
    fn kph_conversion() {
        let f = write_csv("t,speed_kph,pack_volts,pack_amps\n0,36,350,20\n0.1,36,350,20\n");
        let schema = LogSchema {
            speed_col: "speed_kph".into(),
            speed_unit: SpeedUnit::Kph,
            ..LogSchema::default()
        };
        let log = load_log(f.path(), &schema).unwrap();
        assert!((log.v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn discharge_negative_convention_flips_current() {
        let f = write_csv("t,speed_mps,pack_volts,pack_amps\n0,10,350,-20\n0.1,10,350,-20\n");
        let schema = LogSchema {
            current_sign: SignConvention::DischargeNegative,
            ..LogSchema::default()
        };
        let log = load_log(f.path(), &schema).unwrap();
        assert!((log.p_bat[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn window_counts() {
        let sg = SgConfig::default_for(10.0).unwrap();
        let log = uniform_log(128, 10.0, |i| 10.0 + (i as f64 * 0.05).sin());
        let w = make_windows(&log, &sg, 128, 32, None).unwrap();
        assert_eq!(w.b, 1);

        let log = uniform_log(256, 10.0, |i| 10.0 + (i as f64 * 0.05).sin());
        let w = make_windows(&log, &sg, 128, 32, None).unwrap();
        assert_eq!(w.b, 5); // floor((256-128)/32)+1

        let log = uniform_log(100, 10.0, |i| 10.0 + (i as f64 * 0.05).sin());
        assert!(matches!(
            make_windows(&log, &sg, 128, 32, None),
            Err(Error::InvalidLength(_))
        ));
    }

    #[test]
    fn standardized_channels_have_zero_mean_unit_std() {
        let sg = SgConfig::default_for(10.0).unwrap();
        let log = uniform_log(512, 10.0, |i| 12.0 + 3.0 * (i as f64 * 0.07).sin());
        let w = make_windows(&log, &sg, 128, 32, None).unwrap();
        for chan in [&w.v_n, &w.a_n] {
            let n = chan.len() as f64;
            let mean: f64 = chan.iter().sum::<f64>() / n;
            let var: f64 = chan.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
        }
        // Raw copies invert the standardized ones.
        for i in 0..w.v_raw.len() {
            assert!((w.v_raw[i] - w.scaler.invert_v(w.v_n[i])).abs() < 1e-12);
            assert!((w.a_raw[i] - w.scaler.invert_a(w.a_n[i])).abs() < 1e-12);
        }
        // Positional grid pins 0 and 1.
        assert_eq!(w.xi[0], 0.0);
        assert_eq!(*w.xi.last().unwrap(), 1.0);
        assert!(w.xi.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn windows_reconstruct_source_samples() {
        let sg = SgConfig::default_for(10.0).unwrap();
        let log = uniform_log(320, 10.0, |i| 10.0 + (i as f64 * 0.03).cos());
        let w = make_windows(&log, &sg, 128, 32, None).unwrap();
        let smooth = sg_smooth(&log.v, &sg).unwrap();
        for (wi, &st) in w.starts.iter().enumerate() {
            for t in 0..w.l {
                assert_eq!(w.v_raw[wi * w.l + t], smooth[st + t]);
                assert_eq!(w.p[wi * w.l + t], log.p_bat[st + t]);
            }
        }
    }

    #[test]
    fn gap_windows_are_dropped() {
        let sg = SgConfig::default_for(10.0).unwrap();
        let mut log = uniform_log(300, 10.0, |i| 10.0 + (i as f64 * 0.05).sin());
        // Introduce a 2 s hole after sample 150.
        for i in 151..log.len() {
            log.t[i] += 2.0;
        }
        let w = make_windows(&log, &sg, 128, 32, None).unwrap();
        for &st in &w.starts {
            assert!(st + 128 <= 150 || st > 150, "window at {st} crosses the gap");
        }
    }

    #[test]
    fn chronological_split() {
        let log = uniform_log(1000, 10.0, |i| 10.0 + (i as f64 * 0.01).sin());
        let (tr, va) = split_chronological(&log, 0.8, 128).unwrap();
        assert_eq!(tr.len(), 800);
        assert_eq!(va.len(), 200);
        assert_eq!(tr.fs, log.fs);
        assert_eq!(va.fs, log.fs);
        assert!(va.t[0] > tr.t[tr.len() - 1]);
        assert!(matches!(
            split_chronological(&log, 0.05, 128),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_chronological(&log, 1.5, 128),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scaler_from_constant_suffix_does_not_blow_up() {
        let sg = SgConfig::default_for(10.0).unwrap();
        let mut log = uniform_log(1000, 10.0, |i| 10.0 + 2.0 * (i as f64 * 0.05).sin());
        for i in 800..1000 {
            log.v[i] = 15.0; // constant-speed tail
        }
        let (tr, va) = split_chronological(&log, 0.8, 128).unwrap();
        let wtr = make_windows(&tr, &sg, 128, 32, None).unwrap();
        let wva = make_windows(&va, &sg, 128, 32, Some(&wtr.scaler)).unwrap();
        assert!(wva.v_n.iter().all(|x| x.is_finite()));
        let cs = Scaler::fit(&vec![15.0; 64], &vec![0.0; 64]);
        assert!(cs.std_v >= 1e-6 && cs.std_a >= 1e-6);
    }

    proptest! {
        #[test]
        fn prop_scaler_round_trip(vals in proptest::collection::vec(-50.0f64..50.0, 8..64)) {
            let acc: Vec<f64> = vals.iter().map(|v| v * 0.1).collect();
            let s = Scaler::fit(&vals, &acc);
            for &x in &vals {
                prop_assert!((s.invert_v(s.apply_v(x)) - x).abs() < 1e-12);
            }
            for &x in &acc {
                prop_assert!((s.invert_a(s.apply_a(x)) - x).abs() < 1e-12);
            }
        }
    }
}
