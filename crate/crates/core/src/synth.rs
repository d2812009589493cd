//! Synthetic drive-log generation from known ground truth, with an
//! independent brute-force power oracle.
//!
//! The oracle is a straight-line scalar loop sharing no code with the
//! `physics` module; cross-checking the two is the backbone of desk-scale
//! verification, so keep it that way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::dataset::DriveLog;
use crate::error::{Error, Result};

/// Ground-truth parameter, either constant or a smooth function of speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamProfile {
    Constant(f64),
    /// `base + span·σ((v − center)/slope)`.
    SpeedSigmoid { base: f64, span: f64, center: f64, slope: f64 },
}

impl ParamProfile {
    pub fn value_at(&self, v: f64) -> f64 {
        match *self {
            ParamProfile::Constant(c) => c,
            ParamProfile::SpeedSigmoid { base, span, center, slope } => {
                base + span / (1.0 + (-(v - center) / slope).exp())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    /// Speed amplitude in m/s.
    pub amplitude: f64,
    pub freq_hz: f64,
    /// Phase in radians.
    pub phase: f64,
}

/// Linear speed change of `rate` m/s² active on `[t_start, t_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub t_start: f64,
    pub t_end: f64,
    pub rate: f64,
}

/// Interval where the vehicle sits still regardless of the rest of the
/// cycle spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Idle {
    pub t_start: f64,
    pub t_end: f64,
}

/// Speed profile: a base speed plus sinusoids and ramps, clipped at zero,
/// with optional idle segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleSpec {
    pub base_speed: f64,
    pub sinusoids: Vec<Sinusoid>,
    pub ramps: Vec<Ramp>,
    pub idles: Vec<Idle>,
}

impl Default for CycleSpec {
    fn default() -> CycleSpec {
        CycleSpec {
            base_speed: 15.0,
            sinusoids: vec![
                Sinusoid { amplitude: 4.0, freq_hz: 0.02, phase: 0.0 },
                Sinusoid { amplitude: 2.0, freq_hz: 0.05, phase: 1.0 },
                Sinusoid { amplitude: 0.6, freq_hz: 0.11, phase: 2.2 },
            ],
            ramps: Vec::new(),
            idles: Vec::new(),
        }
    }
}

impl CycleSpec {
    fn is_degenerate(&self) -> bool {
        self.sinusoids.iter().all(|s| s.amplitude == 0.0)
            && self.ramps.iter().all(|r| r.rate == 0.0)
    }
}

/// Ground truth plus generation settings for one synthetic log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub cd: f64,
    pub crr: f64,
    /// kg
    pub mass: f64,
    /// W
    pub paux: f64,
    pub eta: ParamProfile,
    pub mu: ParamProfile,
    /// m²
    pub frontal_area: f64,
    /// kg/m³
    pub air_density: f64,
    /// m/s²
    pub gravity: f64,
    pub fs: f64,
    /// s
    pub duration: f64,
    pub cycle: CycleSpec,
    /// Gaussian noise on power, kW.
    pub noise_std: f64,
    pub seed: u64,
    /// Constant pack voltage used for the synthesized volt/amp columns.
    pub pack_volts: f64,
}

impl Default for SynthConfig {
    /// Mid-size sedan truth on a mixed cruise cycle.
    fn default() -> SynthConfig {
        SynthConfig {
            cd: 0.23,
            crr: 0.0096,
            mass: 1977.0,
            paux: 1000.0,
            eta: ParamProfile::Constant(0.83),
            mu: ParamProfile::Constant(0.74),
            frontal_area: 2.2,
            air_density: 1.225,
            gravity: 9.81,
            fs: 10.0,
            duration: 600.0,
            cycle: CycleSpec::default(),
            noise_std: 0.0,
            seed: 7,
            pack_volts: 360.0,
        }
    }
}

/// A generated speed profile with its analytic derivative.
pub struct Cycle {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    /// Set when the cycle spec produces a constant speed.
    pub degenerate: bool,
}

/// Evaluates the cycle spec and its analytic time derivative on the
/// sample grid. Wherever the raw profile dips below zero (or an idle
/// interval applies) speed and acceleration are forced to zero.
pub fn gen_cycle(cfg: &SynthConfig) -> Result<Cycle> {
    if !(cfg.fs > 0.0) || !(cfg.duration > 0.0) {
        return Err(Error::Config(format!(
            "cycle: fs {} Hz and duration {} s must be positive",
            cfg.fs, cfg.duration
        )));
    }
    let n = (cfg.duration * cfg.fs).round() as usize;
    if n < 2 {
        return Err(Error::Config("cycle: fewer than 2 samples".into()));
    }
    let mut t = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let ti = i as f64 / cfg.fs;
        let mut vi = cfg.cycle.base_speed;
        let mut ai = 0.0;
        for s in &cfg.cycle.sinusoids {
            let w = 2.0 * PI * s.freq_hz;
            vi += s.amplitude * (w * ti + s.phase).sin();
            ai += s.amplitude * w * (w * ti + s.phase).cos();
        }
        for r in &cfg.cycle.ramps {
            if ti >= r.t_end {
                vi += r.rate * (r.t_end - r.t_start);
            } else if ti >= r.t_start {
                vi += r.rate * (ti - r.t_start);
                ai += r.rate;
            }
        }
        let idle = cfg.cycle.idles.iter().any(|s| ti >= s.t_start && ti < s.t_end);
        if idle || vi < 0.0 {
            vi = 0.0;
            ai = 0.0;
        }
        t.push(ti);
        v.push(vi);
        a.push(ai);
    }
    Ok(Cycle { t, v, a, degenerate: cfg.cycle.is_degenerate() })
}

/// Brute-force per-sample power oracle in kW.
///
/// Deliberately written as a plain scalar loop with its own arithmetic;
/// it must stay independent of the `physics` module. Gaussian noise of
/// `noise_std` kW is added when configured, seeded from the config.
pub fn forward_oracle(v: &[f64], a: &[f64], cfg: &SynthConfig) -> Result<Vec<f64>> {
    if v.len() != a.len() {
        return Err(Error::Shape(format!(
            "oracle: speed length {} vs acceleration length {}",
            v.len(),
            a.len()
        )));
    }
    let mut noise = if cfg.noise_std > 0.0 {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6F72_6163); // distinct stream per purpose
        let dist = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        Some((rng, dist))
    } else {
        None
    };
    let mut out = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        let vv = v[i];
        let aa = a[i];
        let eta = cfg.eta.value_at(vv);
        let mu = cfg.mu.value_at(vv);
        let pm = 0.5 * cfg.air_density * cfg.frontal_area * cfg.cd * vv * vv * vv
            + cfg.crr * cfg.mass * cfg.gravity * vv
            + cfg.mass * aa * vv;
        let mut pb = if pm >= 0.0 {
            pm / eta
        } else if aa < 0.0 {
            mu * pm
        } else {
            0.0
        };
        pb += cfg.paux;
        let mut kw = pb / 1000.0;
        if let Some((rng, dist)) = noise.as_mut() {
            kw += dist.sample(rng);
        }
        out.push(kw);
    }
    Ok(out)
}

/// Generates a complete drive log whose power column comes from
/// [`forward_oracle`]; voltage is constant and current is back-derived so
/// ingestion round-trips the power exactly.
pub fn gen_log(cfg: &SynthConfig) -> Result<DriveLog> {
    let cycle = gen_cycle(cfg)?;
    let p_bat = forward_oracle(&cycle.v, &cycle.a, cfg)?;
    let volt = vec![cfg.pack_volts; cycle.t.len()];
    let amp: Vec<f64> = p_bat.iter().map(|p| p * 1000.0 / cfg.pack_volts).collect();
    Ok(DriveLog { t: cycle.t, v: cycle.v, volt, amp, p_bat, fs: cfg.fs })
}

/// Writes a log in the default ingestion schema
/// (`t,speed_mps,pack_volts,pack_amps`).
pub fn write_log_csv(log: &DriveLog, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,speed_mps,pack_volts,pack_amps")?;
    for i in 0..log.len() {
        writeln!(
            f,
            "{:.6},{:.9},{:.6},{:.9}",
            log.t[i], log.v[i], log.volt[i], log.amp[i]
        )?;
    }
    Ok(())
}
