//! Differentiable longitudinal-EV power model and the bounding/gating
//! helpers that keep estimated parameters physically plausible.
//!
//! Mechanical wheel power decomposes into aerodynamic drag, rolling
//! resistance, and an inertial term; battery power divides propulsion by
//! motor efficiency, credits a fraction of deceleration power back through
//! regenerative braking, and adds a constant auxiliary draw. Everything is
//! computed in watts on raw (unstandardized) speed and acceleration;
//! callers convert to kW at the boundary.
//!
//! Regeneration subtracts from battery draw and can push battery power
//! negative during deceleration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Closed interval constraint for one physical parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Bounds {
        Bounds { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "{name} bounds [{}, {}] must satisfy lo < hi",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Whether auxiliary power is a single learned scalar or a third
/// time-varying head channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PauxMode {
    Static,
    Variable,
}

/// Fixed constants and per-parameter constraints for one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleSpec {
    /// Frontal area in m². Never identifiable from logs; must be supplied,
    /// and the recovered drag coefficient is only meaningful relative to it.
    pub frontal_area: f64,
    /// Air density in kg/m³.
    pub air_density: f64,
    /// Gravitational acceleration in m/s².
    pub gravity: f64,
    pub cd_bounds: Bounds,
    pub crr_bounds: Bounds,
    /// Effective mass bounds in kg.
    pub mass_bounds: Bounds,
    /// Auxiliary draw bounds in W.
    pub paux_bounds: Bounds,
    pub eta_bounds: Bounds,
    pub mu_bounds: Bounds,
    /// Speed-gate center V0 in m/s.
    pub gate_center: f64,
    /// Speed-gate slope in m/s.
    pub gate_slope: f64,
    /// Half-range of the time-varying efficiency offset.
    pub span_eta: f64,
    pub span_mu: f64,
    /// Half-range of the time-varying auxiliary offset in W (variable mode).
    pub span_paux: f64,
    /// Temperature of the offset-head tanh.
    pub head_temperature: f64,
    pub paux_mode: PauxMode,
}

impl Default for VehicleSpec {
    /// Mid-size sedan profile; every field is overridable per vehicle in
    /// the run config.
    fn default() -> VehicleSpec {
        VehicleSpec {
            frontal_area: 2.2,
            air_density: 1.225,
            gravity: 9.81,
            cd_bounds: Bounds::new(0.20, 0.30),
            crr_bounds: Bounds::new(0.005, 0.015),
            mass_bounds: Bounds::new(1500.0, 2500.0),
            paux_bounds: Bounds::new(0.0, 3000.0),
            eta_bounds: Bounds::new(0.60, 0.95),
            mu_bounds: Bounds::new(0.40, 0.90),
            gate_center: 18.0,
            gate_slope: 2.0,
            span_eta: 0.05,
            span_mu: 0.05,
            span_paux: 500.0,
            head_temperature: 1.0,
            paux_mode: PauxMode::Static,
        }
    }
}

impl VehicleSpec {
    pub fn validate(&self) -> Result<()> {
        self.cd_bounds.validate("cd")?;
        self.crr_bounds.validate("crr")?;
        self.mass_bounds.validate("mass")?;
        self.paux_bounds.validate("paux")?;
        self.eta_bounds.validate("eta")?;
        self.mu_bounds.validate("mu")?;
        if self.eta_bounds.lo <= 0.0 || self.eta_bounds.hi > 1.0 {
            return Err(Error::Config("eta bounds must lie in (0, 1]".into()));
        }
        if self.mu_bounds.lo < 0.0 || self.mu_bounds.hi > 1.0 {
            return Err(Error::Config("mu bounds must lie in [0, 1]".into()));
        }
        if !(self.frontal_area > 0.0 && self.air_density > 0.0 && self.gravity > 0.0) {
            return Err(Error::Config(
                "frontal area, air density and gravity must be positive".into(),
            ));
        }
        if !(self.gate_slope > 0.0) {
            return Err(Error::Config("gate slope must be positive".into()));
        }
        if self.span_eta < 0.0 || self.span_mu < 0.0 || self.span_paux < 0.0 {
            return Err(Error::Config("offset spans must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-timestep bounded physical parameters plus the scalar baselines,
/// ready for the power model.
pub struct ParamTrace {
    /// Bounded aerodynamic drag coefficient (scalar tensor).
    pub cd: Tensor,
    pub crr: Tensor,
    /// Effective mass in kg.
    pub mass: Tensor,
    /// Static auxiliary draw in W.
    pub paux0: Tensor,
    /// Motor efficiency per timestep, shape (B, L).
    pub eta_t: Tensor,
    /// Regenerative-braking efficiency per timestep, shape (B, L).
    pub mu_t: Tensor,
    /// Time-varying auxiliary draw in W when the third head channel is
    /// enabled; otherwise the model broadcasts `paux0`.
    pub paux_t: Option<Tensor>,
}

/// Wheel-side mechanical power in watts.
///
/// `P = ½ρA·Cd·v³ + Crr·mass·g·v + mass·a·v` on raw speed/acceleration.
/// Gradients flow through the three parameters, not through the signals.
pub fn mech_power(
    v: &Tensor,
    a: &Tensor,
    cd: &Tensor,
    crr: &Tensor,
    mass: &Tensor,
    spec: &VehicleSpec,
) -> Result<Tensor> {
    if v.shape() != a.shape() {
        return Err(Error::Shape(format!(
            "mech_power: v {:?} vs a {:?}",
            v.shape(),
            a.shape()
        )));
    }
    let bad = v.with_data(|d| d.iter().position(|x| *x < 0.0 || !x.is_finite()));
    if let Some(i) = bad {
        return Err(Error::Domain(format!(
            "mech_power: speed sample {i} is negative or non-finite"
        )));
    }
    let half_rho_a = 0.5 * spec.air_density * spec.frontal_area;
    let g = spec.gravity;
    let (drag_c, roll_c, inert_c) = v.with_data(|dv| {
        a.with_data(|da| {
            let drag: Vec<f64> = dv.iter().map(|x| half_rho_a * x * x * x).collect();
            let roll: Vec<f64> = dv.iter().map(|x| g * x).collect();
            let inert: Vec<f64> = dv.iter().zip(da.iter()).map(|(x, y)| x * y).collect();
            (drag, roll, inert)
        })
    });
    let shape = v.shape();
    let drag = cd.mul(&Tensor::from_vec(drag_c, shape)?)?;
    let roll = crr.mul(mass)?.mul(&Tensor::from_vec(roll_c, shape)?)?;
    let inert = mass.mul(&Tensor::from_vec(inert_c, shape)?)?;
    drag.add(&roll)?.add(&inert)
}

/// Battery power in watts:
/// `relu(P_m)/η_t − μ_t·relu(−P_m)·1[a<0] + P_aux`.
///
/// `paux` may be a scalar (broadcast) or match `p_m`'s shape.
pub fn battery_power(
    p_m: &Tensor,
    a: &Tensor,
    eta_t: &Tensor,
    mu_t: &Tensor,
    paux: &Tensor,
) -> Result<Tensor> {
    let bad = eta_t.with_data(|d| d.iter().position(|x| *x <= 0.0));
    if let Some(i) = bad {
        return Err(Error::Domain(format!(
            "battery_power: efficiency sample {i} is not positive"
        )));
    }
    let decel_mask: Vec<f64> =
        a.with_data(|d| d.iter().map(|x| if *x < 0.0 { 1.0 } else { 0.0 }).collect());
    let mask = Tensor::from_vec(decel_mask, a.shape())?;
    let draw = p_m.relu().div(eta_t)?;
    let regen = mu_t.mul(&p_m.neg().relu())?.mul(&mask)?;
    draw.sub(&regen)?.add(paux)
}

/// Sigmoid-bounded reparametrization: `lo + (hi − lo)·σ(x)`.
pub fn bound(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::Config(format!("bound: lo {lo} must be below hi {hi}")));
    }
    Ok(x.sigmoid().scale(hi - lo).shift(lo))
}

/// Inverse of [`bound`]: the raw value whose sigmoid-bounded image is
/// `value`. Requires `value` strictly inside `(lo, hi)`.
pub fn bound_inverse(value: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::Config(format!("bound: lo {lo} must be below hi {hi}")));
    }
    let p = (value - lo) / (hi - lo);
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!(
            "bound_inverse: {value} is not strictly inside [{lo}, {hi}]"
        )));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Smooth speed gate `σ((v − V0)/S_v)` in `[0, 1]`, closed at low speed.
pub fn gate(v: &Tensor, v0: f64, s_v: f64) -> Result<Tensor> {
    if !(s_v > 0.0) {
        return Err(Error::Config(format!("gate: slope {s_v} must be positive")));
    }
    Ok(v.shift(-v0).scale(1.0 / s_v).sigmoid())
}

/// Forms a bounded time-varying series from a baseline and gated offsets:
/// `clip(base + span·(w ⊙ Δ), lo, hi)`.
pub fn assemble_time_varying(
    base: &Tensor,
    delta: &Tensor,
    span: f64,
    w: &Tensor,
    lo: f64,
    hi: f64,
) -> Result<Tensor> {
    Ok(w.mul(delta)?.scale(span).add(base)?.clamp(lo, hi))
}
