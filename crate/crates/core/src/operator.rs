//! The spectral parameter operator: a lift network, residual spectral
//! blocks, and lightweight heads that turn speed/acceleration windows into
//! bounded physical-parameter traces plus a residual power buffer.
//!
//! Each spectral block adds `gelu(S(x) + MLP(x))` to its input, where the
//! spectral path `S` transforms the sequence axis with a truncated real
//! FFT, mixes channels per retained mode with learned complex matrices,
//! zeroes every higher mode, and transforms back. Truncation keeps the
//! map tolerant to sampling-rate changes; the heads stay zero-initialized
//! so a fresh model predicts pure physics at the bound midpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::physics::{
    assemble_time_varying, battery_power, bound, gate, mech_power, ParamTrace, PauxMode,
    VehicleSpec,
};
use crate::tensor::{no_grad, Parameter, Tensor};

/// Architecture settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    /// Retained Fourier modes per spectral layer.
    pub n_modes: usize,
    /// Channel width of the trunk.
    pub width: usize,
    pub n_layers: usize,
    /// Hidden width of the lift MLP.
    pub lift_hidden: usize,
    /// Offset-head channels: 2 (efficiencies) or 3 (plus auxiliary power).
    pub var_channels: usize,
    /// Window length the model operates on.
    pub l: usize,
}

impl Default for OperatorConfig {
    fn default() -> OperatorConfig {
        OperatorConfig {
            n_modes: 4,
            width: 128,
            n_layers: 4,
            lift_hidden: 256,
            var_channels: 2,
            l: 128,
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0
            || self.width == 0
            || self.n_layers == 0
            || self.lift_hidden == 0
            || self.l < 2
        {
            return Err(Error::Config("operator: all extents must be positive".into()));
        }
        if self.n_modes > self.l / 2 + 1 {
            return Err(Error::Config(format!(
                "operator: {} modes exceed the {} spectrum bins of a length-{} window",
                self.n_modes,
                self.l / 2 + 1,
                self.l
            )));
        }
        if self.var_channels != 2 && self.var_channels != 3 {
            return Err(Error::Config(format!(
                "operator: var_channels must be 2 or 3, got {}",
                self.var_channels
            )));
        }
        Ok(())
    }
}

/// Per-component parameter tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub lift: usize,
    pub spectral: usize,
    pub pointwise: usize,
    pub buffer_head: usize,
    pub var_head: usize,
    pub baselines: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.lift + self.spectral + self.pointwise + self.buffer_head + self.var_head
            + self.baselines
    }
}

/// Closed-form parameter count of a configuration.
pub fn count_params(cfg: &OperatorConfig) -> ParamCount {
    let h = cfg.lift_hidden;
    let w = cfg.width;
    ParamCount {
        lift: (3 * h + h) + (h * w + w),
        spectral: cfg.n_layers * 2 * cfg.n_modes * w * w,
        pointwise: cfg.n_layers * 2 * (w * w + w),
        buffer_head: w + 1,
        var_head: (w + 1) * cfg.var_channels,
        baselines: 6,
    }
}

/// Lowest mode count that still covers the content the smoothing filter
/// lets through: the highest kept bin `(m−1)·Δf` must reach the filter
/// cutoff `fs / window`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeBound {
    /// Smoothing-filter cutoff in Hz.
    pub cutoff_hz: f64,
    /// Spectrum bin width `fs / L` in Hz.
    pub bin_hz: f64,
    /// `cutoff/bin + 1` before rounding.
    pub raw: f64,
    /// Conservative mode count, `ceil(raw)`.
    pub minimum_modes: usize,
}

pub fn mode_bound(fs: f64, sg_window: usize, l: usize) -> ModeBound {
    let cutoff_hz = fs / sg_window as f64;
    let bin_hz = fs / l as f64;
    let raw = cutoff_hz / bin_hz + 1.0;
    ModeBound { cutoff_hz, bin_hz, raw, minimum_modes: raw.ceil() as usize }
}

// ── Truncated spectral convolution ──────────────────────────────────

/// Trig tables for the `m` retained modes of a length-`l` window.
struct ModeTables {
    /// `cos(2πkt/l)` laid out `(m, l)`.
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// One-sided weight per mode: 1 for DC (and Nyquist), else 2.
    fold: Vec<f64>,
}

fn mode_tables(m: usize, l: usize) -> ModeTables {
    let mut cos = Vec::with_capacity(m * l);
    let mut sin = Vec::with_capacity(m * l);
    for k in 0..m {
        for t in 0..l {
            let ang = 2.0 * std::f64::consts::PI * (k as f64) * (t as f64) / l as f64;
            cos.push(ang.cos());
            sin.push(ang.sin());
        }
    }
    let fold = (0..m)
        .map(|k| if k == 0 || (l % 2 == 0 && k == l / 2) { 1.0 } else { 2.0 })
        .collect();
    ModeTables { cos, sin, fold }
}

/// Forward DFT restricted to the lowest `m` bins of every channel:
/// `bins[k][w] = Σ_t x[t][w]·e^{−2πikt/l}`, laid out `(m, 2, W)`.
fn project_modes(x: &[f64], l: usize, w: usize, tab: &ModeTables, m: usize, bins: &mut [f64]) {
    bins.iter_mut().for_each(|v| *v = 0.0);
    for t in 0..l {
        let row = &x[t * w..(t + 1) * w];
        for k in 0..m {
            let ct = tab.cos[k * l + t];
            let st = tab.sin[k * l + t];
            let (re, im) = bins[k * 2 * w..(k + 1) * 2 * w].split_at_mut(w);
            for j in 0..w {
                re[j] += ct * row[j];
                im[j] -= st * row[j];
            }
        }
    }
}

/// Per-mode complex channel mixing: `mixed[k] = binsᵀ[k] · R[k]`.
fn mix_modes(
    bins: &[f64],
    r_re: &[f64],
    r_im: &[f64],
    w: usize,
    m: usize,
    mixed: &mut [f64],
) {
    mixed.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..m {
        let (bre, bim) = bins[k * 2 * w..(k + 1) * 2 * w].split_at(w);
        let (mre, mim) = mixed[k * 2 * w..(k + 1) * 2 * w].split_at_mut(w);
        for ci in 0..w {
            let xr = bre[ci];
            let xi = bim[ci];
            let wr = &r_re[(k * w + ci) * w..(k * w + ci + 1) * w];
            let wi = &r_im[(k * w + ci) * w..(k * w + ci + 1) * w];
            for co in 0..w {
                mre[co] += wr[co] * xr - wi[co] * xi;
                mim[co] += wr[co] * xi + wi[co] * xr;
            }
        }
    }
}

/// Hermitian adjoint of [`mix_modes`], mapping mixed-space values back to
/// channel space.
fn mix_modes_adjoint(
    gm: &[f64],
    r_re: &[f64],
    r_im: &[f64],
    w: usize,
    m: usize,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..m {
        let (gre, gim) = gm[k * 2 * w..(k + 1) * 2 * w].split_at(w);
        let (ore, oim) = out[k * 2 * w..(k + 1) * 2 * w].split_at_mut(w);
        for ci in 0..w {
            let wr = &r_re[(k * w + ci) * w..(k * w + ci + 1) * w];
            let wi = &r_im[(k * w + ci) * w..(k * w + ci + 1) * w];
            let mut sr = 0.0;
            let mut si = 0.0;
            for co in 0..w {
                sr += wr[co] * gre[co] + wi[co] * gim[co];
                si += -wi[co] * gre[co] + wr[co] * gim[co];
            }
            ore[ci] = sr;
            oim[ci] = si;
        }
    }
}

/// Real inverse over the retained bins with `1/l` normalization:
/// `y[t][w] = (1/l)·Σ_k fold_k·(re[k][w]·cos − im[k][w]·sin)`.
///
/// The imaginary part of the DC (and Nyquist) bin is dropped, matching
/// the inverse-FFT convention used everywhere else.
fn expand_modes(mixed: &[f64], l: usize, w: usize, tab: &ModeTables, m: usize, y: &mut [f64]) {
    let inv = 1.0 / l as f64;
    for t in 0..l {
        let row = &mut y[t * w..(t + 1) * w];
        row.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..m {
            let scale = tab.fold[k] * inv;
            let ct = scale * tab.cos[k * l + t];
            let st = scale * tab.sin[k * l + t];
            let (re, im) = mixed[k * 2 * w..(k + 1) * 2 * w].split_at(w);
            if k == 0 || (l % 2 == 0 && k == l / 2) {
                for j in 0..w {
                    row[j] += ct * re[j];
                }
            } else {
                for j in 0..w {
                    row[j] += ct * re[j] - st * im[j];
                }
            }
        }
    }
}

/// The spectral path `irfft(R ⊙ P_m(rfft(x)))` along the sequence axis of
/// `(B, L, W)`, evaluated directly on the `m` retained bins. Higher modes
/// never contribute, so projecting onto the kept bins, mixing channels,
/// and expanding back is the same map without the zero-padded full
/// spectra.
fn spectral_conv(x: &Tensor, r_re: &Tensor, r_im: &Tensor, m: usize) -> Result<Tensor> {
    use rayon::prelude::*;
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("spectral_conv: need (B, L, W), got {:?}", shape)));
    }
    let (batch, l, w) = (shape[0], shape[1], shape[2]);
    if r_re.shape() != [m, w, w] || r_im.shape() != [m, w, w] {
        return Err(Error::Shape(format!(
            "spectral_conv: weights {:?} for width {w}, {m} modes",
            r_re.shape()
        )));
    }
    if m > l / 2 + 1 {
        return Err(Error::Shape(format!(
            "spectral_conv: {m} modes exceed the {} bins of length {l}",
            l / 2 + 1
        )));
    }

    let (xc, rrc, ric) = (x.clone(), r_re.clone(), r_im.clone());
    let out = xc.with_data(|dx| {
        rrc.with_data(|dr| {
            ric.with_data(|di| {
                let tab = mode_tables(m, l);
                let mut out = vec![0.0; dx.len()];
                out.par_chunks_mut(l * w)
                    .zip(dx.par_chunks(l * w))
                    .for_each(|(yb, xb)| {
                        let mut bins = vec![0.0; m * 2 * w];
                        let mut mixed = vec![0.0; m * 2 * w];
                        project_modes(xb, l, w, &tab, m, &mut bins);
                        mix_modes(&bins, dr, di, w, m, &mut mixed);
                        expand_modes(&mixed, l, w, &tab, m, yb);
                    });
                out
            })
        })
    });

    Ok(Tensor::make_op(
        out,
        shape,
        vec![xc.clone(), rrc.clone(), ric.clone()],
        move |g| {
            use rayon::prelude::*;
            let tab = mode_tables(m, l);
            // Upstream gradient pulled back to mixed-bin space:
            // d mixed_re[k][w] = (fold_k/l)·Σ_t g[t][w]·cos,
            // d mixed_im[k][w] = −(fold_k/l)·Σ_t g[t][w]·sin,
            // which is the projection with folded scaling.
            let gmix_of = |gb: &[f64], buf: &mut Vec<f64>| {
                project_modes(gb, l, w, &tab, m, buf);
                let inv = 1.0 / l as f64;
                for k in 0..m {
                    let s = tab.fold[k] * inv;
                    for v in &mut buf[k * 2 * w..(k + 1) * 2 * w] {
                        *v *= s;
                    }
                }
                // Dropped imaginary parts receive no gradient.
                for j in 0..w {
                    buf[w + j] = 0.0;
                }
                if l % 2 == 0 && m == l / 2 + 1 {
                    let k = l / 2;
                    for j in 0..w {
                        buf[k * 2 * w + w + j] = 0.0;
                    }
                }
            };

            if xc.requires_grad() {
                let gx = rrc.with_data(|dr| {
                    ric.with_data(|di| {
                        let mut gx = vec![0.0; batch * l * w];
                        gx.par_chunks_mut(l * w)
                            .zip(g.par_chunks(l * w))
                            .for_each(|(gxb, gb)| {
                                let mut gmix = vec![0.0; m * 2 * w];
                                let mut gbins = vec![0.0; m * 2 * w];
                                gmix_of(gb, &mut gmix);
                                mix_modes_adjoint(&gmix, dr, di, w, m, &mut gbins);
                                // d x[t][w] = Σ_k re·cos − im·(−sin)… the
                                // projection defined bins_im with a minus,
                                // so the pullback is cos·re − sin·im with
                                // unit folding.
                                for t in 0..l {
                                    let row = &mut gxb[t * w..(t + 1) * w];
                                    for k in 0..m {
                                        let ct = tab.cos[k * l + t];
                                        let st = tab.sin[k * l + t];
                                        let (re, im) =
                                            gbins[k * 2 * w..(k + 1) * 2 * w].split_at(w);
                                        for j in 0..w {
                                            row[j] += ct * re[j] - st * im[j];
                                        }
                                    }
                                }
                            });
                        gx
                    })
                });
                xc.accum_grad_vec(gx);
            }
            if rrc.requires_grad() || ric.requires_grad() {
                let (grr, gri) = xc.with_data(|dx| {
                    // Projections per window in parallel, then a fixed-order
                    // accumulation over windows for determinism.
                    let per_b: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
                        .into_par_iter()
                        .map(|b| {
                            let mut bins = vec![0.0; m * 2 * w];
                            let mut gmix = vec![0.0; m * 2 * w];
                            project_modes(&dx[b * l * w..(b + 1) * l * w], l, w, &tab, m, &mut bins);
                            gmix_of(&g[b * l * w..(b + 1) * l * w], &mut gmix);
                            (bins, gmix)
                        })
                        .collect();
                    let mut grr = vec![0.0; m * w * w];
                    let mut gri = vec![0.0; m * w * w];
                    for (bins, gmix) in &per_b {
                        for k in 0..m {
                            let (bre, bim) = bins[k * 2 * w..(k + 1) * 2 * w].split_at(w);
                            let (gre, gim) = gmix[k * 2 * w..(k + 1) * 2 * w].split_at(w);
                            for ci in 0..w {
                                let xr = bre[ci];
                                let xi = bim[ci];
                                let rr = &mut grr[(k * w + ci) * w..(k * w + ci + 1) * w];
                                let ri = &mut gri[(k * w + ci) * w..(k * w + ci + 1) * w];
                                for co in 0..w {
                                    rr[co] += gre[co] * xr + gim[co] * xi;
                                    ri[co] += -gre[co] * xi + gim[co] * xr;
                                }
                            }
                        }
                    }
                    (grr, gri)
                });
                rrc.accum_grad_vec(grr);
                ric.accum_grad_vec(gri);
            }
        },
    ))
}

// ── Spectral block ──────────────────────────────────────────────────

/// One residual layer: truncated-spectrum convolution plus a pointwise
/// two-layer MLP, combined as `x + gelu(S(x) + MLP(x))`.
pub struct SpectralBlock {
    pub r_re: Parameter,
    pub r_im: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    n_modes: usize,
}

impl SpectralBlock {
    fn new(layer: usize, cfg: &OperatorConfig, rng: &mut ChaCha8Rng) -> Result<SpectralBlock> {
        let w = cfg.width;
        let m = cfg.n_modes;
        // Complex weights drawn with the 1/(C_in·C_out) scale.
        let scale = 1.0 / (w * w) as f64;
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| scale * rng.gen::<f64>()).collect()
        };
        let r_re = Parameter::new(&format!("block{layer}.r_re"), draw(rng, m * w * w), &[m, w, w])?;
        let r_im = Parameter::new(&format!("block{layer}.r_im"), draw(rng, m * w * w), &[m, w, w])?;
        let (w1d, b1d) = affine_init(rng, w, w);
        let (w2d, b2d) = affine_init(rng, w, w);
        Ok(SpectralBlock {
            r_re,
            r_im,
            w1: Parameter::new(&format!("block{layer}.w1"), w1d, &[w, w])?,
            b1: Parameter::new(&format!("block{layer}.b1"), b1d, &[w])?,
            w2: Parameter::new(&format!("block{layer}.w2"), w2d, &[w, w])?,
            b2: Parameter::new(&format!("block{layer}.b2"), b2d, &[w])?,
            n_modes: m,
        })
    }

    /// The spectral path alone: `irfft(R ⊙ P_m(rfft(x)))` along the
    /// sequence axis of `(B, L, W)`.
    pub fn spectral_path(&self, x: &Tensor) -> Result<Tensor> {
        spectral_conv(x, self.r_re.tensor(), self.r_im.tensor(), self.n_modes)
    }

    /// Full residual update.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spectral_path(x)?;
        let h = x.affine(self.w1.tensor(), self.b1.tensor())?.gelu();
        let mlp = h.affine(self.w2.tensor(), self.b2.tensor())?;
        x.add(&s.add(&mlp)?.gelu())
    }

    fn params(&self) -> [&Parameter; 6] {
        [&self.r_re, &self.r_im, &self.w1, &self.b1, &self.w2, &self.b2]
    }
}

fn affine_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Vec<f64>, Vec<f64>) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    (w, b)
}

// ── Model ───────────────────────────────────────────────────────────

/// Trainable surrogate: lift MLP, spectral trunk, offset/buffer heads,
/// and six unconstrained baseline scalars.
pub struct OperatorModel {
    config: OperatorConfig,
    pub lift_w1: Parameter,
    pub lift_b1: Parameter,
    pub lift_w2: Parameter,
    pub lift_b2: Parameter,
    pub blocks: Vec<SpectralBlock>,
    pub var_w: Parameter,
    pub var_b: Parameter,
    pub buf_w: Parameter,
    pub buf_b: Parameter,
    pub base_cd: Parameter,
    pub base_crr: Parameter,
    pub base_mass: Parameter,
    pub base_paux: Parameter,
    pub base_eta: Parameter,
    pub base_mu: Parameter,
}

/// Everything the loss needs from one forward pass.
pub struct ModelOutput {
    pub trace: ParamTrace,
    /// Residual buffer output in kW, shape (B, L).
    pub p_res: Tensor,
    /// Predicted battery power in kW, shape (B, L).
    pub p_pred: Tensor,
    /// Pre-gate efficiency offsets (tanh outputs), shape (B, L).
    pub delta_eta: Tensor,
    pub delta_mu: Tensor,
    pub delta_paux: Option<Tensor>,
}

/// Frozen head outputs reused across physics-only training epochs, where
/// neither the trunk weights nor its inputs change.
pub struct HeadCache {
    delta: Vec<f64>,
    delta_shape: Vec<usize>,
    p_res: Vec<f64>,
    p_res_shape: Vec<usize>,
}

impl HeadCache {
    /// Cache restricted to the given window rows, in order.
    pub fn select(&self, rows: &[usize]) -> HeadCache {
        let d_row = self.delta_shape[1] * self.delta_shape[2];
        let p_row = self.p_res_shape[1];
        let mut delta = Vec::with_capacity(rows.len() * d_row);
        let mut p_res = Vec::with_capacity(rows.len() * p_row);
        for &r in rows {
            delta.extend_from_slice(&self.delta[r * d_row..(r + 1) * d_row]);
            p_res.extend_from_slice(&self.p_res[r * p_row..(r + 1) * p_row]);
        }
        HeadCache {
            delta,
            delta_shape: vec![rows.len(), self.delta_shape[1], self.delta_shape[2]],
            p_res,
            p_res_shape: vec![rows.len(), p_row],
        }
    }
}

impl OperatorModel {
    pub fn new(config: OperatorConfig, seed: u64) -> Result<OperatorModel> {
        config.validate()?;
        crate::tune_allocator();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.lift_hidden;
        let w = config.width;
        let (l1w, l1b) = affine_init(&mut rng, 3, h);
        let (l2w, l2b) = affine_init(&mut rng, h, w);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            blocks.push(SpectralBlock::new(layer, &config, &mut rng)?);
        }
        let vc = config.var_channels;
        Ok(OperatorModel {
            config,
            lift_w1: Parameter::new("lift.w1", l1w, &[3, h])?,
            lift_b1: Parameter::new("lift.b1", l1b, &[h])?,
            lift_w2: Parameter::new("lift.w2", l2w, &[h, w])?,
            lift_b2: Parameter::new("lift.b2", l2b, &[w])?,
            blocks,
            // Heads start at zero: a fresh model is pure physics at the
            // bound midpoints and the buffer only activates if trained.
            var_w: Parameter::new("head.var_w", vec![0.0; w * vc], &[w, vc])?,
            var_b: Parameter::new("head.var_b", vec![0.0; vc], &[vc])?,
            buf_w: Parameter::new("head.buf_w", vec![0.0; w], &[w, 1])?,
            buf_b: Parameter::new("head.buf_b", vec![0.0], &[1])?,
            base_cd: Parameter::new("base.cd", vec![0.0], &[1])?,
            base_crr: Parameter::new("base.crr", vec![0.0], &[1])?,
            base_mass: Parameter::new("base.mass", vec![0.0], &[1])?,
            base_paux: Parameter::new("base.paux", vec![0.0], &[1])?,
            base_eta: Parameter::new("base.eta", vec![0.0], &[1])?,
            base_mu: Parameter::new("base.mu", vec![0.0], &[1])?,
        })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    /// All named parameters; names are unique.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> =
            vec![&self.lift_w1, &self.lift_b1, &self.lift_w2, &self.lift_b2];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.var_w, &self.var_b, &self.buf_w, &self.buf_b]);
        out.extend(self.baseline_params());
        out
    }

    /// The six unconstrained baseline scalars.
    pub fn baseline_params(&self) -> [&Parameter; 6] {
        [
            &self.base_cd,
            &self.base_crr,
            &self.base_mass,
            &self.base_paux,
            &self.base_eta,
            &self.base_mu,
        ]
    }

    /// Raw (pre-sigmoid) baseline values in a fixed order.
    pub fn raw_baselines(&self) -> [f64; 6] {
        let b = self.baseline_params();
        [
            b[0].tensor().item(),
            b[1].tensor().item(),
            b[2].tensor().item(),
            b[3].tensor().item(),
            b[4].tensor().item(),
            b[5].tensor().item(),
        ]
    }

    /// Bounded baseline values `(cd, crr, mass, paux, eta, mu)`.
    pub fn bounded_baselines(&self, spec: &VehicleSpec) -> Result<[f64; 6]> {
        let v = |p: &Parameter, lo: f64, hi: f64| -> Result<f64> {
            Ok(no_grad(|| bound(p.tensor(), lo, hi)).map(|t| t.item())?)
        };
        Ok([
            v(&self.base_cd, spec.cd_bounds.lo, spec.cd_bounds.hi)?,
            v(&self.base_crr, spec.crr_bounds.lo, spec.crr_bounds.hi)?,
            v(&self.base_mass, spec.mass_bounds.lo, spec.mass_bounds.hi)?,
            v(&self.base_paux, spec.paux_bounds.lo, spec.paux_bounds.hi)?,
            v(&self.base_eta, spec.eta_bounds.lo, spec.eta_bounds.hi)?,
            v(&self.base_mu, spec.mu_bounds.lo, spec.mu_bounds.hi)?,
        ])
    }

    /// Pins the raw baselines so their bounded images equal the given
    /// `(cd, crr, mass, paux, eta, mu)` values.
    pub fn pin_baselines(&self, values: &[f64; 6], spec: &VehicleSpec) -> Result<()> {
        let pairs = [
            (&self.base_cd, spec.cd_bounds),
            (&self.base_crr, spec.crr_bounds),
            (&self.base_mass, spec.mass_bounds),
            (&self.base_paux, spec.paux_bounds),
            (&self.base_eta, spec.eta_bounds),
            (&self.base_mu, spec.mu_bounds),
        ];
        for ((p, b), v) in pairs.iter().zip(values) {
            p.tensor().set_data(&[crate::physics::bound_inverse(*v, b.lo, b.hi)?])?;
        }
        Ok(())
    }

    /// Lift MLP: `(B, L, 3) -> (B, L, W)`.
    pub fn lift(&self, input: &Tensor) -> Result<Tensor> {
        let h = input.affine(self.lift_w1.tensor(), self.lift_b1.tensor())?.gelu();
        h.affine(self.lift_w2.tensor(), self.lift_b2.tensor())
    }

    /// Trunk feature map `Z`: lift then the spectral blocks.
    pub fn latent(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.lift(input)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    fn head_tensors(&self, z: &Tensor, spec: &VehicleSpec) -> Result<(Tensor, Tensor)> {
        let pre = z.affine(self.var_w.tensor(), self.var_b.tensor())?;
        let delta = pre.scale(1.0 / spec.head_temperature).tanh();
        let b = z.shape()[0];
        let l = z.shape()[1];
        let p_res = z.affine(self.buf_w.tensor(), self.buf_b.tensor())?.reshape(&[b, l])?;
        Ok((delta, p_res))
    }

    /// Full forward pass from standardized windows to predicted power.
    pub fn forward(&self, windows: &WindowSet, spec: &VehicleSpec) -> Result<ModelOutput> {
        self.check_compat(windows, spec)?;
        let z = self.latent(&windows.input_tensor())?;
        let (delta, p_res) = self.head_tensors(&z, spec)?;
        self.assemble(windows, spec, delta, p_res)
    }

    /// Head outputs evaluated once with gradients off, for reuse across
    /// epochs that only train the baselines.
    pub fn head_cache(&self, windows: &WindowSet, spec: &VehicleSpec) -> Result<HeadCache> {
        self.check_compat(windows, spec)?;
        no_grad(|| {
            let z = self.latent(&windows.input_tensor())?;
            let (delta, p_res) = self.head_tensors(&z, spec)?;
            Ok(HeadCache {
                delta_shape: delta.shape().to_vec(),
                delta: delta.to_vec(),
                p_res_shape: p_res.shape().to_vec(),
                p_res: p_res.to_vec(),
            })
        })
    }

    /// Forward pass with frozen head outputs; only the baselines build
    /// graph edges.
    pub fn forward_cached(
        &self,
        windows: &WindowSet,
        spec: &VehicleSpec,
        cache: &HeadCache,
    ) -> Result<ModelOutput> {
        self.check_compat(windows, spec)?;
        let delta = Tensor::from_vec(cache.delta.clone(), &cache.delta_shape)?;
        let p_res = Tensor::from_vec(cache.p_res.clone(), &cache.p_res_shape)?;
        self.assemble(windows, spec, delta, p_res)
    }

    fn check_compat(&self, windows: &WindowSet, spec: &VehicleSpec) -> Result<()> {
        spec.validate()?;
        if windows.l != self.config.l {
            return Err(Error::Config(format!(
                "windows of length {} fed to a model built for {}",
                windows.l, self.config.l
            )));
        }
        match (self.config.var_channels, spec.paux_mode) {
            (2, PauxMode::Static) | (3, PauxMode::Variable) => Ok(()),
            (vc, mode) => Err(Error::Config(format!(
                "var_channels {vc} is incompatible with paux mode {mode:?}"
            ))),
        }
    }

    fn assemble(
        &self,
        windows: &WindowSet,
        spec: &VehicleSpec,
        delta: Tensor,
        p_res: Tensor,
    ) -> Result<ModelOutput> {
        let v_raw = windows.v_raw_tensor();
        let a_raw = windows.a_raw_tensor();

        let delta_eta = delta.index_last(0)?;
        let delta_mu = delta.index_last(1)?;
        let delta_paux =
            if self.config.var_channels == 3 { Some(delta.index_last(2)?) } else { None };

        let w = gate(&v_raw, spec.gate_center, spec.gate_slope)?;
        let cd = bound(self.base_cd.tensor(), spec.cd_bounds.lo, spec.cd_bounds.hi)?;
        let crr = bound(self.base_crr.tensor(), spec.crr_bounds.lo, spec.crr_bounds.hi)?;
        let mass = bound(self.base_mass.tensor(), spec.mass_bounds.lo, spec.mass_bounds.hi)?;
        let paux0 = bound(self.base_paux.tensor(), spec.paux_bounds.lo, spec.paux_bounds.hi)?;
        let eta0 = bound(self.base_eta.tensor(), spec.eta_bounds.lo, spec.eta_bounds.hi)?;
        let mu0 = bound(self.base_mu.tensor(), spec.mu_bounds.lo, spec.mu_bounds.hi)?;

        let eta_t = assemble_time_varying(
            &eta0,
            &delta_eta,
            spec.span_eta,
            &w,
            spec.eta_bounds.lo,
            spec.eta_bounds.hi,
        )?;
        let mu_t = assemble_time_varying(
            &mu0,
            &delta_mu,
            spec.span_mu,
            &w,
            spec.mu_bounds.lo,
            spec.mu_bounds.hi,
        )?;
        let paux_t = match &delta_paux {
            Some(dp) => Some(assemble_time_varying(
                &paux0,
                dp,
                spec.span_paux,
                &w,
                spec.paux_bounds.lo,
                spec.paux_bounds.hi,
            )?),
            None => None,
        };

        let p_m = mech_power(&v_raw, &a_raw, &cd, &crr, &mass, spec)?;
        let paux_term: &Tensor = paux_t.as_ref().unwrap_or(&paux0);
        let p_bat_w = battery_power(&p_m, &a_raw, &eta_t, &mu_t, paux_term)?;
        let p_pred = p_bat_w.scale(1e-3).add(&p_res)?;

        Ok(ModelOutput {
            trace: ParamTrace {
                cd,
                crr,
                mass,
                paux0,
                eta_t,
                mu_t,
                paux_t,
            },
            p_res,
            p_pred,
            delta_eta,
            delta_mu,
            delta_paux,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_windows;
    use crate::gradcheck::grad_check_params;
    use crate::signal::SgConfig;
    use crate::synth::{forward_oracle, gen_log, ParamProfile, SynthConfig};
    use std::f64::consts::PI;

    fn tiny_config() -> OperatorConfig {
        OperatorConfig { n_modes: 2, width: 4, n_layers: 1, lift_hidden: 4, var_channels: 2, l: 8 }
    }

    #[test]
    fn parameter_count_closed_form() {
        let tesla = OperatorConfig::default();
        let c = count_params(&tesla);
        assert_eq!(c.lift, 33920);
        assert_eq!(c.spectral, 524288);
        assert_eq!(c.pointwise, 132096);
        assert_eq!(c.buffer_head, 129);
        assert_eq!(c.var_head, 258);
        assert_eq!(c.baselines, 6);
        assert_eq!(c.total(), 690_697);

        let ev9 = OperatorConfig { var_channels: 3, ..OperatorConfig::default() };
        let c = count_params(&ev9);
        assert_eq!(c.var_head, 387);
        assert_eq!(c.total(), 690_826);

        let unit = OperatorConfig {
            n_modes: 1,
            width: 1,
            n_layers: 1,
            lift_hidden: 1,
            var_channels: 2,
            l: 8,
        };
        assert_eq!(count_params(&unit).total(), 24);
    }

    #[test]
    fn instantiated_model_matches_closed_form_count() {
        for cfg in [tiny_config(), OperatorConfig { l: 32, ..OperatorConfig::default() }] {
            let model = OperatorModel::new(cfg, 1).unwrap();
            let actual: usize = model.params().iter().map(|p| p.tensor().numel()).sum();
            assert_eq!(actual, count_params(&cfg).total());
            // Names are unique.
            let mut names: Vec<&str> = model.params().iter().map(|p| p.name()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), model.params().len());
        }
    }

    #[test]
    fn config_validation() {
        let bad = OperatorConfig { n_modes: 70, l: 128, ..OperatorConfig::default() };
        assert!(bad.validate().is_err());
        let bad = OperatorConfig { var_channels: 4, ..OperatorConfig::default() };
        assert!(bad.validate().is_err());
        assert!(OperatorConfig::default().validate().is_ok());
    }

    #[test]
    fn mode_bound_arithmetic() {
        let mb = mode_bound(10.0, 11, 128);
        assert!((mb.cutoff_hz - 10.0 / 11.0).abs() < 1e-12);
        assert!((mb.bin_hz - 0.078125).abs() < 1e-12);
        assert!((mb.raw - 12.636).abs() < 0.01);
        assert_eq!(mb.minimum_modes, 13);
    }

    /// Direct-DFT truncation oracle: with identity mode weights the
    /// spectral path must equal low-pass truncation to `m` modes.
    #[test]
    fn spectral_path_matches_dft_truncation_oracle() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 3).unwrap();
        let block = &model.blocks[0];
        let w = cfg.width;
        let m = cfg.n_modes;
        // R = identity per mode.
        let mut ident = vec![0.0; m * w * w];
        for k in 0..m {
            for c in 0..w {
                ident[(k * w + c) * w + c] = 1.0;
            }
        }
        block.r_re.tensor().set_data(&ident).unwrap();
        block.r_im.tensor().set_data(&vec![0.0; m * w * w]).unwrap();

        let b = 2;
        let l = cfg.l;
        let data: Vec<f64> = (0..b * l * w).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let x = Tensor::from_vec(data.clone(), &[b, l, w]).unwrap();
        let s = block.spectral_path(&x).unwrap();

        // Oracle: per (batch, channel) sequence, direct DFT, zero modes
        // >= m, direct inverse.
        let sv = s.to_vec();
        for bi in 0..b {
            for ci in 0..w {
                let seq: Vec<f64> = (0..l).map(|t| data[(bi * l + t) * w + ci]).collect();
                let mut bins = vec![(0.0, 0.0); l];
                for (k, bin) in bins.iter_mut().enumerate().take(m) {
                    for (t, &v) in seq.iter().enumerate() {
                        let ang = -2.0 * PI * (k as f64) * (t as f64) / l as f64;
                        bin.0 += v * ang.cos();
                        bin.1 += v * ang.sin();
                    }
                }
                for t in 0..l {
                    // Hermitian inverse over the m kept bins.
                    let mut acc = bins[0].0;
                    for (k, bin) in bins.iter().enumerate().take(m).skip(1) {
                        let ang = 2.0 * PI * (k as f64) * (t as f64) / l as f64;
                        acc += 2.0 * (bin.0 * ang.cos() - bin.1 * ang.sin());
                    }
                    acc /= l as f64;
                    let got = sv[(bi * l + t) * w + ci];
                    assert!(
                        (got - acc).abs() < 1e-10,
                        "b{bi} c{ci} t{t}: {got} vs {acc}"
                    );
                }
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 5).unwrap();
        let block = &model.blocks[0];
        for p in block.params() {
            p.tensor().set_data(&vec![0.0; p.tensor().numel()]).unwrap();
        }
        let x = Tensor::from_vec(
            (0..2 * cfg.l * cfg.width).map(|i| (i as f64 * 0.17).sin()).collect(),
            &[2, cfg.l, cfg.width],
        )
        .unwrap();
        let y = block.forward(&x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(*a, b);
        }
    }

    /// Shared weights evaluated at L and 2L on a band-limited input agree
    /// on the shared grid.
    #[test]
    fn spectral_path_is_resolution_invariant_on_band_limited_input() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 9).unwrap();
        let block = &model.blocks[0];
        let w = cfg.width;
        let l = cfg.l;

        // Band-limited signal per channel: modes 0..m-1 only.
        let coeffs: Vec<(f64, f64)> = (0..w * cfg.n_modes)
            .map(|i| (((i * 13 % 31) as f64) / 31.0 - 0.5, ((i * 7 % 29) as f64) / 29.0 - 0.5))
            .collect();
        let eval = |t_frac: f64, ci: usize| -> f64 {
            let mut acc = coeffs[ci * cfg.n_modes].0;
            for k in 1..cfg.n_modes {
                let (cr, cim) = coeffs[ci * cfg.n_modes + k];
                let ang = 2.0 * PI * (k as f64) * t_frac;
                acc += 2.0 * (cr * ang.cos() - cim * ang.sin());
            }
            acc
        };
        let make_input = |len: usize| -> Tensor {
            let mut data = vec![0.0; len * w];
            for t in 0..len {
                for ci in 0..w {
                    data[t * w + ci] = eval(t as f64 / len as f64, ci);
                }
            }
            Tensor::from_vec(data, &[1, len, w]).unwrap()
        };

        let y1 = block.spectral_path(&make_input(l)).unwrap().to_vec();
        let y2 = block.spectral_path(&make_input(2 * l)).unwrap().to_vec();
        for t in 0..l {
            for ci in 0..w {
                let a = y1[t * w + ci];
                let b = y2[(2 * t) * w + ci];
                assert!((a - b).abs() < 1e-6, "t{t} c{ci}: {a} vs {b}");
            }
        }
    }

    fn test_windows(cfg: &OperatorConfig, synth: &SynthConfig) -> crate::dataset::WindowSet {
        let log = gen_log(synth).unwrap();
        let sg = SgConfig::default_for(log.fs).unwrap();
        make_windows(&log, &sg, cfg.l, 32, None).unwrap()
    }

    #[test]
    fn fresh_model_predicts_pure_physics_at_midpoints() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 11).unwrap();
        let spec = VehicleSpec::default();
        let synth = SynthConfig { duration: 30.0, ..SynthConfig::default() };
        let windows = test_windows(&cfg, &synth);
        let out = model.forward(&windows, &spec).unwrap();

        assert!(out.p_res.to_vec().iter().all(|v| *v == 0.0));
        assert!(out.delta_eta.to_vec().iter().all(|v| *v == 0.0));

        // Oracle with midpoint parameters on the same windowed signals.
        let mid = SynthConfig {
            cd: spec.cd_bounds.mid(),
            crr: spec.crr_bounds.mid(),
            mass: spec.mass_bounds.mid(),
            paux: spec.paux_bounds.mid(),
            eta: ParamProfile::Constant(spec.eta_bounds.mid()),
            mu: ParamProfile::Constant(spec.mu_bounds.mid()),
            noise_std: 0.0,
            ..synth
        };
        let oracle = forward_oracle(&windows.v_raw, &windows.a_raw, &mid).unwrap();
        for (o, p) in oracle.iter().zip(out.p_pred.to_vec()) {
            let denom = o.abs().max(p.abs()).max(1e-12);
            assert!((o - p).abs() / denom < 1e-9, "{o} vs {p}");
        }
    }

    #[test]
    fn pinned_baselines_reproduce_oracle_truth() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 13).unwrap();
        let spec = VehicleSpec::default();
        let synth = SynthConfig { duration: 30.0, ..SynthConfig::default() };
        let windows = test_windows(&cfg, &synth);
        model
            .pin_baselines(&[synth.cd, synth.crr, synth.mass, synth.paux, 0.83, 0.74], &spec)
            .unwrap();
        let out = model.forward(&windows, &spec).unwrap();
        let oracle = forward_oracle(&windows.v_raw, &windows.a_raw, &synth).unwrap();
        for (o, p) in oracle.iter().zip(out.p_pred.to_vec()) {
            let denom = o.abs().max(p.abs()).max(1e-12);
            assert!((o - p).abs() / denom < 1e-9, "{o} vs {p}");
        }
        let bb = model.bounded_baselines(&spec).unwrap();
        assert!((bb[0] - synth.cd).abs() < 1e-12);
        assert!((bb[4] - 0.83).abs() < 1e-12);
    }

    #[test]
    fn offsets_are_bounded_by_tanh() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 17).unwrap();
        // Blow up the head weights; offsets must stay within [-1, 1].
        let n = model.var_w.tensor().numel();
        model
            .var_w
            .tensor()
            .set_data(&(0..n).map(|i| if i % 2 == 0 { 50.0 } else { -75.0 }).collect::<Vec<_>>())
            .unwrap();
        let spec = VehicleSpec::default();
        let windows = test_windows(&cfg, &SynthConfig { duration: 30.0, ..SynthConfig::default() });
        let out = model.forward(&windows, &spec).unwrap();
        for d in [out.delta_eta.to_vec(), out.delta_mu.to_vec()] {
            assert!(d.iter().all(|v| v.abs() <= 1.0));
        }
        // Traces stay inside the configured bounds even when saturated.
        for v in out.trace.eta_t.to_vec() {
            assert!(spec.eta_bounds.contains(v));
        }
        for v in out.trace.mu_t.to_vec() {
            assert!(spec.mu_bounds.contains(v));
        }
    }

    #[test]
    fn var_channel_paux_mode_mismatch_is_config_error() {
        let cfg = OperatorConfig { var_channels: 3, ..tiny_config() };
        let model = OperatorModel::new(cfg, 19).unwrap();
        let spec = VehicleSpec::default(); // static paux
        let windows = test_windows(&cfg, &SynthConfig { duration: 30.0, ..SynthConfig::default() });
        assert!(matches!(model.forward(&windows, &spec), Err(Error::Config(_))));

        let cfg2 = tiny_config();
        let model2 = OperatorModel::new(cfg2, 19).unwrap();
        let spec2 = VehicleSpec { paux_mode: PauxMode::Variable, ..VehicleSpec::default() };
        let windows2 =
            test_windows(&cfg2, &SynthConfig { duration: 30.0, ..SynthConfig::default() });
        assert!(matches!(model2.forward(&windows2, &spec2), Err(Error::Config(_))));
    }

    #[test]
    fn cached_heads_match_live_forward() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 23).unwrap();
        // Give the heads some structure first.
        let n = model.var_w.tensor().numel();
        model
            .var_w
            .tensor()
            .set_data(&(0..n).map(|i| 0.1 * (i as f64).sin()).collect::<Vec<_>>())
            .unwrap();
        let spec = VehicleSpec::default();
        let windows = test_windows(&cfg, &SynthConfig { duration: 30.0, ..SynthConfig::default() });
        let live = model.forward(&windows, &spec).unwrap();
        let cache = model.head_cache(&windows, &spec).unwrap();
        let cached = model.forward_cached(&windows, &spec, &cache).unwrap();
        for (a, b) in live.p_pred.to_vec().iter().zip(cached.p_pred.to_vec()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lift_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 29).unwrap();
        let input = Tensor::from_vec(
            (0..2 * cfg.l * 3).map(|i| ((i * 23 % 19) as f64) / 10.0 - 0.9).collect(),
            &[2, cfg.l, 3],
        )
        .unwrap();
        let rel = grad_check_params(
            &[&model.lift_w1, &model.lift_b1, &model.lift_w2, &model.lift_b2],
            1e-6,
            || model.lift(&input).unwrap().square().mean(),
        );
        assert!(rel < 1e-5, "lift grad rel err {rel}");
    }

    #[test]
    fn spectral_block_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let model = OperatorModel::new(cfg, 31).unwrap();
        let block = &model.blocks[0];
        let input = Tensor::from_vec(
            (0..cfg.l * cfg.width).map(|i| ((i * 7 % 13) as f64) / 6.0 - 1.0).collect(),
            &[1, cfg.l, cfg.width],
        )
        .unwrap();
        let params: Vec<&Parameter> = block.params().to_vec();
        let rel = grad_check_params(&params, 1e-6, || {
            block.forward(&input).unwrap().square().mean()
        });
        assert!(rel < 1e-5, "block grad rel err {rel}");
    }
}
