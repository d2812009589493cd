//! Hybrid loss, Adam, cosine schedule, and the two-stage training loop.
//!
//! Stage 1 fits only the six baseline scalars against the data while the
//! trunk and heads stay frozen; because neither the trunk weights nor its
//! inputs change during that stage, the head outputs are evaluated once
//! and reused as constants. Stage 2 unfreezes everything, anneals the
//! learning rate over a fresh cosine, early-stops on validation MSE, and
//! restores the best weights seen.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::operator::{ModelOutput, OperatorModel};
use crate::physics::VehicleSpec;
use crate::tensor::{no_grad, Parameter, Tensor};

/// Coefficients of the loss terms beyond the data fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub buffer: f64,
    pub smooth: f64,
    pub param: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { buffer: 1e-2, smooth: 1e-3, param: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.buffer < 0.0 || self.smooth < 0.0 || self.param < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Optimization settings for both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Stage-2 base learning rate.
    pub lr: f64,
    /// Stage-1 learning rate for the six scalars. The physics-only fit
    /// tolerates far larger steps than the full operator.
    pub warmup_lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs (stage 2 only).
    pub patience: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 3e-4,
            warmup_lr: 1e-2,
            lr_min: 1e-6,
            batch: 128,
            warmup_epochs: 400,
            max_epochs: 3500,
            patience: 200,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "warmup epochs {} must be below max epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.warmup_lr > 0.0 && self.lr_min >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.loss_weights.validate()
    }
}

/// Weighted value of each loss term; `total` is their exact sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub data: f64,
    pub buffer: f64,
    pub smooth: f64,
    pub prior: f64,
    pub total: f64,
}

/// The hybrid objective.
///
/// * data: mean squared prediction error over all `B·L` samples (kW²)
/// * buffer: `λ_buff · mean(P_res²)`
/// * smooth: `λ_smooth / (B(L−1)) · (‖D_t Δη‖² + ‖D_t Δμ‖²)` with `D_t`
///   the first-order time difference
/// * prior: `λ_param · ‖θ_raw‖²` over the six pre-sigmoid scalars
pub fn hybrid_loss(
    p_data: &Tensor,
    p_pred: &Tensor,
    p_res: &Tensor,
    delta_eta: &Tensor,
    delta_mu: &Tensor,
    theta_raw: &[&Tensor; 6],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    if p_data.shape() != p_pred.shape() {
        return Err(Error::Shape(format!(
            "loss: target {:?} vs prediction {:?}",
            p_data.shape(),
            p_pred.shape()
        )));
    }
    let data = p_pred.sub(p_data)?.square().mean();
    let buffer = p_res.square().mean().scale(weights.buffer);

    let shape = delta_eta.shape();
    let l = shape[shape.len() - 1];
    let b = delta_eta.numel() / l;
    let norm = weights.smooth / (b as f64 * (l as f64 - 1.0));
    let smooth = delta_eta
        .time_diff()?
        .square()
        .sum()
        .add(&delta_mu.time_diff()?.square().sum())?
        .scale(norm);

    let mut prior = theta_raw[0].square().sum();
    for t in &theta_raw[1..] {
        prior = prior.add(&t.square().sum())?;
    }
    let prior = prior.scale(weights.param);

    let total = data.add(&buffer)?.add(&smooth)?.add(&prior)?;
    let breakdown = LossBreakdown {
        data: data.item(),
        buffer: buffer.item(),
        smooth: smooth.item(),
        prior: prior.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Convenience: hybrid loss of one forward pass.
pub fn model_loss(
    model: &OperatorModel,
    out: &ModelOutput,
    p_data: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let raws = model.baseline_params();
    let theta: [&Tensor; 6] = [
        raws[0].tensor(),
        raws[1].tensor(),
        raws[2].tensor(),
        raws[3].tensor(),
        raws[4].tensor(),
        raws[5].tensor(),
    ];
    hybrid_loss(p_data, &out.p_pred, &out.p_res, &out.delta_eta, &out.delta_mu, &theta, weights)
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam with bias correction. Parameters flagged as not trainable are
/// skipped entirely.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Adam {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: HashMap::new() }
    }

    /// Applies one update from the gradients currently held by `params`.
    pub fn step(&mut self, params: &[&Parameter], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.tensor().grad() else { continue };
            let n = p.tensor().numel();
            if grad.len() != n {
                return Err(Error::Contract(format!(
                    "adam: gradient length {} vs parameter '{}' length {n}",
                    grad.len(),
                    p.name()
                )));
            }
            let (m, v) = self
                .state
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::Contract(format!(
                    "adam: state shape drifted for '{}'",
                    p.name()
                )));
            }
            let mut data = p.tensor().to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.tensor().set_data(&data)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` down to `lr_min` across a stage.
pub fn cosine_lr(epoch: usize, stage_start: usize, stage_len: usize, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(stage_len > 0);
    let frac = (epoch.saturating_sub(stage_start)) as f64 / stage_len as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
}

// ── Reports ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 = physics-only warm-up, 2 = operator stage.
    pub stage: u8,
    pub train_loss: f64,
    pub val_loss: f64,
    pub r2: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    Divergence,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index of the first stage-2 epoch.
    pub stage_boundary: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,val_loss,r2,lr,stage")?;
        for r in &self.epochs {
            writeln!(
                f,
                "{},{:.9e},{:.9e},{:.6},{:.6e},{}",
                r.epoch, r.train_loss, r.val_loss, r.r2, r.lr, r.stage
            )?;
        }
        Ok(())
    }
}

// ── Early stopping ──────────────────────────────────────────────────

/// Minimum-tracking early stopper: stops once `patience` epochs pass
/// without a new best validation loss.
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    /// Returns `(improved, should_stop)` for this epoch's validation loss.
    pub fn update(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.best_epoch = epoch;
        }
        let stop = epoch.saturating_sub(self.best_epoch) >= self.patience;
        (improved, stop)
    }
}

// ── Training loops ──────────────────────────────────────────────────

/// Training and held-out windows sharing one scaler.
pub struct TrainData {
    pub train: WindowSet,
    pub val: WindowSet,
}

fn snapshot(params: &[&Parameter]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.tensor().to_vec()).collect()
}

fn restore(params: &[&Parameter], snap: &[Vec<f64>]) -> Result<()> {
    for (p, s) in params.iter().zip(snap) {
        p.tensor().set_data(s)?;
    }
    Ok(())
}

/// Validation MSE (kW²) and R² of the current weights.
pub fn validate(model: &OperatorModel, windows: &WindowSet, spec: &VehicleSpec) -> Result<(f64, f64)> {
    no_grad(|| {
        let out = model.forward(windows, spec)?;
        let pred = out.p_pred.to_vec();
        let truth = &windows.p;
        let n = truth.len() as f64;
        let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
        let mean: f64 = truth.iter().sum::<f64>() / n;
        let sst: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
        let r2 = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
        Ok((sse / n, r2))
    })
}

fn minibatches(b: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..b).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Stage 1: physics-only warm-up.
///
/// Only the six baseline scalars train; every other parameter is frozen
/// and the head outputs are cached once, so the offsets still flow into
/// the forward pass as constants. Early stopping does not apply here.
pub fn train_warmup(
    model: &OperatorModel,
    data: &TrainData,
    spec: &VehicleSpec,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    for p in model.params() {
        p.set_trainable(false);
    }
    for p in model.baseline_params() {
        p.set_trainable(true);
    }
    let cache_train = model.head_cache(&data.train, spec)?;
    let baselines = model.baseline_params();
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        let lr = cosine_lr(epoch, 0, cfg.warmup_epochs, cfg.warmup_lr, cfg.lr_min);
        let mut loss_sum = 0.0;
        let mut sample_sum = 0usize;
        for rows in minibatches(data.train.b, cfg.batch, &mut rng) {
            let sub = data.train.select(&rows);
            let sub_cache = cache_train.select(&rows);
            for p in &baselines {
                p.tensor().zero_grad();
            }
            let out = model.forward_cached(&sub, spec, &sub_cache)?;
            let (loss, parts) = model_loss(model, &out, &sub.p_tensor(), &cfg.loss_weights)?;
            loss.backward()?;
            adam.step(&baselines, lr)?;
            loss_sum += parts.total * rows.len() as f64;
            sample_sum += rows.len();
        }
        let (val_loss, r2) = validate(model, &data.val, spec)?;
        records.push(EpochRecord {
            epoch,
            stage: 1,
            train_loss: loss_sum / sample_sum as f64,
            val_loss,
            r2,
            lr,
        });
    }
    Ok(records)
}

/// Stage 2: joint refinement of the trunk, heads, and baselines with
/// early stopping on validation MSE and best-checkpoint restore.
pub fn train_operator(
    model: &OperatorModel,
    data: &TrainData,
    spec: &VehicleSpec,
    cfg: &TrainConfig,
) -> Result<(Vec<EpochRecord>, usize, f64, StopReason)> {
    cfg.validate()?;
    for p in model.params() {
        p.set_trainable(true);
    }
    let params = model.params();
    let stage_len = cfg.max_epochs - cfg.warmup_epochs;
    let mut adam = Adam::new();
    // Distinct shuffle stream from stage 1.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_1A2B);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_snap = snapshot(&params);
    let mut records = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..stage_len {
        let lr = cosine_lr(epoch, 0, stage_len, cfg.lr, cfg.lr_min);
        let mut loss_sum = 0.0;
        let mut sample_sum = 0usize;
        let mut diverged = false;
        for rows in minibatches(data.train.b, cfg.batch, &mut rng) {
            let sub = data.train.select(&rows);
            for p in &params {
                p.tensor().zero_grad();
            }
            let out = model.forward(&sub, spec)?;
            let (loss, parts) = model_loss(model, &out, &sub.p_tensor(), &cfg.loss_weights)?;
            if !parts.total.is_finite() {
                diverged = true;
                break;
            }
            loss.backward()?;
            adam.step(&params, lr)?;
            loss_sum += parts.total * rows.len() as f64;
            sample_sum += rows.len();
        }
        if diverged {
            stop = StopReason::Divergence;
            break;
        }
        let (val_loss, r2) = validate(model, &data.val, spec)?;
        records.push(EpochRecord {
            epoch: cfg.warmup_epochs + epoch,
            stage: 2,
            train_loss: loss_sum / sample_sum as f64,
            val_loss,
            r2,
            lr,
        });
        let (improved, should_stop) = stopper.update(epoch, val_loss);
        if improved {
            best_snap = snapshot(&params);
        }
        if should_stop {
            stop = StopReason::EarlyStopping;
            break;
        }
    }
    restore(&params, &best_snap)?;
    let best_epoch = cfg.warmup_epochs + stopper.best_epoch;
    Ok((records, best_epoch, stopper.best, stop))
}

/// Runs both stages and assembles the full report.
pub fn train_full(
    model: &OperatorModel,
    data: &TrainData,
    spec: &VehicleSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut epochs = train_warmup(model, data, spec, cfg)?;
    let stage_boundary = epochs.len();
    let (stage2, best_epoch, best_val_loss, stop) = train_operator(model, data, spec, cfg)?;
    epochs.extend(stage2);
    Ok(TrainReport {
        epochs,
        stage_boundary,
        best_epoch,
        best_val_loss,
        stop,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
