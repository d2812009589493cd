//! Declarative run configuration (TOML).
//!
//! One file drives the whole pipeline. Every section has defaults, so an
//! empty file (or no `--config` at all) runs the reference sedan setup.
//! Unknown keys are rejected so typos surface as named errors.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use evpino_core::dataset::LogSchema;
use evpino_core::evaluation::FactoryReference;
use evpino_core::operator::OperatorConfig;
use evpino_core::physics::{PauxMode, VehicleSpec};
use evpino_core::signal::SgConfig;
use evpino_core::synth::SynthConfig;
use evpino_core::training::TrainConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Chronological train fraction.
    pub frac_train: f64,
    /// Window stride in samples.
    pub stride: usize,
    pub schema: LogSchema,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection { frac_train: 0.8, stride: 32, schema: LogSchema::default() }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgSection {
    pub order: usize,
    /// Window span in seconds; the sample window is derived per log rate
    /// and forced odd.
    pub span_s: f64,
    /// Explicit window in samples, overriding `span_s` when set.
    pub window: Option<usize>,
}

impl Default for SgSection {
    fn default() -> SgSection {
        SgSection { order: 3, span_s: 1.1, window: None }
    }
}

impl SgSection {
    pub fn resolve(&self, fs: f64) -> Result<SgConfig> {
        let cfg = match self.window {
            Some(w) => SgConfig::new(w, self.order, fs)?,
            None => SgConfig::from_seconds(self.span_s, self.order, fs)?,
        };
        Ok(cfg)
    }

    pub fn span_seconds(&self, fs: f64) -> f64 {
        match self.window {
            Some(w) => w as f64 / fs,
            None => self.span_s,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub vehicle: VehicleSpec,
    pub operator: OperatorConfig,
    pub training: TrainConfig,
    pub data: DataSection,
    pub sg: SgSection,
    pub synth: SynthConfig,
    pub factory: Option<FactoryReference>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks, run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.operator.validate()?;
        self.training.validate()?;
        match (self.operator.var_channels, self.vehicle.paux_mode) {
            (2, PauxMode::Static) | (3, PauxMode::Variable) => {}
            (vc, mode) => anyhow::bail!(
                "operator.var_channels = {vc} is incompatible with vehicle.paux_mode = {mode:?}"
            ),
        }
        if !(self.data.frac_train > 0.0 && self.data.frac_train < 1.0) {
            anyhow::bail!("data.frac_train = {} must lie in (0, 1)", self.data.frac_train);
        }
        if self.data.stride == 0 {
            anyhow::bail!("data.stride must be positive");
        }
        Ok(())
    }
}
