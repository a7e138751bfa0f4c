//! Experiment configuration files (TOML).
//!
//! Every table and field is optional; omitted values take the defaults
//! shown by `nps train --print-config`. Unknown keys are rejected.
//!
//! ```toml
//! [experiment]
//! seed = 1
//! channel = "perturbative"      # perturbative | ssfm | awgn
//! power_dbm = [9.0]             # launch powers, dBm per channel
//! lengths = [1]                 # encoder sequence lengths L
//! workers = 1
//!
//! [train]
//! order = 64
//! hidden = 256
//! batch = 256                   # sequences per iteration
//! # batch_symbols = 1024        # if set, batch = batch_symbols / L
//! iterations = 20000
//! lr = 1e-3
//! lr_decay = [[0.6, 0.3], [0.85, 0.3]]
//! tau = 1.0
//! # tau_final = 0.5
//!
//! [eval]
//! symbols = 131072
//! chunk_symbols = 4096
//!
//! [fiber]        # attenuation, dispersion, nonlinearity, spans, EDFA
//! [perturbation] # truncation N, Gaussian pulse width T0/T, optional coeffs_file
//! [grid]         # SSFM sampling grid and WDM comb
//! [ssfm]         # step control
//! [receiver]     # pilots and phase recovery
//! [baseline]     # entropy target for the MB baseline
//! [dm]           # distribution matcher test
//! ```
//!
//! The run manifest written next to every result is a complete config
//! file with an extra `[run]` table, so it can be passed back via
//! `--config` to regenerate the artifacts.

use std::fs;
use std::path::Path;

use nps_core::channel::{FiberParams, PerturbationConfig};
use nps_core::constellation::Constellation;
use nps_core::encoder::EncoderConfig;
use nps_core::optim::AdamConfig;
use nps_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ssfm::{ReceiverConfig, SimGrid, SsfmConfig};
use crate::{NpsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Perturbative,
    Ssfm,
    Awgn,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Perturbative => "perturbative",
            Backend::Ssfm => "ssfm",
            Backend::Awgn => "awgn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub channel: Backend,
    pub power_dbm: Vec<f64>,
    pub lengths: Vec<usize>,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seed: 1,
            channel: Backend::Perturbative,
            power_dbm: vec![9.0],
            lengths: vec![1],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub order: usize,
    pub hidden: usize,
    pub batch: usize,
    pub batch_symbols: Option<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_decay: Vec<(f64, f64)>,
    pub tau: f64,
    pub tau_final: Option<f64>,
    pub soft_feedback: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            order: t.encoder.order,
            hidden: t.encoder.hidden,
            batch: t.batch,
            batch_symbols: None,
            iterations: t.iterations,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            lr_decay: t.lr_decay,
            tau: t.encoder.tau,
            tau_final: t.tau_final,
            soft_feedback: t.encoder.soft_feedback,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl TrainSection {
    /// Core training configuration for sequence length `length`.
    pub fn to_core(&self, length: usize, seed: u64) -> TrainConfig {
        let batch = match self.batch_symbols {
            Some(s) => (s / length.max(1)).max(1),
            None => self.batch,
        };
        TrainConfig {
            encoder: EncoderConfig {
                order: self.order,
                hidden: self.hidden,
                length,
                tau: self.tau,
                soft_feedback: self.soft_feedback,
            },
            batch,
            iterations: self.iterations,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            lr_decay: self.lr_decay.clone(),
            tau_final: self.tau_final,
            seed,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub symbols: usize,
    pub chunk_symbols: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            symbols: 1 << 17,
            chunk_symbols: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberSection {
    pub alpha_db_km: f64,
    pub dispersion_ps_nm_km: f64,
    pub gamma: f64,
    pub span_km: f64,
    pub spans: usize,
    pub step_km: f64,
    pub wavelength_nm: f64,
    pub noise_figure_db: f64,
}

impl Default for FiberSection {
    fn default() -> Self {
        FiberSection::from(&FiberParams::default())
    }
}

impl From<&FiberParams> for FiberSection {
    fn from(f: &FiberParams) -> Self {
        FiberSection {
            alpha_db_km: f.alpha_db_km,
            dispersion_ps_nm_km: f.dispersion_ps_nm_km,
            gamma: f.gamma,
            span_km: f.span_km,
            spans: f.spans,
            step_km: f.step_km,
            wavelength_nm: f.wavelength_nm,
            noise_figure_db: f.noise_figure_db,
        }
    }
}

impl FiberSection {
    pub fn to_core(&self) -> FiberParams {
        FiberParams {
            alpha_db_km: self.alpha_db_km,
            dispersion_ps_nm_km: self.dispersion_ps_nm_km,
            gamma: self.gamma,
            span_km: self.span_km,
            spans: self.spans,
            step_km: self.step_km,
            wavelength_nm: self.wavelength_nm,
            noise_figure_db: self.noise_figure_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSection {
    pub truncation: usize,
    pub pulse_ratio: f64,
    /// Coefficient table to use instead of the Gaussian-pulse closed form.
    pub coeffs_file: Option<String>,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        let p = PerturbationConfig::default();
        PerturbationSection {
            truncation: p.truncation,
            pulse_ratio: p.pulse_ratio,
            coeffs_file: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Entropy of the MB baseline; defaults to that of the L = 1 model.
    pub entropy_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmSection {
    pub block_len: usize,
    pub blocks: usize,
    /// Entropy of an MB model used when no checkpoint is given.
    pub entropy_target: Option<f64>,
}

impl Default for DmSection {
    fn default() -> Self {
        DmSection {
            block_len: 1000,
            blocks: 100,
            entropy_target: None,
        }
    }
}

/// Provenance table of a manifest; ignored when loading.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub command: String,
    pub version: String,
    pub csv_schema: u32,
    pub checkpoint: Option<String>,
    pub models: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub fiber: FiberSection,
    pub perturbation: PerturbationSection,
    pub grid: SimGrid,
    pub ssfm: SsfmConfig,
    pub receiver: ReceiverConfig,
    pub baseline: BaselineSection,
    pub dm: DmSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| NpsError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NpsError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| NpsError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn perturbation_core(&self) -> PerturbationConfig {
        PerturbationConfig {
            baud_gbd: self.grid.baud_gbd,
            truncation: self.perturbation.truncation,
            pulse_ratio: self.perturbation.pulse_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.power_dbm.is_empty() || e.lengths.is_empty() || e.workers == 0 {
            return Err(NpsError::config("experiment: power_dbm, lengths and workers must be non-empty/positive"));
        }
        if e.power_dbm.iter().any(|p| !p.is_finite()) {
            return Err(NpsError::config("experiment: power_dbm must be finite"));
        }
        Constellation::qam(self.train.order).map_err(|err| NpsError::config(format!("train: {err}")))?;
        for &l in &e.lengths {
            self.train.to_core(l, e.seed).validate().map_err(|err| NpsError::config(format!("train: {err}")))?;
        }
        if self.eval.symbols == 0 || self.eval.chunk_symbols == 0 {
            return Err(NpsError::config("eval: symbols and chunk_symbols must be positive"));
        }
        self.fiber.to_core().validate().map_err(|err| NpsError::config(format!("fiber: {err}")))?;
        if self.perturbation.truncation == 0 || !(self.perturbation.pulse_ratio > 0.0) {
            return Err(NpsError::config("perturbation: truncation and pulse_ratio must be positive"));
        }
        self.grid.validate()?;
        if !(self.ssfm.max_phase_rad > 0.0) {
            return Err(NpsError::config("ssfm: max_phase_rad must be positive"));
        }
        if self.dm.block_len == 0 || self.dm.blocks == 0 {
            return Err(NpsError::config("dm: block_len and blocks must be positive"));
        }
        Ok(())
    }
}
