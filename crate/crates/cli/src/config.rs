//! Config-file loading, flag overrides, and the exit-code error type.
//!
//! The config file is flat JSON mirroring the training configuration, with
//! optional model-width keys; flags override file values, which override the
//! defaults.

use clap::Args;
use mlo_core::metrics::MetricsError;
use mlo_core::mlo::{Mode, Order, TrainConfig, TrainError};
use mlo_core::models::{ModelConfig, ModelError};
use mlo_core::synth::{SynthError, Vocabulary};
use mlo_core::tensor::TensorError;
use serde::Deserialize;
use std::path::PathBuf;

pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError { code: 1, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError { code: 2, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> CliError {
        CliError { code: 3, message: msg.into() }
    }

    pub fn io(e: std::io::Error) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> CliError {
        match e {
            SynthError::InfeasibleBlacklist { .. } => CliError::usage(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Config(_) => CliError::usage(e.to_string()),
            TrainError::Numeric(_) | TrainError::Tensor(_) => CliError::numeric(e.to_string()),
            TrainError::Data(_) => CliError::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::numeric(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> CliError {
        CliError::data(e.to_string())
    }
}

/// Per-flag overrides shared by `train` and `ablate`. Every field defaults
/// to "not given"; the effective value falls back to the config file and
/// then the built-in defaults.
#[derive(Args, Clone, Default)]
pub struct TrainOverrides {
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// baseline | mwn-sim | mlo
    #[arg(long)]
    pub mode: Option<String>,
    /// s2c | c2s
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tp: Option<usize>,
    #[arg(long)]
    pub tm: Option<usize>,
    #[arg(long = "lr-theta")]
    pub lr_theta: Option<f64>,
    #[arg(long = "lr-omega")]
    pub lr_omega: Option<f64>,
    #[arg(long = "neumann-j")]
    pub neumann_j: Option<usize>,
    #[arg(long = "neumann-alpha")]
    pub neumann_alpha: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "normalize-weights")]
    pub normalize_weights: bool,
    #[arg(long = "d-emb")]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long = "mwn-hidden")]
    pub mwn_hidden: Option<usize>,
}

/// The config file: every key optional, unknown keys rejected.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    k: Option<usize>,
    t_p: Option<usize>,
    t_m: Option<usize>,
    lr_theta: Option<f64>,
    lr_omega: Option<f64>,
    neumann_j: Option<usize>,
    neumann_alpha: Option<f64>,
    rounds: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    mode: Option<Mode>,
    order: Option<Order>,
    normalize_weights: Option<bool>,
    d_emb: Option<usize>,
    hidden: Option<usize>,
    mwn_hidden: Option<usize>,
}

/// Defaults, overlaid by the config file, overlaid by flags. The model's
/// vocabulary counts always come from the data directory.
pub fn effective_config(
    ov: &TrainOverrides,
    vocab: &Vocabulary,
) -> Result<(TrainConfig, ModelConfig), CliError> {
    let file: FileConfig = match &ov.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(CliError::io)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let mut cfg = TrainConfig::default();
    macro_rules! overlay {
        ($field:ident, $file:expr, $flag:expr) => {
            if let Some(v) = $file {
                cfg.$field = v;
            }
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    overlay!(k, file.k, ov.k);
    overlay!(t_p, file.t_p, ov.tp);
    overlay!(t_m, file.t_m, ov.tm);
    overlay!(lr_theta, file.lr_theta, ov.lr_theta);
    overlay!(lr_omega, file.lr_omega, ov.lr_omega);
    overlay!(neumann_j, file.neumann_j, ov.neumann_j);
    overlay!(neumann_alpha, file.neumann_alpha, ov.neumann_alpha);
    overlay!(rounds, file.rounds, ov.rounds);
    overlay!(patience, file.patience, ov.patience);
    overlay!(seed, file.seed, ov.seed);
    if let Some(v) = file.batch_size {
        cfg.batch_size = Some(v);
    }
    if let Some(v) = ov.batch_size {
        cfg.batch_size = Some(v);
    }
    if let Some(v) = file.mode {
        cfg.mode = v;
    }
    if let Some(s) = &ov.mode {
        cfg.mode = s.parse().map_err(CliError::usage)?;
    }
    if let Some(v) = file.order {
        cfg.order = v;
    }
    if let Some(s) = &ov.order {
        cfg.order = s.parse().map_err(CliError::usage)?;
    }
    if let Some(v) = file.normalize_weights {
        cfg.normalize_weights = v;
    }
    if ov.normalize_weights {
        cfg.normalize_weights = true;
    }

    let mut model_cfg = ModelConfig {
        n_sizes: vocab.n_sizes(),
        n_colors: vocab.n_colors(),
        n_shapes: vocab.n_shapes(),
        ..ModelConfig::default()
    };
    if let Some(v) = file.d_emb {
        model_cfg.d_emb = v;
    }
    if let Some(v) = ov.d_emb {
        model_cfg.d_emb = v;
    }
    if let Some(v) = file.hidden {
        model_cfg.hidden = v;
    }
    if let Some(v) = ov.hidden {
        model_cfg.hidden = v;
    }
    if let Some(v) = file.mwn_hidden {
        model_cfg.mwn_hidden = v;
    }
    if let Some(v) = ov.mwn_hidden {
        model_cfg.mwn_hidden = v;
    }

    cfg.validate()?;
    Ok((cfg, model_cfg))
}
