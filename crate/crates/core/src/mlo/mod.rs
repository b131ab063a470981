//! The multilevel optimization engine.
//!
//! One outer round alternates two phases: parameter optimization (gradient
//! descent on the weighted training loss with the weight generators frozen)
//! and meta optimization (each generator updated in bucket order against its
//! own validation bucket, using implicit-differentiation hypergradients with
//! a truncated Neumann approximation of the inverse Hessian).

mod engine;
mod trainer;

pub use engine::{hypergradient, neumann_ihvp, parameter_optimization};
pub use trainer::{evaluate_run, prepare, run, PreparedData, RunResult};

use crate::models::ModelError;
use crate::partition::PartitionError;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> TrainError {
        match e {
            TensorError::NonFinite { .. } => TrainError::Numeric(e.to_string()),
            other => TrainError::Tensor(other),
        }
    }
}

impl From<PartitionError> for TrainError {
    fn from(e: PartitionError) -> TrainError {
        TrainError::Data(e.to_string())
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> TrainError {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => TrainError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training regime: plain training, weight generators updated all at once,
/// or the full sequential multilevel scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    #[serde(alias = "mwn-sim")]
    MwnSimultaneous,
    Mlo,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Baseline => write!(f, "baseline"),
            Mode::MwnSimultaneous => write!(f, "mwn-simultaneous"),
            Mode::Mlo => write!(f, "mlo"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Mode, String> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "mwn-sim" | "mwn-simultaneous" => Ok(Mode::MwnSimultaneous),
            "mlo" => Ok(Mode::Mlo),
            other => Err(format!("unknown mode '{other}' (expected baseline|mwn-sim|mlo)")),
        }
    }
}

/// Bucket visiting order during meta optimization: simple-to-complex or the
/// reversed ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    S2c,
    C2s,
}

impl std::fmt::Display for Order {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Order::S2c => write!(f, "s2c"),
            Order::C2s => write!(f, "c2s"),
        }
    }
}

impl std::str::FromStr for Order {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Order, String> {
        match s {
            "s2c" => Ok(Order::S2c),
            "c2s" => Ok(Order::C2s),
            other => Err(format!("unknown order '{other}' (expected s2c|c2s)")),
        }
    }
}

/// Schedule constants and mode flags for one training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Number of validation buckets (and weight generators).
    pub k: usize,
    /// Gradient-descent iterations per parameter-optimization phase.
    pub t_p: usize,
    /// Meta iterations per generator per round (may be 0 only in baseline).
    pub t_m: usize,
    pub lr_theta: f64,
    pub lr_omega: f64,
    /// Truncation depth of the Neumann inverse-Hessian series.
    pub neumann_j: usize,
    /// Neumann step size; must stay below 1/λ_max of the training Hessian.
    pub neumann_alpha: f64,
    /// Outer-round cap.
    pub rounds: usize,
    /// Early-stop patience on the mean bucket validation loss.
    pub patience: usize,
    /// Mini-batch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub order: Order,
    /// Rescale each bucket's weights to mean one before the loss.
    pub normalize_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 3,
            t_p: 10,
            t_m: 1,
            lr_theta: 3e-4,
            lr_omega: 3e-3,
            neumann_j: 3,
            neumann_alpha: 3e-4,
            rounds: 30,
            patience: 5,
            batch_size: None,
            seed: 0,
            mode: Mode::Mlo,
            order: Order::S2c,
            normalize_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.k < 1 {
            problems.push("k must be >= 1");
        }
        if self.t_p < 1 {
            problems.push("t_p must be >= 1");
        }
        if self.t_m < 1 && self.mode != Mode::Baseline {
            problems.push("t_m must be >= 1 outside baseline mode");
        }
        if self.rounds < 1 {
            problems.push("rounds must be >= 1");
        }
        if self.patience < 1 {
            problems.push("patience must be >= 1");
        }
        if !(self.lr_theta > 0.0) {
            problems.push("lr_theta must be > 0");
        }
        if !(self.lr_omega > 0.0) {
            problems.push("lr_omega must be > 0");
        }
        if !(self.neumann_alpha > 0.0) {
            problems.push("neumann_alpha must be > 0");
        }
        if self.batch_size == Some(0) {
            problems.push("batch_size must be >= 1 when set");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// Per-round log entry: mean unweighted validation loss and mean sample
/// weight per bucket, plus the meta-update trace (1-based bucket indices in
/// update order).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub bucket_val_loss: Vec<f64>,
    pub mean_weight: Vec<f64>,
    pub trace: Vec<usize>,
}

/// Mutable training state: model parameters, all generator parameters, and
/// the accumulated history.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: crate::tensor::ParamSet,
    pub omegas: Vec<crate::tensor::ParamSet>,
    pub rounds_completed: usize,
    pub history: Vec<RoundRecord>,
    /// Concatenated meta-update trace across rounds.
    pub full_trace: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn t_m_zero_only_in_baseline() {
        let mut cfg = TrainConfig { t_m: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.mode = Mode::Baseline;
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_rates_rejected() {
        let cfg = TrainConfig { lr_theta: 0.0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig { neumann_alpha: -1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_strings_roundtrip() {
        for (s, m) in [
            ("baseline", Mode::Baseline),
            ("mwn-sim", Mode::MwnSimultaneous),
            ("mwn-simultaneous", Mode::MwnSimultaneous),
            ("mlo", Mode::Mlo),
        ] {
            assert_eq!(s.parse::<Mode>().unwrap(), m);
        }
        assert!("plain".parse::<Mode>().is_err());
        // serde names match Display
        let json = serde_json::to_string(&Mode::MwnSimultaneous).unwrap();
        assert_eq!(json, "\"mwn-simultaneous\"");
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = TrainConfig { batch_size: Some(256), order: Order::C2s, ..TrainConfig::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
