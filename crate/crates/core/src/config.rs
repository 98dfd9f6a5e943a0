//! Run configuration: a single strict TOML document. Unknown keys are
//! rejected; defaults are the desk-scale values used across the crate.

use serde::{Deserialize, Serialize};

use crate::error::{CkmError, Result};

/// Speed of light in m/s; wavelength is `C_LIGHT / f`.
pub const C_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RoomConfig {
    /// Box extents in meters (x, y, z).
    pub extents: [f64; 3],
    /// Per-wall amplitude reflection coefficient, one shared value.
    pub reflection: f64,
    /// Highest bounce order generated by the oracle.
    pub max_bounce: usize,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self { extents: [4.0, 3.0, 2.5], reflection: 0.6, max_bounce: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub frequencies_ghz: Vec<f64>,
    /// Optional per-frequency train counts; overrides round-robin assignment.
    pub train_counts_per_freq: Option<Vec<usize>>,
    pub test_counts_per_freq: Option<Vec<usize>>,
    /// Store per-order gains next to each sample.
    pub store_order_gains: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_samples: 64,
            test_samples: 16,
            frequencies_ghz: vec![2.4, 6.0, 10.0],
            train_counts_per_freq: None,
            test_counts_per_freq: None,
            store_order_gains: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Elevation bins over (0, 90) degrees.
    pub elevation_bins: usize,
    /// Azimuth bins over [0, 360) degrees.
    pub azimuth_bins: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { elevation_bins: 18, azimuth_bins: 36 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self { rows: 4, cols: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature dimension D_f.
    pub feature_dim: usize,
    /// GRU hidden dimension.
    pub hidden_dim: usize,
    /// Attention head count.
    pub heads: usize,
    /// Octree depth at initialization.
    pub start_depth: u8,
    /// Hard cap on octree depth.
    pub max_depth: u8,
    /// Highest scattering order the model can unlock.
    pub max_order: usize,
    /// Spherical Fibonacci direction count P.
    pub directions: usize,
    /// Residual blocks in each signal head.
    pub signal_blocks: usize,
    /// Hidden width of each signal head.
    pub signal_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 32,
            heads: 2,
            start_depth: 2,
            max_depth: 3,
            max_order: 3,
            directions: 16,
            signal_blocks: 3,
            signal_width: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub eta_spec: f64,
    pub eta_mae: f64,
    pub eta_ssim: f64,
    pub lambda_causal: f64,
    pub lambda_decay: f64,
    /// Huber knee in dB.
    pub huber_delta: f64,
    /// Causal margin in meters.
    pub delta_d: f64,
    /// Decay-loss floor scale.
    pub xi: f64,
    /// Decay-loss stabilizer.
    pub epsilon: f64,
    /// Allowable adjacent-order energy ratio.
    pub rho_decay: f64,
    /// EMA decay for order energies.
    pub energy_ema_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta_spec: 1.0,
            eta_mae: 0.5,
            eta_ssim: 0.2,
            lambda_causal: 0.1,
            lambda_decay: 0.1,
            huber_delta: 1.0,
            delta_d: 0.1,
            xi: 0.1,
            epsilon: 1e-8,
            rho_decay: 0.9,
            energy_ema_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Steps of EMA history a plateau decision looks back over.
    pub plateau_window: usize,
    /// Relative EMA improvement below which the loss counts as flat.
    pub plateau_rel_improvement: f64,
    /// Loss EMA decay.
    pub loss_ema_decay: f64,
    /// Octree maintenance cadence in steps.
    pub maintenance_interval: usize,
    /// Opacity below which a primitive is pruned.
    pub prune_opacity: f64,
    /// Percentile of windowed positional-gradient norms that triggers cloning.
    pub clone_grad_percentile: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            plateau_window: 200,
            plateau_rel_improvement: 0.01,
            loss_ema_decay: 0.99,
            maintenance_interval: 100,
            prune_opacity: 0.005,
            clone_grad_percentile: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    /// Hold out one carrier (GHz) from training; evaluation still sees it.
    pub holdout_freq_ghz: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            checkpoint_interval: 200,
            eval_interval: 500,
            holdout_freq_ghz: None,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub room: RoomConfig,
    pub dataset: DatasetConfig,
    pub grid: GridConfig,
    pub array: ArrayConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CkmError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the canonical TOML form.
    pub fn hash(&self) -> u64 {
        let text = self.to_toml();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CkmError::Config(msg.to_string()));
        if self.room.extents.iter().any(|&e| e <= 0.0) {
            return bad("room extents must be positive");
        }
        if !(0.0..=1.0).contains(&self.room.reflection) {
            return bad("reflection coefficient must lie in [0, 1]");
        }
        if self.dataset.frequencies_ghz.is_empty()
            || self.dataset.frequencies_ghz.iter().any(|&f| f <= 0.0)
        {
            return bad("frequencies must be positive and nonempty");
        }
        if let Some(counts) = &self.dataset.train_counts_per_freq {
            if counts.len() != self.dataset.frequencies_ghz.len() {
                return bad("train_counts_per_freq length must match frequencies");
            }
        }
        if let Some(counts) = &self.dataset.test_counts_per_freq {
            if counts.len() != self.dataset.frequencies_ghz.len() {
                return bad("test_counts_per_freq length must match frequencies");
            }
        }
        if self.grid.elevation_bins == 0 || self.grid.azimuth_bins == 0 {
            return bad("spectrum grid dimensions must be at least 1");
        }
        if self.array.rows * self.array.cols == 0 {
            return bad("array must have at least one element");
        }
        if self.model.feature_dim == 0 || self.model.feature_dim % self.model.heads != 0 {
            return bad("feature_dim must be a positive multiple of heads");
        }
        if self.model.start_depth < 1 || self.model.start_depth > self.model.max_depth {
            return bad("octree depths must satisfy 1 <= start_depth <= max_depth");
        }
        if self.model.max_order == 0 {
            return bad("max_order must be at least 1");
        }
        if self.model.directions == 0 {
            return bad("direction count must be at least 1");
        }
        let l = &self.loss;
        if [l.eta_spec, l.eta_mae, l.eta_ssim, l.lambda_causal, l.lambda_decay]
            .iter()
            .any(|&w| w < 0.0)
        {
            return bad("loss weights must be nonnegative");
        }
        if !(l.rho_decay > 0.0 && l.rho_decay <= 1.0) {
            return bad("rho_decay must lie in (0, 1]");
        }
        if l.epsilon <= 0.0 {
            return bad("loss epsilon must be positive");
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.schedule.clone_grad_percentile) {
            return bad("clone_grad_percentile must lie in [0, 1)");
        }
        Ok(())
    }

    /// Number of antenna elements.
    pub fn n_antennas(&self) -> usize {
        self.array.rows * self.array.cols
    }

    /// Scene diagonal; normalizes learned path-length increments.
    pub fn distance_scale(&self) -> f64 {
        let e = self.room.extents;
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }
}
