//! Experiment configuration: one declarative tree covering code shape,
//! channel, model, training, evaluation, and reference-curve settings,
//! serialized as TOML.
//!
//! Built-in presets: `paper` (full-scale hyperparameters) and `desk`
//! (a small configuration that trains in minutes on a CPU).
//!
//! Randomness policy: `seed` is the single master seed; every consumer
//! derives its own stream from `(seed, purpose-tag, index)`. The optional
//! `train.seed` and `eval.seed` fields override the master for that phase
//! only.

use crate::bits::MAX_BLOCK_BITS;
use crate::error::{Error, Result};
use crate::nn::{HeadKind, NetworkConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How many transmitters share the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Two users superposing on the multiple-access channel.
    Mac2,
    /// One user, as used by the time-division baseline.
    SingleUser,
}

impl Mode {
    pub fn num_users(self) -> usize {
        match self {
            Mode::Mac2 => 2,
            Mode::SingleUser => 1,
        }
    }
}

/// Working floating-point width for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeSection {
    /// Message bits per user.
    pub k: usize,
    /// Bits per block.
    pub m: usize,
    /// Blocks per message.
    pub l: usize,
    /// Interaction rounds.
    pub t: usize,
    /// Decoder refinement iterations.
    pub n_iter: usize,
}

impl Default for CodeSection {
    fn default() -> Self {
        CodeSection {
            k: 51,
            m: 3,
            l: 17,
            t: 8,
            n_iter: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    /// Operating forward SNR in dB; also the curriculum target unless
    /// `train.snr_target_db` overrides it.
    pub snr_ff_db: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection { snr_ff_db: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub clamp_bound: u32,
    pub precision: Precision,
    /// Share one parity network between the two users instead of training
    /// independent weights.
    pub shared_parity: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            clamp_bound: 10,
            precision: Precision::F32,
            shared_parity: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_batches: usize,
    /// Batches over which the SNR ramps linearly from `snr_start_db` to
    /// the target.
    pub curriculum_batches: usize,
    pub lr: f64,
    /// The learning rate decays linearly to `lr * lr_final_fraction` by the
    /// last batch; 1 keeps it constant.
    pub lr_final_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub snr_start_db: f64,
    /// Curriculum endpoint; defaults to `channel.snr_ff_db`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_target_db: Option<f64>,
    /// Override of the master seed for training streams.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Examples per forward/backward slice; gradients are accumulated
    /// across slices to form one batch update.
    pub microbatch: usize,
    /// Log cadence in batches (the first and last batch always log).
    pub log_every: usize,
    /// Validation cadence in batches; validation estimates BLER with the
    /// current weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validate_every: Option<usize>,
    /// Stop early once validation BLER falls to or below this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_bler: Option<f64>,
    /// Episodes per validation estimate.
    pub validate_trials: usize,
    /// Episodes of the final power-recalibration pass; 0 disables it.
    pub recalibrate_episodes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 8192,
            total_batches: 180_000,
            curriculum_batches: 30_000,
            lr: 1e-3,
            lr_final_fraction: 1.0,
            weight_decay: 0.01,
            grad_clip: 0.5,
            snr_start_db: 3.0,
            snr_target_db: None,
            seed: None,
            microbatch: 128,
            log_every: 100,
            validate_every: None,
            stop_at_bler: None,
            validate_trials: 2048,
            recalibrate_episodes: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    /// Override of the master seed for evaluation streams.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Stop once each user has accumulated this many block errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_errors: Option<u64>,
    /// Forward SNRs to evaluate, one result row each; empty means the
    /// operating SNR only.
    pub snr_db: Vec<f64>,
    /// Episodes per batched evaluation slice.
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            trials: 10_000,
            seed: None,
            stop_at_errors: None,
            snr_db: Vec::new(),
            chunk: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub snr_db_step: f64,
    /// Round counts whose blocklengths n = t·l get a finite-length curve.
    pub t_list: Vec<usize>,
    /// Block error probability for the normal approximation.
    pub epsilon: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            snr_db_min: -1.0,
            snr_db_max: 1.0,
            snr_db_step: 0.1,
            t_list: vec![7, 8, 9, 10, 11, 12],
            epsilon: 1e-6,
        }
    }
}

/// The complete declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Master seed; all randomness derives from it.
    pub seed: u64,
    pub code: CodeSection,
    pub channel: ChannelSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bounds: BoundsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Mac2,
            seed: 1,
            code: CodeSection::default(),
            channel: ChannelSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bounds: BoundsSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        ExperimentConfig::default()
    }

    /// Small configuration that trains on a CPU in minutes: K=12 bits in
    /// 6 blocks of 2, six rounds, 2 dB, early stopping on validation BLER.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.code = CodeSection {
            k: 12,
            m: 2,
            l: 6,
            t: 6,
            n_iter: 2,
        };
        cfg.channel.snr_ff_db = 2.0;
        cfg.train.batch_size = 512;
        cfg.train.total_batches = 5000;
        cfg.train.curriculum_batches = 1000;
        cfg.train.lr_final_fraction = 0.1;
        cfg.train.microbatch = 128;
        cfg.train.log_every = 25;
        cfg.train.validate_every = Some(250);
        cfg.train.stop_at_bler = Some(0.05);
        cfg.train.validate_trials = 2048;
        cfg.train.recalibrate_episodes = 8192;
        cfg.eval.trials = 10_000;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; available: paper, desk"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// Loads and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.code;
        if c.m == 0 || c.m > MAX_BLOCK_BITS {
            return Err(Error::Config(format!(
                "code.m must be in 1..={MAX_BLOCK_BITS}, got {}",
                c.m
            )));
        }
        if c.k != c.l * c.m {
            return Err(Error::Config(format!(
                "code.k must equal l*m: k={}, l={}, m={}",
                c.k, c.l, c.m
            )));
        }
        if c.l == 0 || c.t == 0 {
            return Err(Error::Config("code.l and code.t must be positive".into()));
        }
        self.encoder_network_config().validate()?;
        self.decoder_network_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.total_batches == 0 || t.microbatch == 0 || t.log_every == 0 {
            return Err(Error::Config(
                "train.batch_size, total_batches, microbatch, log_every must be positive".into(),
            ));
        }
        let eff = t.microbatch.min(t.batch_size);
        if t.batch_size % eff != 0 {
            return Err(Error::Config(format!(
                "train.batch_size {} must be a multiple of microbatch {}",
                t.batch_size, t.microbatch
            )));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.grad_clip > 0.0) || t.weight_decay < 0.0 {
            return Err(Error::Config(
                "train.lr and grad_clip must be positive, weight_decay nonnegative".into(),
            ));
        }
        if !(t.lr_final_fraction > 0.0 && t.lr_final_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_final_fraction must be in (0, 1], got {}",
                t.lr_final_fraction
            )));
        }
        if let Some(v) = t.validate_every {
            if v == 0 || t.validate_trials == 0 {
                return Err(Error::Config(
                    "train.validate_every and validate_trials must be positive".into(),
                ));
            }
        }
        if let Some(b) = t.stop_at_bler {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "train.stop_at_bler must lie in [0, 1], got {b}"
                )));
            }
        }
        let e = &self.eval;
        if e.trials == 0 || e.chunk == 0 {
            return Err(Error::Config("eval.trials and eval.chunk must be positive".into()));
        }
        if e.stop_at_errors == Some(0) {
            return Err(Error::Config("eval.stop_at_errors must be at least 1".into()));
        }
        let b = &self.bounds;
        if !(b.epsilon > 0.0 && b.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "bounds.epsilon must lie in (0, 1), got {}",
                b.epsilon
            )));
        }
        if !(b.snr_db_step > 0.0) || b.snr_db_max < b.snr_db_min {
            return Err(Error::Config("bounds SNR sweep is empty or malformed".into()));
        }
        if b.t_list.is_empty() || b.t_list.iter().any(|&t| t == 0) {
            return Err(Error::Config("bounds.t_list must hold positive rounds".into()));
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.mode.num_users()
    }

    /// Channel uses per episode.
    pub fn channel_uses(&self) -> usize {
        self.code.t * self.code.l
    }

    /// Sum rate in bits per channel use.
    pub fn sum_rate(&self) -> f64 {
        (self.num_users() * self.code.k) as f64 / self.channel_uses() as f64
    }

    /// Curriculum endpoint in dB.
    pub fn snr_target_db(&self) -> f64 {
        self.train.snr_target_db.unwrap_or(self.channel.snr_ff_db)
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }

    /// SNRs the eval command reports, defaulting to the operating SNR.
    pub fn eval_snrs(&self) -> Vec<f64> {
        if self.eval.snr_db.is_empty() {
            vec![self.channel.snr_ff_db]
        } else {
            self.eval.snr_db.clone()
        }
    }

    /// Knowledge-vector width per block at the encoders.
    pub fn encoder_input_width(&self) -> usize {
        self.code.m + 2 * (self.code.t - 1)
    }

    /// Input width per block at the decoder: received history plus one
    /// belief slot per user.
    pub fn decoder_input_width(&self) -> usize {
        self.code.t + self.num_users() * self.code.m
    }

    pub fn encoder_network_config(&self) -> NetworkConfig {
        NetworkConfig {
            d_in: self.encoder_input_width(),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            seq_len: self.code.l,
            clamp_bound: self.model.clamp_bound,
            head: HeadKind::Parity,
        }
    }

    pub fn decoder_network_config(&self) -> NetworkConfig {
        NetworkConfig {
            d_in: self.decoder_input_width(),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            seq_len: self.code.l,
            clamp_bound: self.model.clamp_bound,
            head: HeadKind::ClassProbs {
                users: self.num_users(),
                classes: 1 << self.code.m,
            },
        }
    }

    /// The matched-energy time-division configuration derived from a
    /// two-user experiment: one user, half the rounds, 3 dB more SNR.
    pub fn tdma_single_user(&self) -> Result<Self> {
        if self.mode != Mode::Mac2 {
            return Err(Error::Config(
                "time-division baseline derives from a two-user config".into(),
            ));
        }
        if self.code.t % 2 != 0 {
            return Err(Error::Config(format!(
                "time division requires an even round count, got t={}",
                self.code.t
            )));
        }
        let mut cfg = self.clone();
        cfg.mode = Mode::SingleUser;
        cfg.code.t = self.code.t / 2;
        cfg.channel.snr_ff_db = self.channel.snr_ff_db + 3.0;
        if let Some(t) = cfg.train.snr_target_db {
            cfg.train.snr_target_db = Some(t + 3.0);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
