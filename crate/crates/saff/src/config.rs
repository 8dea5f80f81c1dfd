//! Experiment configuration.
//!
//! One flat key=value surface serves the config file and the command line:
//! every key below is also a `--key value` flag, so the two can never
//! drift. `config.resolved` written into each run directory is this same
//! format and reproduces the run exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelDims;
use crate::ssid::SsidConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,

    // Synthetic data.
    pub data_classes: usize,
    pub data_dim: usize,
    pub data_per_domain: usize,
    pub data_noise: f64,
    /// Target-domain multiplier on the content noise (second-order style).
    pub data_target_noise_mult: f64,
    /// Half-width of the uniform box the class content means are drawn from.
    pub data_spread: f64,
    pub data_gamma: f64,
    pub data_beta: f64,
    pub data_rotation_deg: f64,

    // Model.
    pub model_tokens: usize,
    pub model_width: usize,
    pub model_blocks: usize,
    pub model_bottleneck: usize,

    // Optimization.
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,

    // Losses.
    pub alpha: f64,
    pub rate: f64,
    pub enable_source_ce: bool,
    pub enable_ssid_ce: bool,
    pub enable_target_im: bool,
    pub enable_discrimination: bool,
    pub enable_style: bool,
    pub literal_im: bool,
    pub literal_style_second_term: bool,
    pub literal_uprate_scope: bool,

    // Fusion.
    pub ssid_pre_normalize: bool,
    pub ssid_detach_stats: bool,
    pub ssid_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 36,
            data_classes: 5,
            data_dim: 16,
            data_per_domain: 600,
            data_noise: 1.0,
            data_target_noise_mult: 1.0,
            data_spread: 2.0,
            data_gamma: 10.0,
            data_beta: 4.0,
            data_rotation_deg: 15.0,
            model_tokens: 4,
            model_width: 32,
            model_blocks: 4,
            model_bottleneck: 16,
            batch: 18,
            learning_rate: 0.005,
            momentum: 0.9,
            pretrain_epochs: 10,
            epochs: 20,
            alpha: 1.0,
            rate: 0.9,
            enable_source_ce: true,
            enable_ssid_ce: true,
            enable_target_im: true,
            enable_discrimination: true,
            enable_style: true,
            literal_im: false,
            literal_style_second_term: false,
            literal_uprate_scope: false,
            ssid_pre_normalize: true,
            ssid_detach_stats: true,
            ssid_epsilon: 1e-5,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl TrainConfig {
            /// Every key with its current value, in declaration order.
            pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, config_keys!(@fmt self.$field, $kind))),+]
            }

            /// Apply one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = config_keys!(@parse key, value, $kind);
                        Ok(())
                    })+
                    _ => Err(Error::validation(format!("unknown config key {key:?}"))),
                }
            }
        }
    };
    (@fmt $v:expr, bool) => { $v.to_string() };
    (@fmt $v:expr, u64) => { $v.to_string() };
    (@fmt $v:expr, usize) => { $v.to_string() };
    (@fmt $v:expr, f64) => { format!("{}", $v) };
    (@parse $key:expr, $value:expr, $kind:ty) => {
        $value.parse::<$kind>().map_err(|_| {
            Error::validation(format!("bad value {:?} for {}", $value, $key))
        })?
    };
}

config_keys! {
    "seed" => seed: u64,
    "data.classes" => data_classes: usize,
    "data.dim" => data_dim: usize,
    "data.per_domain" => data_per_domain: usize,
    "data.noise" => data_noise: f64,
    "data.target_noise_mult" => data_target_noise_mult: f64,
    "data.spread" => data_spread: f64,
    "data.gamma" => data_gamma: f64,
    "data.beta" => data_beta: f64,
    "data.rotation_deg" => data_rotation_deg: f64,
    "model.tokens" => model_tokens: usize,
    "model.width" => model_width: usize,
    "model.blocks" => model_blocks: usize,
    "model.bottleneck" => model_bottleneck: usize,
    "train.batch" => batch: usize,
    "train.lr" => learning_rate: f64,
    "train.momentum" => momentum: f64,
    "train.pretrain_epochs" => pretrain_epochs: usize,
    "train.epochs" => epochs: usize,
    "loss.alpha" => alpha: f64,
    "loss.rate" => rate: f64,
    "loss.enable_source_ce" => enable_source_ce: bool,
    "loss.enable_ssid_ce" => enable_ssid_ce: bool,
    "loss.enable_target_im" => enable_target_im: bool,
    "loss.enable_discrimination" => enable_discrimination: bool,
    "loss.enable_style" => enable_style: bool,
    "loss.literal_im" => literal_im: bool,
    "loss.literal_style_second_term" => literal_style_second_term: bool,
    "loss.literal_uprate_scope" => literal_uprate_scope: bool,
    "ssid.pre_normalize" => ssid_pre_normalize: bool,
    "ssid.detach_stats" => ssid_detach_stats: bool,
    "ssid.epsilon" => ssid_epsilon: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.batch % 3 != 0 {
            return Err(Error::validation(format!(
                "train.batch must be positive and divisible by 3, got {}",
                self.batch
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::validation("loss.alpha must be nonnegative"));
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return Err(Error::validation("epoch counts must be at least 1"));
        }
        if self.ssid_epsilon <= 0.0 {
            return Err(Error::validation("ssid.epsilon must be positive"));
        }
        if self.data_classes < 2 {
            return Err(Error::validation("need at least two classes"));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.data_dim,
            token_count: self.model_tokens,
            block_widths: vec![self.model_width; self.model_blocks],
            bottleneck_dim: self.model_bottleneck,
            class_count: self.data_classes,
            activation: crate::model::Activation::Tanh,
        }
    }

    pub fn ssid_config(&self) -> SsidConfig {
        SsidConfig {
            pre_normalize: self.ssid_pre_normalize,
            detach_stats: self.ssid_detach_stats,
            epsilon: self.ssid_epsilon,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            rate: self.rate,
            enable_source_ce: self.enable_source_ce,
            enable_ssid_ce: self.enable_ssid_ce,
            enable_target_im: self.enable_target_im,
            enable_discrimination: self.enable_discrimination,
            enable_style: self.enable_style,
            literal_im: self.literal_im,
            literal_style_second_term: self.literal_style_second_term,
            literal_uprate_scope: self.literal_uprate_scope,
        }
    }

    pub fn domain_spec(&self) -> crate::data::DomainSpec {
        let mut spec = crate::data::DomainSpec::desk_default(self.seed);
        spec.class_count = self.data_classes;
        spec.dim = self.data_dim;
        spec.noise_scale = self.data_noise;
        spec.target_noise_mult = self.data_target_noise_mult;
        let mut rng = crate::rng::stream(self.seed, "data.spec");
        use rand::Rng;
        spec.class_means = (0..self.data_classes)
            .map(|_| {
                (0..self.data_dim)
                    .map(|_| rng.random_range(-self.data_spread..self.data_spread))
                    .collect()
            })
            .collect();
        spec.source_style = crate::data::StyleTransform::identity(self.data_dim);
        // Heterogeneous channel-wise style: gains log-uniform in
        // [1/gamma, gamma], shifts uniform in [-beta, beta].
        let gains = (0..self.data_dim)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                self.data_gamma.max(1.0).powf(u)
            })
            .collect();
        let shifts = (0..self.data_dim)
            .map(|_| rng.random_range(-self.data_beta..=self.data_beta))
            .collect();
        spec.target_style = crate::data::StyleTransform {
            scale: gains,
            shift: shifts,
            rotations: vec![self.data_rotation_deg.to_radians()],
        };
        spec
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.to_pairs() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Parse a key=value file on top of the defaults. Blank lines and
    /// `#`-comments are ignored; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(config)
    }
}
