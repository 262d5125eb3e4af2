//! Run configuration.
//!
//! The text form is TOML whose keys are exactly the field names of
//! [`Config`]. Missing keys take their defaults; unknown keys are rejected.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the coupled model are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Recognition and synthesis trained jointly with both feedback paths.
    #[default]
    Full,
    /// Recognition module alone.
    RecOnly,
    /// Conditional synthesis alone, conditioned on frozen features.
    ViewOnly,
    /// Recognition augmented by a frozen, separately trained generator.
    AugOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] =
        [AblationMode::Full, AblationMode::RecOnly, AblationMode::ViewOnly, AblationMode::AugOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::RecOnly => "rec_only",
            AblationMode::ViewOnly => "view_only",
            AblationMode::AugOnly => "aug_only",
        }
    }

    /// Generator and discriminator receive updates.
    pub fn trains_synthesis(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::ViewOnly)
    }

    /// Embedding network (and optionally the extractor) receives updates.
    pub fn trains_recognition(self) -> bool {
        !matches!(self, AblationMode::ViewOnly)
    }

    /// Generated images join the support set.
    pub fn augments(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::AugOnly)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("ablation_mode", format!("unknown mode `{s}`")))
    }
}

/// Stage of the staged training pipeline; recorded in every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Distill,
    Base,
    Novel,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Pretrain, Phase::Distill, Phase::Base, Phase::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Distill => "distill",
            Phase::Base => "base",
            Phase::Novel => "novel",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config("phase", format!("unknown phase `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub image_resolution: usize,
    pub noise_dim: usize,
    pub feature_dim: usize,
    pub embed_hidden: usize,
    pub embed_out: usize,
    pub lambda_id: f64,
    pub lambda_cat: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub n_support_base: usize,
    pub n_support_novel: usize,
    pub n_query: usize,
    pub m_views: usize,
    pub iters_base: usize,
    pub iters_novel: usize,
    pub gan_batch: usize,
    /// Rotation about the vertical (y) axis.
    pub azimuth_range: [f64; 2],
    /// Rotation about the x axis.
    pub elevation_range: [f64; 2],
    /// Rotation about the viewing (z) axis.
    pub roll_range: [f64; 2],
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub joint_feature_update: bool,
    /// Apply the identity term to the discriminator/encoder only.
    pub identity_updates_d_only: bool,
    pub deterministic_order: bool,

    /// Channels of the learned constant cube.
    pub gen_channels: usize,
    /// Channels of the first discriminator stage.
    pub disc_channels: usize,
    /// Channels of the first feature-extractor convolution.
    pub extractor_channels: usize,
    /// Teacher input resolution as a multiple of `image_resolution`.
    pub teacher_scale: usize,

    pub base_categories: usize,
    pub k_shot: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub distill_iters: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub eval_is_splits: usize,

    pub toy_base: usize,
    pub toy_novel: usize,
    pub toy_images_per_category: usize,
    pub toy_jitter: f64,
    pub toy_shading: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            image_resolution: 64,
            noise_dim: 128,
            feature_dim: 1000,
            embed_hidden: 128,
            embed_out: 128,
            lambda_id: 10.0,
            lambda_cat: 1.0,
            lr: 5e-5,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            n_support_base: 5,
            n_support_novel: 1,
            n_query: 1,
            m_views: 1,
            iters_base: 1400,
            iters_novel: 100,
            gan_batch: 64,
            azimuth_range: [-PI, PI],
            elevation_range: [-FRAC_PI_4, FRAC_PI_4],
            roll_range: [0.0, 0.0],
            seed: 0,
            ablation_mode: AblationMode::Full,
            joint_feature_update: false,
            identity_updates_d_only: false,
            deterministic_order: true,
            gen_channels: 512,
            disc_channels: 64,
            extractor_channels: 64,
            teacher_scale: 4,
            base_categories: 8,
            k_shot: 1,
            pretrain_epochs: 30,
            pretrain_lr: 1e-3,
            pretrain_batch: 32,
            distill_iters: 500,
            distill_lr: 1e-3,
            distill_batch: 32,
            checkpoint_interval: 0,
            eval_is_splits: 5,
            toy_base: 8,
            toy_novel: 4,
            toy_images_per_category: 20,
            toy_jitter: 0.05,
            toy_shading: 0.3,
        }
    }
}

impl Config {
    /// Desk-scale preset for the procedural toy dataset.
    pub fn toy() -> Self {
        Self {
            image_resolution: 32,
            noise_dim: 16,
            feature_dim: 64,
            embed_hidden: 64,
            embed_out: 32,
            lr: 2e-4,
            iters_base: 300,
            iters_novel: 50,
            gen_channels: 32,
            disc_channels: 16,
            extractor_channels: 8,
            pretrain_epochs: 25,
            ..Self::default()
        }
    }

    pub fn teacher_resolution(&self) -> usize {
        self.image_resolution * self.teacher_scale
    }

    /// Width of the latent vector fed to the generator.
    pub fn latent_dim(&self) -> usize {
        self.feature_dim + self.noise_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_resolution", self.image_resolution),
            ("noise_dim", self.noise_dim),
            ("feature_dim", self.feature_dim),
            ("embed_hidden", self.embed_hidden),
            ("embed_out", self.embed_out),
            ("n_support_base", self.n_support_base),
            ("n_support_novel", self.n_support_novel),
            ("n_query", self.n_query),
            ("m_views", self.m_views),
            ("gan_batch", self.gan_batch),
            ("gen_channels", self.gen_channels),
            ("disc_channels", self.disc_channels),
            ("extractor_channels", self.extractor_channels),
            ("teacher_scale", self.teacher_scale),
            ("base_categories", self.base_categories),
            ("k_shot", self.k_shot),
            ("pretrain_batch", self.pretrain_batch),
            ("distill_batch", self.distill_batch),
            ("eval_is_splits", self.eval_is_splits),
            ("toy_images_per_category", self.toy_images_per_category),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let r = self.image_resolution;
        if r < 16 || !r.is_power_of_two() {
            return Err(Error::config("image_resolution", format!("{r} is not a power of two >= 16")));
        }
        for (field, v) in [("lambda_id", self.lambda_id), ("lambda_cat", self.lambda_cat), ("toy_jitter", self.toy_jitter), ("toy_shading", self.toy_shading)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("{v} must be finite and non-negative")));
            }
        }
        for (field, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("distill_lr", self.distill_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} must lie in [0, 1)")));
            }
        }
        for (field, [lo, hi]) in [
            ("azimuth_range", self.azimuth_range),
            ("elevation_range", self.elevation_range),
            ("roll_range", self.roll_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && -PI <= lo && lo <= hi && hi <= PI) {
                return Err(Error::config(field, format!("[{lo}, {hi}] is not a subinterval of [-pi, pi]")));
            }
        }
        if self.n_support_novel > self.k_shot {
            return Err(Error::config("n_support_novel", "cannot exceed k_shot"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(offending_key(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Applies a `key=value` override; the value uses TOML syntax, and bare
    /// words are read as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) {
            return Err(Error::config(key, "unknown field"));
        }
        let value = match (&table[key], value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// `FBNET_SEED` in the environment replaces `seed`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var("FBNET_SEED") {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("FBNET_SEED=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}

fn offending_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        return rest.split('`').next().unwrap_or("config").to_string();
    }
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".to_string())
}
