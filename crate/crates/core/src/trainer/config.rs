//! Training configuration: a flat `key = value` text format with `#`
//! comments. Every field has a key; unknown keys are hard errors.

use crate::degrade::{Downsample, SpecMode};
use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    /// Diffusion steps T.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr_patch: usize,
    pub scale_r: usize,
    pub batch_size: usize,
    pub train_steps: u64,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    /// Negative-queue capacity.
    pub queue_capacity: usize,
    /// Contrastive temperature.
    pub temperature: f32,
    pub proj_dim: usize,
    pub normalize_projections: bool,
    /// Count the positive pair in the contrastive denominator.
    pub include_positive: bool,
    /// Loss-term toggles.
    pub degrad_loss: bool,
    pub encoder_loss: bool,
    /// Replace kernel-predicting convs with plain convs when false.
    pub degradation_aware: bool,
    pub degradation_mode: SpecMode,
    pub downsample: Downsample,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_group: usize,
    pub groupnorm_groups: usize,
    pub rrdb_blocks: usize,
    pub rrdb_channels: usize,
    pub rrdb_growth: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            lr_patch: 64,
            scale_r: 4,
            batch_size: 2,
            train_steps: 2000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            queue_capacity: 2048,
            temperature: 0.07,
            proj_dim: 256,
            normalize_projections: true,
            include_positive: false,
            degrad_loss: true,
            encoder_loss: true,
            degradation_aware: true,
            degradation_mode: SpecMode::AnisotropicNoisy,
            downsample: Downsample::Decimate,
            base_channels: 64,
            channel_mults: vec![1, 2, 2, 4],
            blocks_per_group: 2,
            groupnorm_groups: 8,
            rrdb_blocks: 4,
            rrdb_channels: 64,
            rrdb_growth: 32,
            checkpoint_every: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse `{value}` as bool for key `{key}`"
        ))),
    }
}

fn parse_mults(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<Vec<usize>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config(format!("key `{key}` needs at least one entry")))
            } else {
                Ok(v)
            }
        })
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "lr_patch" => self.lr_patch = parse(key, value)?,
            "scale_r" => self.scale_r = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "train_steps" => self.train_steps = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "queue_capacity" => self.queue_capacity = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "normalize_projections" => self.normalize_projections = parse_bool(key, value)?,
            "include_positive" => self.include_positive = parse_bool(key, value)?,
            "degrad_loss" => self.degrad_loss = parse_bool(key, value)?,
            "encoder_loss" => self.encoder_loss = parse_bool(key, value)?,
            "degradation_aware" => self.degradation_aware = parse_bool(key, value)?,
            "degradation_mode" => self.degradation_mode = value.parse()?,
            "downsample" => self.downsample = value.parse()?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "channel_mults" => self.channel_mults = parse_mults(key, value)?,
            "blocks_per_group" => self.blocks_per_group = parse(key, value)?,
            "groupnorm_groups" => self.groupnorm_groups = parse(key, value)?,
            "rrdb_blocks" => self.rrdb_blocks = parse(key, value)?,
            "rrdb_channels" => self.rrdb_channels = parse(key, value)?,
            "rrdb_growth" => self.rrdb_growth = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses the flat text format on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_text(&text)
    }

    /// Serializes every field back to the text format.
    pub fn to_text(&self) -> String {
        let mults = self
            .channel_mults
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "seed = {}\n\
             diffusion_steps = {}\n\
             beta_start = {}\n\
             beta_end = {}\n\
             lr_patch = {}\n\
             scale_r = {}\n\
             batch_size = {}\n\
             train_steps = {}\n\
             learning_rate = {}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             queue_capacity = {}\n\
             temperature = {}\n\
             proj_dim = {}\n\
             normalize_projections = {}\n\
             include_positive = {}\n\
             degrad_loss = {}\n\
             encoder_loss = {}\n\
             degradation_aware = {}\n\
             degradation_mode = {}\n\
             downsample = {}\n\
             base_channels = {}\n\
             channel_mults = {}\n\
             blocks_per_group = {}\n\
             groupnorm_groups = {}\n\
             rrdb_blocks = {}\n\
             rrdb_channels = {}\n\
             rrdb_growth = {}\n\
             checkpoint_every = {}\n",
            self.seed,
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.lr_patch,
            self.scale_r,
            self.batch_size,
            self.train_steps,
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.queue_capacity,
            self.temperature,
            self.proj_dim,
            self.normalize_projections,
            self.include_positive,
            self.degrad_loss,
            self.encoder_loss,
            self.degradation_aware,
            self.degradation_mode,
            match self.downsample {
                Downsample::Decimate => "decimate",
                Downsample::Bicubic => "bicubic",
            },
            self.base_channels,
            mults,
            self.blocks_per_group,
            self.groupnorm_groups,
            self.rrdb_blocks,
            self.rrdb_channels,
            self.rrdb_growth,
            self.checkpoint_every,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_steps == 0 {
            return Err(Error::Config("batch_size and train_steps must be positive".into()));
        }
        if self.scale_r == 0 {
            return Err(Error::Config("scale_r must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 7;
        cfg.channel_mults = vec![1, 2];
        cfg.degradation_mode = SpecMode::IsotropicNoisefree;
        cfg.downsample = Downsample::Bicubic;
        let parsed = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.channel_mults, vec![1, 2]);
        assert_eq!(parsed.degradation_mode, SpecMode::IsotropicNoisefree);
        assert_eq!(parsed.downsample, Downsample::Bicubic);
    }

    #[test]
    fn comments_and_blank_lines_parse() {
        let cfg = TrainConfig::from_text(
            "# overfit run\nseed = 3   # inline comment\n\nbatch_size = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(TrainConfig::from_text("frobnicate = 1\n").is_err());
        assert!(TrainConfig::from_text("seed 3\n").is_err());
        assert!(TrainConfig::from_text("seed = banana\n").is_err());
    }
}
