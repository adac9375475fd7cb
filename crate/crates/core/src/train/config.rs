use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::MaskSource;
use crate::models::{Arm, GeneratorConfig, SaadConfig};

/// How hole pixels are filled before the generator sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoleFill {
    Zero,
    /// Per-channel mean of the observed pixels.
    Mean,
}

impl fmt::Display for HoleFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HoleFill::Zero => "zero",
            HoleFill::Mean => "mean",
        })
    }
}

impl FromStr for HoleFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" => Ok(HoleFill::Zero),
            "mean" => Ok(HoleFill::Mean),
            other => Err(Error::Config(format!("unknown hole fill `{other}` (expected zero or mean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub channels: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    pub mask_source: MaskSource,
    pub hole_fill: HoleFill,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: u64,
    /// Evaluate on the test split every this many steps (0 = never).
    pub eval_interval: u64,
    pub arm: Arm,
    /// Restrict the SAAD adversarial term to hole pixels.
    pub adv_masked_only: bool,
    pub gen_base_channels: usize,
    pub gen_depth: usize,
    pub gen_dilations: Vec<usize>,
    pub gen_mask_channel: bool,
    pub disc_channels: Vec<usize>,
    pub disc_strides: Vec<usize>,
    /// Verify bitwise after every update that the other network is untouched.
    pub check_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = SaadConfig::default();
        Self {
            image_size: 64,
            channels: 3,
            batch_size: 8,
            steps: 2000,
            lr_gen: 1e-4,
            lr_disc: 4e-4,
            weights: LossWeights::default(),
            mask_source: MaskSource::Rectangles,
            hole_fill: HoleFill::Zero,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            arm: Arm::Saad,
            adv_masked_only: false,
            gen_base_channels: g.base_channels,
            gen_depth: g.depth,
            gen_dilations: g.dilations,
            gen_mask_channel: g.mask_channel,
            disc_channels: d.channels,
            disc_strides: d.strides,
            check_isolation: false,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: `{s}` is not a non-negative integer")))
        })
        .collect()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 23] = [
        "image_size",
        "channels",
        "batch_size",
        "steps",
        "lr_gen",
        "lr_disc",
        "lambda_r",
        "lambda_adv",
        "gamma",
        "mask_source",
        "hole_fill",
        "seed",
        "checkpoint_interval",
        "eval_interval",
        "arm",
        "adv_masked_only",
        "gen_base_channels",
        "gen_depth",
        "gen_dilations",
        "gen_mask_channel",
        "disc_channels",
        "disc_strides",
        "check_isolation",
    ];

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "image_size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "lr_gen" => self.lr_gen.to_string(),
            "lr_disc" => self.lr_disc.to_string(),
            "lambda_r" => self.weights.lambda_r.to_string(),
            "lambda_adv" => self.weights.lambda_adv.to_string(),
            "gamma" => self.weights.gamma.to_string(),
            "mask_source" => self.mask_source.to_string(),
            "hole_fill" => self.hole_fill.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "arm" => self.arm.to_string(),
            "adv_masked_only" => self.adv_masked_only.to_string(),
            "gen_base_channels" => self.gen_base_channels.to_string(),
            "gen_depth" => self.gen_depth.to_string(),
            "gen_dilations" => join(&self.gen_dilations),
            "gen_mask_channel" => self.gen_mask_channel.to_string(),
            "disc_channels" => join(&self.disc_channels),
            "disc_strides" => join(&self.disc_strides),
            "check_isolation" => self.check_isolation.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr_gen" => self.lr_gen = parse(key, v)?,
            "lr_disc" => self.lr_disc = parse(key, v)?,
            "lambda_r" => self.weights.lambda_r = parse(key, v)?,
            "lambda_adv" => self.weights.lambda_adv = parse(key, v)?,
            "gamma" => self.weights.gamma = parse(key, v)?,
            "mask_source" => self.mask_source = v.parse()?,
            "hole_fill" => self.hole_fill = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "arm" => self.arm = v.parse()?,
            "adv_masked_only" => self.adv_masked_only = parse(key, v)?,
            "gen_base_channels" => self.gen_base_channels = parse(key, v)?,
            "gen_depth" => self.gen_depth = parse(key, v)?,
            "gen_dilations" => self.gen_dilations = parse_list(key, v)?,
            "gen_mask_channel" => self.gen_mask_channel = parse(key, v)?,
            "disc_channels" => self.disc_channels = parse_list(key, v)?,
            "disc_strides" => self.disc_strides = parse_list(key, v)?,
            "check_isolation" => self.check_isolation = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn echo(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_channels: self.channels,
            mask_channel: self.gen_mask_channel,
            base_channels: self.gen_base_channels,
            depth: self.gen_depth,
            dilations: self.gen_dilations.clone(),
            image_size: self.image_size,
        }
    }

    pub fn saad_config(&self) -> SaadConfig {
        SaadConfig {
            image_channels: self.channels,
            channels: self.disc_channels.clone(),
            strides: self.disc_strides.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_gen.is_finite() && self.lr_gen > 0.0 && self.lr_disc.is_finite() && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.weights.validate()?;
        self.generator_config().validate()?;
        let saad = self.saad_config();
        saad.validate()?;
        let total: usize = saad.level_factors().last().copied().unwrap_or(1);
        if !self.image_size.is_multiple_of(total) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the discriminator stride {total}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrip() {
        let mut c = TrainConfig::default();
        c.set("arm", "patch_mean").unwrap();
        c.set("mask_source", "stripes:4:6").unwrap();
        c.set("lr_gen", "0.0003").unwrap();
        c.set("gen_dilations", "1,2,4").unwrap();
        let back = TrainConfig::from_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), c.echo());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::default();
        assert!(c.set("arm", "wgan").is_err());
        assert!(c.set("nonsense", "1").is_err());
        assert!(TrainConfig::from_text("lr_gen = 0").is_err());
        assert!(TrainConfig::from_text("image_size = 60").is_err());
    }
}
