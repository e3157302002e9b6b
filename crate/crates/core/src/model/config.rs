use serde::{Deserialize, Serialize};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Morph only in, two constituent estimates out.
    ReferenceFree,
    /// Morph plus a reference of one constituent in, the other constituent out.
    Differential,
}

impl Mode {
    pub fn input_channels(self) -> usize {
        match self {
            Mode::ReferenceFree => 3,
            Mode::Differential => 6,
        }
    }

    pub fn output_channels(self) -> usize {
        match self {
            Mode::ReferenceFree => 6,
            Mode::Differential => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ReferenceFree => "reference_free",
            Mode::Differential => "differential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub mode: Mode,
    pub down_blocks: usize,
    pub up_blocks: usize,
    pub attn_down_index: usize,
    pub attn_up_index: usize,
    pub base_channels: usize,
    /// Width of level `i` is `base_channels * channel_mult[i]`.
    pub channel_mult: Vec<usize>,
    pub dropout: f64,
    pub context_len: usize,
    /// Width of one encoder vector. Differential mode concatenates two.
    pub context_dim: usize,
}

impl GeneratorConfig {
    pub fn toy(mode: Mode) -> Self {
        Self {
            resolution: 64,
            mode,
            down_blocks: 4,
            up_blocks: 4,
            attn_down_index: 2,
            attn_up_index: 1,
            base_channels: 32,
            channel_mult: vec![1, 1, 2, 2],
            dropout: 0.1,
            context_len: 8,
            context_dim: 64,
        }
    }

    pub fn paper(mode: Mode) -> Self {
        Self {
            resolution: 256,
            mode,
            down_blocks: 6,
            up_blocks: 6,
            attn_down_index: 4,
            attn_up_index: 1,
            base_channels: 64,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            dropout: 0.1,
            context_len: 77,
            context_dim: 512,
        }
    }

    /// Feature width of the cross-attention keys and values.
    pub fn cross_dim(&self) -> usize {
        match self.mode {
            Mode::ReferenceFree => self.context_dim,
            Mode::Differential => 2 * self.context_dim,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.down_blocks == 0 || self.down_blocks != self.up_blocks {
            return bad(format!("down_blocks {} must equal up_blocks {} and be positive", self.down_blocks, self.up_blocks));
        }
        if self.attn_down_index >= self.down_blocks || self.attn_up_index >= self.up_blocks {
            return bad(format!(
                "attention indices ({}, {}) out of range for {} blocks",
                self.attn_down_index, self.attn_up_index, self.down_blocks
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.channel_mult.len() != self.down_blocks || self.channel_mult.contains(&0) {
            return bad(format!("channel_mult needs {} positive entries", self.down_blocks));
        }
        let factor = 1usize << (self.down_blocks - 1);
        if self.resolution == 0 || self.resolution % factor != 0 {
            return bad(format!("resolution {} not divisible by {factor}", self.resolution));
        }
        if self.base_channels == 0 || self.context_len == 0 || self.context_dim == 0 {
            return bad("base_channels, context_len and context_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorOutput {
    #[default]
    Sigmoid,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub blocks: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    #[serde(default)]
    pub output: DiscriminatorOutput,
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self { blocks: 4, base_channels: 32, leaky_slope: 0.2, output: DiscriminatorOutput::Sigmoid }
    }

    pub fn paper() -> Self {
        Self { blocks: 4, base_channels: 64, leaky_slope: 0.2, output: DiscriminatorOutput::Sigmoid }
    }

    pub fn channels(&self, block: usize) -> usize {
        self.base_channels << block.min(3)
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        if resolution >> self.blocks == 0 || resolution % (1 << self.blocks) != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} too small for {} stride-2 blocks",
                self.blocks
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Hash of everything that fixes the network architecture (mode and
/// resolution included); stored in every artifact built from a model.
pub fn model_config_hash(generator: &GeneratorConfig, discriminator: &DiscriminatorConfig) -> String {
    let canonical = serde_json::json!({ "generator": generator, "discriminator": discriminator });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for mode in [Mode::ReferenceFree, Mode::Differential] {
            GeneratorConfig::toy(mode).validate().unwrap();
            GeneratorConfig::paper(mode).validate().unwrap();
        }
        DiscriminatorConfig::toy().validate(64).unwrap();
        DiscriminatorConfig::paper().validate(256).unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = GeneratorConfig::toy(Mode::ReferenceFree);
        c.up_blocks = 3;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy(Mode::ReferenceFree);
        c.attn_down_index = 4;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy(Mode::ReferenceFree);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy(Mode::ReferenceFree);
        c.resolution = 60;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy(Mode::ReferenceFree);
        c.channel_mult = vec![1, 2, 0, 2];
        assert!(c.validate().is_err());
        c.channel_mult.pop();
        assert!(c.validate().is_err());
        assert!(DiscriminatorConfig::toy().validate(8).is_err());
    }

    #[test]
    fn hash_tracks_mode_and_resolution() {
        let d = DiscriminatorConfig::toy();
        let a = model_config_hash(&GeneratorConfig::toy(Mode::ReferenceFree), &d);
        assert_eq!(a, model_config_hash(&GeneratorConfig::toy(Mode::ReferenceFree), &d));
        assert_ne!(a, model_config_hash(&GeneratorConfig::toy(Mode::Differential), &d));
        let mut r = GeneratorConfig::toy(Mode::ReferenceFree);
        r.resolution = 128;
        assert_ne!(a, model_config_hash(&r, &d));
    }

    #[test]
    fn mode_wire_names() {
        assert_eq!(serde_json::to_string(&Mode::ReferenceFree).unwrap(), "\"reference_free\"");
        assert_eq!(serde_json::from_str::<Mode>("\"differential\"").unwrap(), Mode::Differential);
    }
}
