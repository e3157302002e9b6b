//! Run configuration: one JSON file, checked against a published schema
//! before any subcommand touches it.

use std::path::{Path, PathBuf};

use demorphlab_core::evaluation::EvalConfig;
use demorphlab_core::model::config::model_config_hash;
use demorphlab_core::model::encoder::EncoderSpec;
use demorphlab_core::model::{DiscriminatorConfig, GeneratorConfig, Mode};
use demorphlab_core::training::TrainConfig;
use demorphlab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: String,
    pub run_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBlock {
    pub n_identities: usize,
    pub n_morphs: usize,
    pub alpha: f64,
}

fn default_dataset() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub resolution: usize,
    pub split_ratio: f64,
    pub seed: u64,
    /// Label written into reports.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub encoder: EncoderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DataBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn schema_errors(instance: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let errors: Vec<String> =
        validator.iter_errors(instance).map(|e| format!("{}: {e}", e.instance_path())).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("config violates schema: {}", errors.join("; "))))
    }
}

impl RunConfig {
    /// Toy preset for `mode` with the given paths.
    pub fn toy(mode: Mode, corpus_dir: &str, run_dir: &str, seed: u64) -> Self {
        Self {
            paths: Paths { corpus_dir: corpus_dir.into(), run_dir: run_dir.into() },
            data: DataBlock {
                resolution: 64,
                split_ratio: 0.6,
                seed,
                dataset: default_dataset(),
                synth: Some(SynthBlock { n_identities: 16, n_morphs: 32, alpha: 0.5 }),
            },
            model: ModelBlock {
                generator: GeneratorConfig::toy(mode),
                discriminator: DiscriminatorConfig::toy(),
                encoder: EncoderSpec::default(),
            },
            train: TrainConfig::toy(mode, seed),
            eval: EvalConfig::toy(),
        }
    }

    /// Validates a JSON value against the schema, then the cross-field rules.
    pub fn from_value(value: Value) -> Result<Self> {
        schema_errors(&value)?;
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        schema_errors(&serde_json::to_value(self)?)?;
        if self.data.resolution != self.model.generator.resolution {
            return Err(Error::Config(format!(
                "data resolution {} differs from generator resolution {}",
                self.data.resolution, self.model.generator.resolution
            )));
        }
        self.train.check_models(&self.model.generator, &self.model.discriminator)?;
        self.eval.validate()
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn model_hash(&self) -> String {
        model_config_hash(&self.model.generator, &self.model.discriminator)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// A config together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config = RunConfig::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base.join(p)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus_dir)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.run_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_round_trips_through_schema() {
        let cfg = RunConfig::toy(Mode::ReferenceFree, "corpus", "run", 3);
        assert_eq!(RunConfig::from_str(&cfg.to_json()).unwrap(), cfg);
        let diff = RunConfig::toy(Mode::Differential, "c", "r", 0);
        RunConfig::from_str(&diff.to_json()).unwrap();
    }

    #[test]
    fn schema_violations_are_config_errors() {
        let cfg = RunConfig::toy(Mode::ReferenceFree, "corpus", "run", 3);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["data"]["split_ratio"] = 1.5.into();
        assert!(matches!(RunConfig::from_value(v.clone()), Err(Error::Config(_))));
        v["data"]["split_ratio"] = 0.6.into();
        v["train"]["surprise"] = 1.into();
        assert!(matches!(RunConfig::from_value(v.clone()), Err(Error::Config(_))));
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["model"]["generator"]["mode"] = "both".into();
        assert!(matches!(RunConfig::from_value(v), Err(Error::Config(_))));
    }

    #[test]
    fn cross_field_rules() {
        let mut cfg = RunConfig::toy(Mode::ReferenceFree, "corpus", "run", 3);
        cfg.train.mode = Mode::Differential;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy(Mode::ReferenceFree, "corpus", "run", 3);
        cfg.data.resolution = 128;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_mode_and_resolution() {
        let a = RunConfig::toy(Mode::ReferenceFree, "c", "r", 0);
        let b = RunConfig::toy(Mode::Differential, "c", "r", 0);
        assert_ne!(a.model_hash(), b.model_hash());
        assert_eq!(a.model_hash(), a.clone().with_seed(9).model_hash());
    }
}
