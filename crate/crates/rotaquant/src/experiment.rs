//! Experiment configuration: JSON file + flag overrides + defaults, plus the
//! provenance manifest written next to every artifact.

use std::fs;
use std::path::Path;

use rotaquant_core::lora::FinetuneConfig;
use rotaquant_core::model::ModelConfig;
use rotaquant_core::quant::QuantSpec;
use rotaquant_core::rotation::RotationPlan;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "ROTAQUANT_SEED";
pub const DEFAULT_CORPUS_LEN: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { seed: 0, len: DEFAULT_CORPUS_LEN }
    }
}

/// Everything one experiment needs; each section falls back to its default
/// when absent from the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub rotation: RotationPlan,
    pub finetune: FinetuneConfig,
    pub quant: QuantSpec,
    pub corpus: CorpusConfig,
}

impl ExperimentConfig {
    /// Precedence: flag > config file > default. Flag overrides are applied
    /// by the CLI after this returns; the seed env var beats the file here.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("parsing {}: {e}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .parse()
                .map_err(|e| anyhow::anyhow!("{SEED_ENV} must be an integer: {e}"))?;
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    /// One seed drives every stochastic component.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.rotation.seed = seed;
        self.finetune.seed = seed;
        self.corpus.seed = seed;
    }

    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reproducibility record written alongside every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Manifest {
            config_sha256: cfg.sha256(),
            seed: cfg.model.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
