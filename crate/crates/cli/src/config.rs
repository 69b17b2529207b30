use std::path::{Path, PathBuf};

use continuum_dropout::data::{gen_gaussian_blobs, gen_two_spirals, load_csv, normalize, split, VectorDataset};
use continuum_dropout::infercalib::DEFAULT_N_MC;
use continuum_dropout::model::{Model, ModelConfig};
use continuum_dropout::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "CDROP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    TwoSpirals {
        n_per_class: usize,
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    GaussianBlobs {
        k: usize,
        d_x: usize,
        separation: f64,
        noise_std: f64,
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Relative paths resolve against the config file's directory.
    Csv { path: PathBuf },
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            seed: 0,
        }
    }
}

fn default_n_mc() -> usize {
    DEFAULT_N_MC
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Monte-Carlo seeds; evaluation and calibration use the first.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_mc: default_n_mc(),
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    pub output_dir: PathBuf,
}

/// A parsed config with everything derived from it.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub hash: String,
    pub base_dir: PathBuf,
    pub model: Model,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base_dir)
    }

    pub fn new(config: ExperimentConfig, base_dir: PathBuf) -> Result<Self, CliError> {
        config.training.validate().map_err(CliError::config)?;
        if config.inference.n_mc == 0 {
            return Err(CliError::config("inference.n_mc must be >= 1"));
        }
        if config.inference.seeds.is_empty() {
            return Err(CliError::config("inference.seeds must not be empty"));
        }
        let model = Model::new(config.model.clone()).map_err(CliError::from)?;
        let hash = config_hash(&config);
        Ok(Self {
            config,
            hash,
            base_dir,
            model,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.config.output_dir)
    }

    /// Generated or loaded, split and normalized.
    pub fn dataset(&self) -> Result<VectorDataset, CliError> {
        let raw = match &self.config.data {
            DataSource::TwoSpirals {
                n_per_class,
                noise_std,
                seed,
            } => gen_two_spirals(*n_per_class, *noise_std, *seed),
            DataSource::GaussianBlobs {
                k,
                d_x,
                separation,
                noise_std,
                n_per_class,
                seed,
            } => gen_gaussian_blobs(*k, *d_x, *separation, *noise_std, *n_per_class, *seed),
            DataSource::Csv { path } => load_csv(&self.base_dir.join(path)),
        }
        .map_err(CliError::config)?;
        if raw.d_x() != self.config.model.d_x || raw.n_classes() > self.config.model.n_classes {
            return Err(CliError::config(format!(
                "data has {} features and {} classes, model expects {} and {}",
                raw.d_x(),
                raw.n_classes(),
                self.config.model.d_x,
                self.config.model.n_classes
            )));
        }
        let s = split(&raw, self.config.split.fractions, self.config.split.seed).map_err(CliError::config)?;
        normalize(&s).map_err(CliError::from)
    }

    /// `# key=value` provenance lines for CSV outputs.
    pub fn provenance(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("config_hash".to_string(), self.hash.clone()),
            ("dropout".to_string(), self.config.model.dropout.name().to_string()),
        ];
        if let Some(r) = self.model.rates() {
            out.push(("lambda1".into(), r.lambda1.to_string()));
            out.push(("lambda2".into(), r.lambda2.to_string()));
        }
        out.push(("train_seed".into(), self.config.training.seed.to_string()));
        out.push(("split_seed".into(), self.config.split.seed.to_string()));
        out.push((
            "mc_seeds".into(),
            self.config
                .inference
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ));
        out
    }

    /// Provenance as a JSON object, embedded in every JSON output.
    pub fn provenance_json(&self) -> serde_json::Value {
        let rates = self.model.rates();
        serde_json::json!({
            "config_hash": self.hash,
            "dropout": self.config.model.dropout,
            "lambda1": rates.map(|r| r.lambda1),
            "lambda2": rates.map(|r| r.lambda2),
            "train_seed": self.config.training.seed,
            "split_seed": self.config.split.seed,
            "mc_seeds": self.config.inference.seeds,
        })
    }
}

/// SHA-256 of the canonical JSON form (defaults filled in).
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    format!("{:x}", Sha256::digest(bytes))
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
