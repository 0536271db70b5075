use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{DpConfig, RegConfig};
use crate::dap::{AttackSetup, DapMode};
use crate::data::{self, DatasetBundle, Example, GaussianMixture, SplitFractions};
use crate::error::{Error, Result};
use crate::nn::ClassifierSpec;
use crate::seed;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Gaussian(GaussianMixture),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        splits: SplitFractions,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        splits: SplitFractions,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match self {
            DatasetSpec::Gaussian(_) => "gaussian".into(),
            DatasetSpec::Idx { images, .. } => stem(images),
            DatasetSpec::Csv { path, .. } => stem(path),
        }
    }

    fn files(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Gaussian(_) => vec![],
            DatasetSpec::Idx { images, labels, .. } => vec![images, labels],
            DatasetSpec::Csv { path, .. } => vec![path],
        }
    }

    /// Raw (unstandardised) bundle.
    pub fn load(&self, seed: u64) -> Result<DatasetBundle> {
        let split = |examples: Vec<Example>, splits: SplitFractions| {
            let c = examples.iter().map(|e| e.label).max().map_or(0, |m| m + 1);
            if c < 2 {
                return Err(Error::DegenerateDataset("fewer than two classes in the file".into()));
            }
            DatasetBundle::split(examples, c, splits, seed)
        };
        match self {
            DatasetSpec::Gaussian(g) => g.generate(seed),
            DatasetSpec::Idx { images, labels, splits } => split(data::load_idx(images, labels)?, *splits),
            DatasetSpec::Csv { path, splits } => split(data::load_csv(path)?, *splits),
        }
    }
}

/// Hidden layer widths; input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: vec![64, 64] }
    }
}

impl ModelSpec {
    pub fn classifier(&self, bundle: &DatasetBundle) -> ClassifierSpec {
        ClassifierSpec::new(bundle.feature_dim, self.hidden.clone(), bundle.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    Baseline,
    Reg(RegConfig),
    Dp {
        #[serde(flatten)]
        config: DpConfig,
        /// Replace `epochs` with the largest count the accountant allows
        /// under `epsilon`.
        #[serde(default)]
        epochs_from_budget: bool,
    },
    DapT {
        r: f64,
    },
    DapV {
        r: f64,
    },
}

impl Defense {
    /// Column label used in result tables.
    pub fn label(&self) -> String {
        match self {
            Defense::Baseline => "baseline".into(),
            Defense::Reg(_) => "reg".into(),
            Defense::Dp { config, .. } => format!("dp_eps{}", config.epsilon),
            Defense::DapT { .. } => "dap_t".into(),
            Defense::DapV { .. } => "dap_v".into(),
        }
    }

    pub fn dap(&self) -> Option<(DapMode, f64)> {
        match self {
            Defense::DapT { r } => Some((DapMode::DapT, *r)),
            Defense::DapV { r } => Some((DapMode::DapV, *r)),
            _ => None,
        }
    }

    pub fn with_r(&self, r: f64) -> Result<Defense> {
        match self {
            Defense::DapT { .. } => Ok(Defense::DapT { r }),
            Defense::DapV { .. } => Ok(Defense::DapV { r }),
            other => Err(Error::Config(format!("defense {} has no r parameter", other.label()))),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dataset label in result rows; defaults to the dataset kind or file
    /// stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub model: ModelSpec,
    pub defense: Defense,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackSetup,
    #[serde(default)]
    pub seed: u64,
    /// Seed for data generation and splitting; defaults to `seed`. Pinned
    /// across an r sweep so every run sees the same data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// Relative paths resolve against the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, defense: Defense) -> Self {
        ExperimentConfig {
            name: None,
            dataset,
            standardize: true,
            model: ModelSpec::default(),
            defense,
            train: TrainConfig::default(),
            attack: AttackSetup::default(),
            seed: 0,
            data_seed: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn dataset_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.dataset.name())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Seed for the evaluated classifier, shared by every defense so that
    /// runs differing only in the defense start from the same weights.
    pub fn classifier_seed(&self) -> u64 {
        seed::derive(self.seed, &[seed::TAG_CLASSIFIER])
    }

    pub fn validate(&self) -> Result<()> {
        for f in self.dataset.files() {
            if !f.exists() {
                return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        self.train.validate()?;
        match &self.defense {
            Defense::Baseline => {}
            Defense::Reg(reg) => reg.validate()?,
            Defense::Dp { config, .. } => config.validate()?,
            Defense::DapT { r } | Defense::DapV { r } => {
                if !(0.0..=1.0).contains(r) {
                    return Err(Error::Config(format!("r must lie in [0, 1], got {r}")));
                }
                if self.attack.num_shadows == 0 {
                    return Err(Error::Config("need at least one shadow model".into()));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (sorted keys, no output
    /// directory).
    pub fn fingerprint(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&v)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn load_data(&self) -> Result<DatasetBundle> {
        let bundle = self.dataset.load(seed::derive(self.data_seed(), &[seed::TAG_SPLIT]))?;
        Ok(if self.standardize { bundle.standardized() } else { bundle })
    }
}
