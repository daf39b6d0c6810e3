//! Run manifest read by every subcommand.

use std::path::{Path, PathBuf};

use qvae::data::{self, Dataset};
use qvae::eval::SampleConfig;
use qvae::model::VaeConfig;
use qvae::rng::{stream, Stream};
use qvae::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Statically binarised MNIST; the directory falls back to
    /// `QVAE_DATA_DIR`, then `data/mnist`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "half")]
        threshold: f64,
        /// Cap on evaluated test images.
        #[serde(default)]
        test_limit: Option<usize>,
    },
    BarsAndStripes {
        side: usize,
        train: usize,
        valid: usize,
        test: usize,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Importance samples per test point.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn default_k() -> usize {
    1000
}

fn default_resamples() -> usize {
    200
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: default_k(), bootstrap_resamples: default_resamples() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub prior: SampleConfig,
}

fn default_count() -> usize {
    64
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: default_count(), prior: SampleConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: VaeConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sample: SampleSection,
}

pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let DataConfig::BarsAndStripes { side, train, valid, .. } = self.data {
            if side < 2 || train == 0 || valid == 0 {
                return Err(Error::Config("data: bars_and_stripes needs side >= 2 and non-empty splits".into()));
            }
            if side * side != self.model.input_size {
                return Err(Error::Config(format!(
                    "data: {side}x{side} images do not match model.input_size {}",
                    self.model.input_size
                )));
            }
        }
        Ok(())
    }

    /// Image width and height for picture output.
    pub fn image_shape(&self) -> (usize, usize) {
        match self.data {
            DataConfig::Mnist { .. } => (28, 28),
            DataConfig::BarsAndStripes { side, .. } => (side, side),
        }
    }

    pub fn load_data(&self) -> Result<Splits> {
        match &self.data {
            DataConfig::Mnist { dir, threshold, test_limit } => {
                let dir = dir.clone().unwrap_or_else(|| data::data_dir(Path::new("data/mnist")));
                let m = data::load_mnist(&dir)?;
                let mut test = data::binarize_static(&m.test, *threshold);
                if let Some(n) = test_limit {
                    test = test.slice(0..(*n).min(test.rows()));
                }
                Ok(Splits {
                    train: data::binarize_static(&m.train, *threshold),
                    valid: data::binarize_static(&m.valid, *threshold),
                    test,
                })
            }
            DataConfig::BarsAndStripes { side, train, valid, test } => {
                let mut rng = stream(self.seed, Stream::Data);
                let all = data::bars_and_stripes(*side, train + valid + test, &mut rng)?;
                Ok(Splits {
                    train: all.slice(0..*train),
                    valid: all.slice(*train..train + valid),
                    test: all.slice(train + valid..train + valid + test),
                })
            }
        }
    }
}
