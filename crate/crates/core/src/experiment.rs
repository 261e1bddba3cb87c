//! JSON-configured experiments: dataset, architecture, and training settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::data::{load_csv, load_idx, make_splits, standardize, CsvOptions, Dataset, SplitPlan, Standardizer};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::train::{Task, TrainConfig};

fn default_fraction() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Regression table; split into train/test and z-scored on the train part.
    Csv {
        path: PathBuf,
        #[serde(default)]
        options: CsvOptions,
        #[serde(default)]
        split: u64,
        #[serde(default)]
        split_seed: u64,
        #[serde(default = "default_fraction")]
        train_fraction: f64,
    },
    /// IDX image classification with a fixed test set.
    Idx {
        train: IdxPair,
        test: IdxPair,
        /// Keep only the first this-many training images.
        #[serde(default)]
        train_subset: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

impl IdxPair {
    pub fn load(&self) -> Result<Dataset> {
        load_idx(&self.images, &self.labels)
    }

    /// `<dir>/<prefix>-images-idx3-ubyte.gz` and the matching labels file.
    pub fn in_dir(dir: impl AsRef<Path>, prefix: &str) -> Self {
        let dir = dir.as_ref();
        Self {
            images: dir.join(format!("{prefix}-images-idx3-ubyte.gz")),
            labels: dir.join(format!("{prefix}-labels-idx1-ubyte.gz")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum NetworkConfig {
    /// Input and output widths follow the data.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    /// Strided-convolution LeNet for 1×28×28 inputs.
    Lenet,
    Custom {
        spec: NetworkSpec,
    },
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Out-of-domain test set for `ood-eval`.
    #[serde(default)]
    pub ood: Option<IdxPair>,
}

/// Loaded and preprocessed data ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Option<Standardizer>,
    pub task: Task,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn prepare(&self) -> Result<Prepared> {
        match &self.dataset {
            DatasetConfig::Csv {
                path,
                options,
                split,
                split_seed,
                train_fraction,
            } => {
                let raw = load_csv(path, options)?;
                let plan = SplitPlan {
                    index: *split,
                    train_fraction: *train_fraction,
                    seed: *split_seed,
                };
                let (tr, te) = make_splits(raw.len(), &plan)?;
                let (z, st) = standardize(&raw, &tr)?;
                Ok(Prepared {
                    train: z.subset(&tr),
                    test: z.subset(&te),
                    standardizer: Some(st),
                    task: Task::Regression,
                })
            }
            DatasetConfig::Idx {
                train,
                test,
                train_subset,
            } => {
                let mut tr = train.load()?;
                if let Some(n) = *train_subset {
                    if n == 0 || n > tr.len() {
                        return Err(Error::Config(format!("train_subset {n} outside 1..={}", tr.len())));
                    }
                    tr = tr.subset(&(0..n).collect::<Vec<_>>());
                }
                Ok(Prepared {
                    train: tr,
                    test: test.load()?,
                    standardizer: None,
                    task: Task::Classification,
                })
            }
        }
    }

    /// Architecture for data of the given shape.
    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let out = match Task::of(data) {
            Task::Regression => 2,
            Task::Classification => data.labels()?.1,
        };
        match &self.network {
            NetworkConfig::Mlp { hidden, activation } => Ok(NetworkSpec::mlp(data.dim(), hidden, out, *activation)),
            NetworkConfig::Lenet => {
                if data.feature_shape != [1, 28, 28] {
                    return Err(Error::Config(format!(
                        "the LeNet preset needs 1x28x28 inputs, data has {:?}",
                        data.feature_shape
                    )));
                }
                Ok(NetworkSpec::lenet_strided(out))
            }
            NetworkConfig::Custom { spec } => Ok(spec.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_configs() {
        let c = ExperimentConfig::from_json(
            r#"{"dataset": {"kind": "csv", "path": "x.csv", "split": 3},
                "network": {"preset": "mlp", "hidden": [50]},
                "train": {"objective": "bedl+reg", "epochs": 7}}"#,
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.delta, 0.05);
        match c.dataset {
            DatasetConfig::Csv {
                split, train_fraction, ..
            } => {
                assert_eq!(split, 3);
                assert_eq!(train_fraction, 0.9);
            }
            _ => panic!("wrong dataset kind"),
        }
        let c = ExperimentConfig::from_json(
            r#"{"dataset": {"kind": "idx",
                            "train": {"images": "a", "labels": "b"},
                            "test": {"images": "c", "labels": "d"}},
                "network": {"preset": "lenet"}}"#,
        )
        .unwrap();
        assert_eq!(c.network, NetworkConfig::Lenet);
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"kind": "parquet"}}"#).is_err());
    }
}
