//! Run configuration files and dataset resolution.
//!
//! A config file is flat `key = value` text (TOML). Top-level keys are the
//! [`SearchConfig`] fields; `network.*` keys override the supernet shape and
//! `data.*` keys name the dataset files:
//!
//! ```text
//! lambda = 18.0
//! epochs = 40
//! network.stem_channels = 8
//! data.images = "train-images-idx3-ubyte"
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{holdout_split, load_idx, synthetic_dataset, Dataset, Preprocess, Subset};
use crate::error::{Error, Result};
use crate::search::{SearchConfig, SearchData};
use crate::supernet::SupernetConfig;

/// Side length of generated synthetic images (smaller when the network input
/// is smaller).
const SYNTHETIC_SIZE: usize = 28;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading files.
    pub synthetic: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub search: SearchConfig,
    /// `None` when the file does not mention the network.
    pub network: Option<SupernetConfig>,
    pub data: DataPaths,
}

fn config_error(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what}: {e}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| config_error("config", e))?;
        let network = table
            .remove("network")
            .map(|v| v.try_into::<SupernetConfig>())
            .transpose()
            .map_err(|e| config_error("network", e))?;
        let data = table
            .remove("data")
            .map(|v| v.try_into::<DataPaths>())
            .transpose()
            .map_err(|e| config_error("data", e))?
            .unwrap_or_default();
        let search: SearchConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_error("config", e))?;
        Ok(RunConfig { search, network, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn network(&self) -> SupernetConfig {
        self.network.clone().unwrap_or_default()
    }

    /// The fully resolved configuration as config-file text; parsing it back
    /// yields the same run.
    pub fn to_text(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.search).map_err(|e| config_error("config", e))?;
        let network = toml::Table::try_from(self.network()).map_err(|e| config_error("network", e))?;
        table.insert("network".into(), toml::Value::Table(network));
        let data = toml::Table::try_from(&self.data).map_err(|e| config_error("data", e))?;
        if !data.is_empty() {
            table.insert("data".into(), toml::Value::Table(data));
        }
        toml::to_string(&table).map_err(|e| config_error("config", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.network().validate()
    }
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<(u64, String)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, hex(&hasher.finalize())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

/// What data a run saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    /// `idx` or `synthetic`.
    pub source: String,
    pub files: Vec<FileDigest>,
    pub synthetic_samples: Option<usize>,
    /// `separate` when a validation file was given, otherwise `holdout`.
    pub split: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub struct LoadedData {
    pub data: SearchData,
    pub descriptor: DatasetDescriptor,
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing dataset path: pass {flag}")))
}

fn check_shape(data: &Dataset, net: &SupernetConfig, what: &str) -> Result<()> {
    if data.channels != 1 && data.channels != net.input_channels {
        return Err(Error::Config(format!(
            "{what} has {} channels; the network expects {} (or 1, replicated)",
            data.channels, net.input_channels
        )));
    }
    if data.classes > net.classes {
        return Err(Error::Config(format!(
            "{what} has {} classes but the network predicts {}",
            data.classes, net.classes
        )));
    }
    Ok(())
}

/// Loads the training and validation splits. With `pre` the stored
/// standardisation is reused; otherwise it is fitted on the training split.
pub fn load_data(paths: &DataPaths, net: &SupernetConfig, cfg: &SearchConfig, pre: Option<Preprocess>) -> Result<LoadedData> {
    let mut files = Vec::new();
    let (train_all, val_all) = if let Some(n) = paths.synthetic {
        let side = SYNTHETIC_SIZE.min(net.input_size);
        let data = synthetic_dataset(n, net.classes, (side, side), cfg.seed)?;
        (Arc::new(data), None)
    } else {
        let images = require(&paths.images, "--data-images")?;
        let labels = require(&paths.labels, "--data-labels")?;
        let train = load_idx(images, labels, net.classes)?;
        for p in [images, labels] {
            let (bytes, sha256) = file_sha256(p)?;
            files.push(FileDigest { path: p.into(), bytes, sha256 });
        }
        let val = match (&paths.val_images, &paths.val_labels) {
            (None, None) => None,
            (vi, vl) => {
                let vi = require(vi, "--val-images")?;
                let vl = require(vl, "--val-labels")?;
                let val = load_idx(vi, vl, net.classes)?;
                for p in [vi, vl] {
                    let (bytes, sha256) = file_sha256(p)?;
                    files.push(FileDigest { path: p.into(), bytes, sha256 });
                }
                Some(Arc::new(val))
            }
        };
        (Arc::new(train), val)
    };
    check_shape(&train_all, net, "training data")?;
    let (train, val, split) = match val_all {
        Some(val) => {
            check_shape(&val, net, "validation data")?;
            if (val.channels, val.height, val.width) != (train_all.channels, train_all.height, train_all.width) {
                return Err(Error::Config("validation images differ in shape from training images".into()));
            }
            (Subset::all(train_all.clone()), Subset::all(val), "separate")
        }
        None => {
            let (t, v) = holdout_split(train_all.clone(), cfg.val_count, cfg.seed)?;
            (t, v, "holdout")
        }
    };
    let train = match cfg.max_train_samples {
        Some(n) => train.truncated(n),
        None => train,
    };
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let pre = match pre {
        Some(p) => {
            if p.mean.len() != train_all.channels {
                return Err(Error::Config(format!(
                    "stored standardisation has {} channels, data has {}",
                    p.mean.len(),
                    train_all.channels
                )));
            }
            p
        }
        None => Preprocess::fit(&train, net.input_size, net.input_channels),
    };
    let descriptor = DatasetDescriptor {
        source: if paths.synthetic.is_some() { "synthetic" } else { "idx" }.into(),
        files,
        synthetic_samples: paths.synthetic,
        split: split.into(),
        train_samples: train.len(),
        val_samples: val.len(),
        channels: train_all.channels,
        height: train_all.height,
        width: train_all.width,
    };
    Ok(LoadedData {
        data: SearchData { train, val, pre },
        descriptor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_and_network_overrides() {
        let cfg = RunConfig::parse("lambda = 0.5\nepochs = 3\nnetwork.stem_channels = 4\ndata.synthetic = 64\n").unwrap();
        assert_eq!(cfg.search.lambda, 0.5);
        assert_eq!(cfg.search.epochs, 3);
        assert_eq!(cfg.network().stem_channels, 4);
        assert_eq!(cfg.network().block_channels, SupernetConfig::default().block_channels);
        assert_eq!(cfg.data.synthetic, Some(64));
        let back = RunConfig::parse(&cfg.to_text().unwrap()).unwrap();
        assert_eq!(back.search, cfg.search);
        assert_eq!(back.network(), cfg.network());
        assert_eq!(back.data, cfg.data);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("lamda = 1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("network.stems = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_paths_name_the_flag() {
        let cfg = SearchConfig::default();
        let net = SupernetConfig::default();
        let err = load_data(&DataPaths::default(), &net, &cfg, None).err().unwrap();
        assert!(err.to_string().contains("--data-images"), "{err}");
        let paths = DataPaths {
            images: Some("x".into()),
            ..DataPaths::default()
        };
        let err = load_data(&paths, &net, &cfg, None).err().unwrap();
        assert!(err.to_string().contains("--data-labels"), "{err}");
    }
}
