//! Collective class prototypes: per-class averages of the episode prototypes
//! kept from the best training epoch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::proto::{PrototypeBank, PrototypeSet};
use super::train::TrainLog;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CCP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcpProvenance {
    pub best_epoch: usize,
    /// Number of episode prototype sets averaged per class.
    pub episodes: usize,
    pub config_digest: String,
}

/// One collective prototype per trained class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CCPBank {
    pub format_version: u32,
    /// Full class registry the indices refer to.
    pub registry: Vec<String>,
    /// Registry index of each row of `vectors`.
    pub class_ids: Vec<usize>,
    pub dim: usize,
    pub vectors: Matrix,
    pub provenance: CcpProvenance,
}

impl PrototypeBank for CCPBank {
    fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }
}

impl CCPBank {
    pub fn class_names(&self) -> Vec<&str> {
        self.class_ids
            .iter()
            .map(|&k| self.registry[k].as_str())
            .collect()
    }

    pub fn contains_class(&self, k: usize) -> bool {
        self.class_ids.contains(&k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CCP_FORMAT_VERSION {
            return Err(Error::decode(
                "format_version",
                format!("unsupported CCP bank version {}", self.format_version),
            ));
        }
        if self.vectors.rows() != self.class_ids.len() || self.vectors.cols() != self.dim {
            return Err(Error::decode(
                "vectors",
                format!(
                    "{}x{} matrix for {} classes of width {}",
                    self.vectors.rows(),
                    self.vectors.cols(),
                    self.class_ids.len(),
                    self.dim
                ),
            ));
        }
        if let Some(&k) = self.class_ids.iter().find(|&&k| k >= self.registry.len()) {
            return Err(Error::decode(
                "class_ids",
                format!("index {k} outside registry"),
            ));
        }
        if !self.vectors.is_finite() {
            return Err(Error::decode("vectors", "non-finite entry"));
        }
        Ok(())
    }
}

/// Averages, per class, the prototypes of every episode snapshot in `sets`.
///
/// All sets must cover the same classes in the same order.
pub fn average_prototypes(sets: &[PrototypeSet]) -> Result<Matrix> {
    let first = sets
        .first()
        .ok_or_else(|| Error::arg("no prototype snapshots to average"))?;
    let (rows, cols) = (first.vectors.rows(), first.vectors.cols());
    let mut acc = Matrix::zeros(rows, cols);
    for s in sets {
        if s.classes != first.classes || s.vectors.cols() != cols {
            return Err(Error::arg(
                "prototype snapshots disagree on classes or width",
            ));
        }
        for k in 0..rows {
            for (a, v) in acc.row_mut(k).iter_mut().zip(s.vectors.row(k)) {
                *a += v;
            }
        }
    }
    let n = sets.len() as f64;
    for k in 0..rows {
        acc.row_mut(k).iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

/// Builds the bank from the best-epoch snapshots recorded in `log`.
pub fn build_ccp(log: &TrainLog, registry: &[String]) -> Result<CCPBank> {
    if log.best_prototypes.is_empty() {
        return Err(Error::arg("train log holds no prototype snapshots"));
    }
    if registry != log.classes.as_slice() {
        return Err(Error::arg("registry differs from the one used in training"));
    }
    let vectors = average_prototypes(&log.best_prototypes)?;
    let bank = CCPBank {
        format_version: CCP_FORMAT_VERSION,
        registry: registry.to_vec(),
        class_ids: log.best_prototypes[0].classes.clone(),
        dim: vectors.cols(),
        vectors,
        provenance: CcpProvenance {
            best_epoch: log.best_epoch,
            episodes: log.best_prototypes.len(),
            config_digest: log.model_digest.clone(),
        },
    };
    bank.validate()?;
    Ok(bank)
}

pub fn save_ccp(bank: &CCPBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_string_pretty(bank)?).map_err(|e| Error::io(path, e))
}

/// Loads a bank; with `expected_digest`, a differing config digest is a
/// compatibility error.
pub fn load_ccp(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<CCPBank> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bank: CCPBank =
        serde_json::from_str(&text).map_err(|e| Error::decode("ccp bank", e.to_string()))?;
    bank.validate()?;
    if let Some(d) = expected_digest {
        if bank.provenance.config_digest != d {
            return Err(Error::Compatibility(format!(
                "CCP bank was built for model {} but the checkpoint is {d}",
                bank.provenance.config_digest
            )));
        }
    }
    Ok(bank)
}
