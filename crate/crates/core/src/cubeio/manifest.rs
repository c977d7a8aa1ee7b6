use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_cube_with_header, LabeledCube};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Anything carrying a class index into a registry.
pub trait Labeled {
    fn label_index(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Cube payload path, relative to the manifest's directory.
    pub path: String,
    pub label: String,
    #[serde(skip)]
    pub label_index: usize,
}

impl Labeled for ManifestEntry {
    fn label_index(&self) -> usize {
        self.label_index
    }
}

/// One split of a dataset: the class registry plus the cube files in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub classes: Vec<String>,
    /// When set, every class must have the same number of entries.
    #[serde(default)]
    pub balanced: bool,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn new(
        split: impl Into<String>,
        classes: Vec<String>,
        entries: Vec<ManifestEntry>,
    ) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            split: split.into(),
            classes,
            balanced: false,
            entries,
            provenance: BTreeMap::new(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            counts[e.label_index] += 1;
        }
        counts
    }

    /// Resolves labels against the registry and checks balance.
    pub fn validate(&mut self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::decode(
                "format_version",
                format!("unsupported manifest version {}", self.format_version),
            ));
        }
        for e in &mut self.entries {
            e.label_index = self
                .classes
                .iter()
                .position(|c| *c == e.label)
                .ok_or_else(|| {
                    Error::decode("label", format!("`{}` is not a registered class", e.label))
                })?;
        }
        if self.balanced {
            let counts = self.class_counts();
            if counts.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::decode(
                    "entries",
                    format!("manifest declared balanced but class counts are {counts:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::decode("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Loads every referenced cube. Paths resolve against `base_dir`.
    pub fn load_dataset(&self, base_dir: impl AsRef<Path>) -> Result<Dataset> {
        let base = base_dir.as_ref();
        let items = self
            .entries
            .iter()
            .map(|e| {
                let p: PathBuf = base.join(&e.path);
                let (cube, _) = load_cube_with_header(&p)?;
                Ok(LabeledCube {
                    id: e.path.clone(),
                    cube,
                    label: e.label.clone(),
                    label_index: e.label_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            classes: self.classes.clone(),
            items,
        })
    }
}

/// An in-memory split: the registry and its labelled cubes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub items: Vec<LabeledCube>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.items.first().map(|i| i.cube.channels())
    }

    /// Item indices grouped by class, in item order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, item) in self.items.iter().enumerate() {
            groups[item.label_index].push(i);
        }
        groups
    }

    /// Keeps only items of the given classes. The registry is unchanged.
    pub fn retain_classes(&self, keep: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            items: self
                .items
                .iter()
                .filter(|i| keep.contains(&i.label_index))
                .cloned()
                .collect(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Splits `pool` into a train part with exactly `per_class_train` members per
/// class (sampled without replacement using `seed`) and the complement.
///
/// Both outputs are grouped by class and keep pool order within a class.
pub fn split_dataset<T: Labeled>(
    pool: Vec<T>,
    classes: &[String],
    per_class_train: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, item) in pool.iter().enumerate() {
        let k = item.label_index();
        if k >= classes.len() {
            return Err(Error::arg(format!(
                "item {i} has label index {k} outside the {}-class registry",
                classes.len()
            )));
        }
        by_class[k].push(i);
    }
    for (k, members) in by_class.iter().enumerate() {
        if members.len() < per_class_train {
            return Err(Error::arg(format!(
                "class `{}` has {} members, fewer than the {per_class_train} requested for training",
                classes[k],
                members.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; pool.len()];
    for members in &by_class {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..per_class_train] {
            is_train[i] = true;
        }
    }

    let order: Vec<usize> = by_class.into_iter().flatten().collect();
    let mut slots: Vec<Option<T>> = pool.into_iter().map(Some).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in order {
        let item = slots[i].take().expect("each index visited once");
        if is_train[i] {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}
