use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsi_fewshot::embed::ModelConfig;
use hsi_fewshot::eval::BaselineConfig;
use hsi_fewshot::fewshot::TrainConfig;
use hsi_fewshot::synth::SynthConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalProtocol {
    Complete,
    PartialS1,
    PartialS2,
}

impl EvalProtocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Complete => "complete",
            Self::PartialS1 => "partial-s1",
            Self::PartialS2 => "partial-s2",
        }
    }
}

/// Output locations. Relative paths resolve against the `--out` directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub model: PathBuf,
    pub reports: PathBuf,
    /// Manifests used by `train`, `ccp`, `eval` and `report`, relative to `data`.
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model".into(),
            reports: "reports".into(),
            train_manifest: "train.json".into(),
            test_manifest: "test.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    /// Source manifest, relative to `data`.
    pub source: PathBuf,
    /// Output directory for prepared cubes and manifests, relative to `data`.
    pub output: PathBuf,
    pub trim_head: usize,
    pub trim_tail: usize,
    pub reduce_factor: usize,
    /// Crop window side; no cropping when absent.
    pub window: Option<usize>,
    pub stride: usize,
    /// Minimum foreground fraction of a kept crop.
    pub density_threshold: f64,
    pub per_class_train: usize,
    pub seed: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            source: "all.json".into(),
            output: "prepared".into(),
            trim_head: 0,
            trim_tail: 0,
            reduce_factor: 1,
            window: None,
            stride: 64,
            density_threshold: 0.5,
            per_class_train: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: EvalProtocol,
    /// Class names held out of training for the partial-class protocols.
    pub excluded: Vec<String>,
    pub repetitions: usize,
    pub shot: usize,
    pub seed: u64,
    /// Also train and evaluate the cross-entropy baseline (complete protocol).
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::Complete,
            excluded: Vec::new(),
            repetitions: 20,
            shot: 5,
            seed: 0,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub prep: PrepConfig,
    /// `in_channels` is replaced by the channel count of the training data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
}

/// Command-line values that override the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub attention: Option<bool>,
    pub channels: Option<usize>,
    pub reduce_factor: Option<usize>,
    pub protocol: Option<EvalProtocol>,
    pub exclude: Option<Vec<String>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.synth.seed = seed;
            self.prep.seed = seed;
            self.model.init_seed = seed;
            self.train.seed = seed;
            self.eval.seed = seed;
            self.baseline.seed = seed;
        }
        if let Some(a) = o.attention {
            self.model.attention = a;
        }
        if let Some(c) = o.channels {
            self.synth.channels = c;
            self.model.in_channels = c;
        }
        if let Some(f) = o.reduce_factor {
            self.prep.reduce_factor = f;
        }
        if let Some(p) = o.protocol {
            self.eval.protocol = p;
        }
        if let Some(e) = &o.exclude {
            self.eval.excluded = e.clone();
        }
    }

    /// Range checks that do not need any data.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        let mut model = self.model.clone();
        model.in_channels = model.in_channels.max(1);
        model.validate()?;
        if self.prep.reduce_factor == 0 {
            bail!("prep.reduce_factor must be at least 1");
        }
        if self.prep.window == Some(0) || self.prep.stride == 0 {
            bail!("prep.window and prep.stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.prep.density_threshold) {
            bail!("prep.density_threshold must lie in [0, 1]");
        }
        if self.eval.repetitions == 0 || self.eval.shot == 0 {
            bail!("eval.repetitions and eval.shot must be positive");
        }
        if self.eval.protocol != EvalProtocol::Complete && self.eval.excluded.is_empty() {
            bail!(
                "protocol {} needs excluded classes: pass --exclude CLASS[,CLASS]",
                self.eval.protocol.name()
            );
        }
        Ok(())
    }
}

/// Resolved directories for one run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    pub model: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(out: &Path, paths: &Paths) -> Self {
        Self {
            data: out.join(&paths.data),
            model: out.join(&paths.model),
            reports: out.join(&paths.reports),
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model.join("checkpoint.hsck")
    }

    pub fn train_log(&self) -> PathBuf {
        self.model.join("trainlog.json")
    }

    pub fn train_log_lines(&self) -> PathBuf {
        self.model.join("trainlog.jsonl")
    }

    pub fn bank(&self) -> PathBuf {
        self.model.join("ccp.json")
    }
}
