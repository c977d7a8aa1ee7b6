//! Episodic training with momentum SGD.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episodes::{sample_episodes, Episode};
use super::proto::{compute_prototypes, DistanceKind, EpisodeObjective, PrototypeSet};
use crate::cubeio::{Dataset, HyperCube};
use crate::embed::{embed_batch, gradient_full, EmbeddingParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which prototypes are kept for building collective prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SnapshotMode {
    /// Recompute every episode's prototypes with the weights at the end of
    /// the best epoch.
    FrozenBest,
    /// Keep the prototypes produced during the forward passes of the last
    /// `window` epochs up to and including the best one.
    InTraining { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub shot: usize,
    pub query: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub distance: DistanceKind,
    /// Draw a fresh episode partition every epoch instead of reusing the first.
    pub repartition: bool,
    pub snapshot: SnapshotMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shot: 5,
            query: 10,
            epochs: 50,
            lr: 1e-3,
            momentum: 0.9,
            seed: 0,
            distance: DistanceKind::SquaredEuclidean,
            repartition: false,
            snapshot: SnapshotMode::FrozenBest,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot == 0 || self.query == 0 || self.epochs == 0 {
            return Err(Error::arg("shot, query and epochs must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must lie in [0, 1)"));
        }
        if let SnapshotMode::InTraining { window: 0 } = self.snapshot {
            return Err(Error::arg("snapshot window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub model_digest: String,
    pub attention: bool,
    /// Full class registry of the training data.
    pub classes: Vec<String>,
    /// Registry indices that took part in training.
    pub trained_classes: Vec<usize>,
    /// Epochs are numbered from 1.
    pub epochs: Vec<EpochRecord>,
    pub episodes: Vec<EpisodeRecord>,
    pub best_epoch: usize,
    pub best_prototypes: Vec<PrototypeSet>,
    /// The episode partition used for the best epoch.
    pub best_episodes: Vec<Episode>,
}

impl TrainLog {
    pub fn epoch(&self, n: usize) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::decode("train log", e.to_string()))
    }

    /// One JSON record per episode: epoch, episode, loss, accuracy.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.episodes {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

fn episode_batch<'a>(data: &'a Dataset, ep: &Episode) -> (Vec<&'a HyperCube>, Vec<usize>) {
    let mut cubes: Vec<&HyperCube> = ep.support_items().map(|i| &data.items[i].cube).collect();
    let mut labels = Vec::new();
    for (i, j) in ep.query_items() {
        cubes.push(&data.items[i].cube);
        labels.push(j);
    }
    (cubes, labels)
}

/// Prototypes of one episode's support set under `params`.
pub fn episode_prototypes(
    data: &Dataset,
    ep: &Episode,
    params: &EmbeddingParams,
    attention: bool,
) -> Result<PrototypeSet> {
    let support: Vec<Matrix> = ep
        .support
        .iter()
        .map(|items| {
            let cubes: Vec<&HyperCube> = items.iter().map(|&i| &data.items[i].cube).collect();
            embed_batch(&cubes, params, attention)
        })
        .collect::<Result<_>>()?;
    let mut set = compute_prototypes(&support, &ep.classes)?;
    set.episode = Some(ep.id);
    Ok(set)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Trains the embedding on episodes drawn from `data`.
///
/// Every non-empty class of `data` takes part in every episode. Returns the
/// weights at the end of the best epoch (lowest mean query loss, earliest on
/// ties) together with the log, whose prototype snapshots live in the same
/// embedding space as those weights.
pub fn train(
    data: &Dataset,
    params: EmbeddingParams,
    config: &TrainConfig,
) -> Result<(EmbeddingParams, TrainLog)> {
    config.validate()?;
    let attention = params.config.attention;
    if let Some(c) = data.channels() {
        if c != params.in_channels() {
            return Err(Error::arg(format!(
                "model expects {} channels, training data has {c}",
                params.in_channels()
            )));
        }
    }
    let way = data
        .indices_by_class()
        .iter()
        .filter(|g| !g.is_empty())
        .count();
    let mut episodes = sample_episodes(data, way, config.shot, config.query, config.seed)?;
    let trained_classes = episodes[0].classes.clone();

    let mut params = params;
    let mut velocity = params.zeros_like();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, EmbeddingParams, Vec<Episode>, Vec<PrototypeSet>)> = None;
    let mut recent: Vec<Vec<PrototypeSet>> = Vec::new();

    for epoch in 1..=config.epochs {
        if config.repartition && epoch > 1 {
            episodes = sample_episodes(
                data,
                way,
                config.shot,
                config.query,
                mix_seed(config.seed, epoch as u64),
            )?;
        }
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            config.seed ^ 0xe90c,
            epoch as u64,
        )));

        let mut seen = Vec::with_capacity(episodes.len());
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for &e in &order {
            let ep = &episodes[e];
            let (cubes, labels) = episode_batch(data, ep);
            let objective = EpisodeObjective {
                way: ep.way(),
                shot: ep.shot(),
                query_labels: labels,
                distance: config.distance,
            };
            let fail = |detail: String| Error::Training {
                epoch,
                episode: ep.id,
                detail,
            };
            let out =
                gradient_full(&objective, &params, &cubes, attention).map_err(|err| match err {
                    Error::Numeric(m) => fail(m),
                    other => other,
                })?;
            let outcome = objective.evaluate(&out.embeddings)?;
            if !outcome.loss.loss.is_finite() {
                return Err(fail(format!("query loss {}", outcome.loss.loss)));
            }
            records.push(EpisodeRecord {
                epoch,
                episode: ep.id,
                loss: outcome.loss.loss,
                accuracy: outcome.accuracy,
                clamped: outcome.loss.clamped,
            });
            loss_sum += outcome.loss.loss;
            acc_sum += outcome.accuracy;
            seen.push(PrototypeSet {
                vectors: outcome.prototypes,
                classes: ep.classes.clone(),
                episode: Some(ep.id),
            });

            if config.lr > 0.0 {
                velocity.scale(config.momentum);
                velocity.add_scaled(&out.grad, 1.0);
                params.add_scaled(&velocity, -config.lr);
                if !params.is_finite() {
                    return Err(fail("parameters became non-finite".into()));
                }
            }
        }
        seen.sort_by_key(|p| p.episode);
        recent.push(seen);
        if let SnapshotMode::InTraining { window } = config.snapshot {
            if recent.len() > window {
                recent.remove(0);
            }
        } else {
            recent.remove(0);
        }

        let n = episodes.len() as f64;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n,
            accuracy: acc_sum / n,
        };
        let improved = best.as_ref().is_none_or(|(_, l, ..)| record.mean_loss < *l);
        if improved {
            let snapshots = match config.snapshot {
                SnapshotMode::FrozenBest => episodes
                    .iter()
                    .map(|ep| episode_prototypes(data, ep, &params, attention))
                    .collect::<Result<Vec<_>>>()?,
                SnapshotMode::InTraining { .. } => recent.iter().flatten().cloned().collect(),
            };
            best = Some((
                epoch,
                record.mean_loss,
                params.clone(),
                episodes.clone(),
                snapshots,
            ));
        }
        epochs.push(record);
    }

    let (best_epoch, _, best_params, best_episodes, best_prototypes) =
        best.expect("at least one epoch ran");
    let log = TrainLog {
        config: config.clone(),
        model_digest: best_params.digest(),
        attention,
        classes: data.classes.clone(),
        trained_classes,
        epochs,
        episodes: records,
        best_epoch,
        best_prototypes,
        best_episodes,
    };
    Ok((best_params, log))
}
