//! Prototypes, distances, posteriors and the episode loss.

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingLoss;
use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Distance used in the softmax exponent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Per-class prototype vectors with their registry indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub vectors: Matrix,
    pub classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
}

/// Anything queries can be classified against.
pub trait PrototypeBank {
    fn vectors(&self) -> &Matrix;
    /// Registry index of each row.
    fn class_ids(&self) -> &[usize];
}

impl PrototypeBank for PrototypeSet {
    fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    fn class_ids(&self) -> &[usize] {
        &self.classes
    }
}

/// Mean embedding of each class's support points.
pub fn compute_prototypes(support: &[Matrix], classes: &[usize]) -> Result<PrototypeSet> {
    if support.len() != classes.len() {
        return Err(Error::arg(format!(
            "{} support groups for {} classes",
            support.len(),
            classes.len()
        )));
    }
    let dim = support.first().map_or(0, Matrix::cols);
    let mut rows = Vec::with_capacity(support.len());
    for (j, s) in support.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::arg(format!(
                "class {} has no support embeddings",
                classes[j]
            )));
        }
        if s.cols() != dim {
            return Err(Error::arg("support embeddings differ in width"));
        }
        rows.push(s.column_means());
    }
    Ok(PrototypeSet {
        vectors: Matrix::from_rows(&rows)?,
        classes: classes.to_vec(),
        episode: None,
    })
}

fn check_widths(queries: &Matrix, prototypes: &Matrix) -> Result<()> {
    if queries.cols() != prototypes.cols() {
        return Err(Error::arg(format!(
            "query width {} differs from prototype width {}",
            queries.cols(),
            prototypes.cols()
        )));
    }
    Ok(())
}

/// Squared Euclidean distance between every query and every prototype.
pub fn sq_distances(queries: &Matrix, prototypes: &Matrix) -> Result<Matrix> {
    check_widths(queries, prototypes)?;
    let mut out = Matrix::zeros(queries.rows(), prototypes.rows());
    for i in 0..queries.rows() {
        for j in 0..prototypes.rows() {
            out.set(i, j, sq_dist(queries.row(i), prototypes.row(j)));
        }
    }
    Ok(out)
}

pub fn distances(queries: &Matrix, prototypes: &Matrix, kind: DistanceKind) -> Result<Matrix> {
    let mut d = sq_distances(queries, prototypes)?;
    if kind == DistanceKind::Euclidean {
        for i in 0..d.rows() {
            d.row_mut(i).iter_mut().for_each(|v| *v = v.sqrt());
        }
    }
    Ok(d)
}

/// Row-wise softmax of the negated distances, shifted by the row minimum.
pub fn class_posterior(distances: &Matrix) -> Matrix {
    let mut out = distances.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (min - *v).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Mean negative log-probability of the true class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Set when some true-class probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

pub fn episode_loss(posterior: &Matrix, labels: &[usize]) -> Result<LossValue> {
    if labels.len() != posterior.rows() {
        return Err(Error::arg(format!(
            "{} labels for {} queries",
            labels.len(),
            posterior.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::arg("no queries"));
    }
    let mut clamped = false;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= posterior.cols() {
            return Err(Error::arg(format!(
                "label {y} outside {} classes",
                posterior.cols()
            )));
        }
        let p = posterior.get(i, y);
        if p < PROB_FLOOR {
            clamped = true;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(LossValue {
        loss: total / labels.len() as f64,
        clamped,
    })
}

/// Index of the minimum in each row; ties go to the lowest index.
pub fn argmin_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v < r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Nearest prototype for every query, as a registry class index.
pub fn classify(queries: &Matrix, bank: &impl PrototypeBank) -> Result<Vec<usize>> {
    if bank.vectors().is_empty() {
        return Err(Error::arg("prototype bank is empty"));
    }
    let d = sq_distances(queries, bank.vectors())?;
    Ok(argmin_rows(&d)
        .into_iter()
        .map(|j| bank.class_ids()[j])
        .collect())
}

/// The prototypical-network loss of one episode.
///
/// Embedding rows are ordered support first (class-major, `shot` rows per
/// class), then the queries listed in `query_labels` (episode-local class
/// positions).
#[derive(Debug, Clone)]
pub struct EpisodeObjective {
    pub way: usize,
    pub shot: usize,
    pub query_labels: Vec<usize>,
    pub distance: DistanceKind,
}

/// Loss, accuracy and prototypes of one episode forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub loss: LossValue,
    pub accuracy: f64,
    pub prototypes: Matrix,
    pub posterior: Matrix,
}

impl EpisodeObjective {
    fn split(&self, e: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
        let n_support = self.way * self.shot;
        if e.rows() != n_support + self.query_labels.len() {
            return Err(Error::arg(format!(
                "{} embeddings for {} support and {} query items",
                e.rows(),
                n_support,
                self.query_labels.len()
            )));
        }
        let support = (0..self.way)
            .map(|j| e.select_rows(&(j * self.shot..(j + 1) * self.shot).collect::<Vec<_>>()))
            .collect();
        let queries = e.select_rows(&(n_support..e.rows()).collect::<Vec<_>>());
        Ok((support, queries))
    }

    pub fn evaluate(&self, e: &Matrix) -> Result<EpisodeOutcome> {
        let (support, queries) = self.split(e)?;
        let classes: Vec<usize> = (0..self.way).collect();
        let protos = compute_prototypes(&support, &classes)?;
        let d = distances(&queries, &protos.vectors, self.distance)?;
        let posterior = class_posterior(&d);
        let loss = episode_loss(&posterior, &self.query_labels)?;
        let pred = argmin_rows(&d);
        let correct = pred
            .iter()
            .zip(&self.query_labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(EpisodeOutcome {
            loss,
            accuracy: correct as f64 / self.query_labels.len() as f64,
            prototypes: protos.vectors,
            posterior,
        })
    }
}

impl EmbeddingLoss for EpisodeObjective {
    fn loss_and_grad(&self, e: &Matrix) -> Result<(f64, Matrix)> {
        let out = self.evaluate(e)?;
        let n_support = self.way * self.shot;
        let nq = self.query_labels.len() as f64;
        let protos = &out.prototypes;
        let mut grad = Matrix::zeros(e.rows(), e.cols());
        let mut d_protos = Matrix::zeros(self.way, e.cols());
        for (qi, &y) in self.query_labels.iter().enumerate() {
            let row = n_support + qi;
            let q = e.row(row).to_vec();
            for j in 0..self.way {
                // dL/dd_ij = (1[j = y] - p_ij) / n_q
                let indicator = if j == y { 1.0 } else { 0.0 };
                let g = (indicator - out.posterior.get(qi, j)) / nq;
                if g == 0.0 {
                    continue;
                }
                let c = protos.row(j);
                let scale = match self.distance {
                    DistanceKind::SquaredEuclidean => 2.0 * g,
                    DistanceKind::Euclidean => {
                        let dist = sq_dist(&q, c).sqrt();
                        if dist > 0.0 {
                            g / dist
                        } else {
                            0.0
                        }
                    }
                };
                let gq = grad.row_mut(row);
                let gp = d_protos.row_mut(j);
                for t in 0..q.len() {
                    let diff = scale * (q[t] - c[t]);
                    gq[t] += diff;
                    gp[t] -= diff;
                }
            }
        }
        let inv_shot = 1.0 / self.shot as f64;
        for j in 0..self.way {
            let gp = d_protos.row(j).to_vec();
            for s in 0..self.shot {
                grad.row_mut(j * self.shot + s)
                    .iter_mut()
                    .zip(&gp)
                    .for_each(|(g, v)| *g += v * inv_shot);
            }
        }
        Ok((out.loss.loss, grad))
    }
}
