use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{Confusion, EvalReport, Protocol};
use crate::cubeio::{Dataset, HyperCube};
use crate::embed::{embed_batch, gradient_full, EmbeddingLoss, EmbeddingParams, Linear};
use crate::error::{Error, Result};
use crate::fewshot::argmax_rows;
use crate::matrix::Matrix;

/// Optimizer settings for the cross-entropy baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg(
                "baseline epochs and batch size must be positive",
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(
                "baseline lr must be >= 0 and momentum in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Embedding followed by a linear classifier over `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedModel {
    pub params: EmbeddingParams,
    pub head: Linear,
    /// Registry index of each head output.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy of a fixed linear head over the embeddings.
struct CrossEntropy<'a> {
    head: &'a Linear,
    labels: Vec<usize>,
}

impl CrossEntropy<'_> {
    /// `(loss, dL/dlogits, correct)` for the whole batch.
    fn logit_grads(&self, e: &Matrix) -> (f64, Vec<Vec<f64>>, usize) {
        let n = self.labels.len() as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        let grads = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut p = softmax(&self.head.forward(e.row(i)));
                loss -= p[y].max(f64::MIN_POSITIVE).ln() / n;
                let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                correct += usize::from(best == y);
                p[y] -= 1.0;
                p.iter_mut().for_each(|v| *v /= n);
                p
            })
            .collect();
        (loss, grads, correct)
    }
}

impl EmbeddingLoss for CrossEntropy<'_> {
    fn loss_and_grad(&self, e: &Matrix) -> Result<(f64, Matrix)> {
        let (loss, dlogits, _) = self.logit_grads(e);
        let mut de = Matrix::zeros(e.rows(), e.cols());
        let mut scratch = Linear::zeros(self.head.inputs, self.head.outputs);
        for (i, g) in dlogits.iter().enumerate() {
            let dx = self.head.backward(e.row(i), g, &mut scratch);
            de.row_mut(i).copy_from_slice(&dx);
        }
        Ok((loss, de))
    }
}

/// Trains embedding and head jointly with cross-entropy on every cube of
/// `train`. Head outputs follow the classes present in `train`.
pub fn train_supervised_baseline(
    train: &Dataset,
    params_init: EmbeddingParams,
    hyper: &BaselineConfig,
) -> Result<(SupervisedModel, Vec<BaselineEpoch>)> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::arg("baseline training data is empty"));
    }
    let counts: Vec<usize> = train.indices_by_class().iter().map(Vec::len).collect();
    let classes: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    if classes.iter().any(|&k| counts[k] != counts[classes[0]]) {
        return Err(Error::arg("baseline training data is not class-balanced"));
    }
    let position = |k: usize| classes.iter().position(|&c| c == k).expect("present class");
    let attention = params_init.config.attention;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = SupervisedModel {
        head: Linear::init(params_init.embedding_dim(), classes.len(), 1.0, &mut rng),
        params: params_init,
        classes: classes.clone(),
    };
    let mut velocity = model.params.zeros_like();
    let mut head_velocity = Linear::zeros(model.head.inputs, model.head.outputs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            let fail = |detail: String| Error::Training {
                epoch,
                episode: b,
                detail,
            };
            let cubes: Vec<&HyperCube> = batch.iter().map(|&i| &train.items[i].cube).collect();
            let loss = CrossEntropy {
                head: &model.head,
                labels: batch
                    .iter()
                    .map(|&i| position(train.items[i].label_index))
                    .collect(),
            };
            let out =
                gradient_full(&loss, &model.params, &cubes, attention).map_err(|e| match e {
                    Error::Numeric(m) => fail(m),
                    other => other,
                })?;
            let (_, dlogits, ok) = loss.logit_grads(&out.embeddings);
            let mut head_grad = Linear::zeros(model.head.inputs, model.head.outputs);
            for (i, g) in dlogits.iter().enumerate() {
                model
                    .head
                    .backward(out.embeddings.row(i), g, &mut head_grad);
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += ok;

            velocity.scale(hyper.momentum);
            velocity.add_scaled(&out.grad, 1.0);
            model.params.add_scaled(&velocity, -hyper.lr);
            for (v, g) in head_velocity
                .weight
                .iter_mut()
                .chain(head_velocity.bias.iter_mut())
                .zip(head_grad.weight.iter().chain(&head_grad.bias))
            {
                *v = hyper.momentum * *v + g;
            }
            for (p, v) in model
                .head
                .weight
                .iter_mut()
                .chain(model.head.bias.iter_mut())
                .zip(head_velocity.weight.iter().chain(&head_velocity.bias))
            {
                *p -= hyper.lr * v;
            }
            let head_ok = model
                .head
                .weight
                .iter()
                .chain(&model.head.bias)
                .all(|v| v.is_finite());
            if !model.params.is_finite() || !head_ok {
                return Err(fail("parameters became non-finite".into()));
            }
        }
        history.push(BaselineEpoch {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        });
    }
    Ok((model, history))
}

/// Registry class predicted for each cube.
pub fn predict_supervised(cubes: &[&HyperCube], model: &SupervisedModel) -> Result<Vec<usize>> {
    let emb = embed_batch(cubes, &model.params, model.params.config.attention)?;
    let rows: Vec<Vec<f64>> = emb.iter_rows().map(|r| model.head.forward(r)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    let logits = Matrix::from_rows(&refs)?;
    Ok(argmax_rows(&logits)
        .into_iter()
        .map(|j| model.classes[j])
        .collect())
}

pub fn eval_supervised(test: &Dataset, model: &SupervisedModel) -> Result<EvalReport> {
    let start = Instant::now();
    let cubes: Vec<&HyperCube> = test.items.iter().map(|c| &c.cube).collect();
    let predicted = predict_supervised(&cubes, model)?;
    let groups = test.indices_by_class();
    let truth_classes: Vec<usize> = (0..groups.len())
        .filter(|&k| !groups[k].is_empty())
        .collect();
    if let Some(&k) = truth_classes.iter().find(|k| !model.classes.contains(k)) {
        return Err(Error::Protocol(format!(
            "test class `{}` has no classifier output",
            test.classes[k]
        )));
    }
    let mut confusion = Confusion::new(test.classes.clone(), truth_classes, model.classes.clone());
    for (item, &p) in test.items.iter().zip(&predicted) {
        confusion.record(item.label_index, p)?;
    }
    let mut report =
        EvalReport::from_confusion(Protocol::Supervised, 0, model.params.digest(), confusion);
    report.elapsed_ms = start.elapsed().as_millis();
    Ok(report)
}
