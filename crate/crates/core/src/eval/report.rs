use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which evaluation produced a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Protocol {
    /// Seen classes, classified against collective prototypes.
    Complete,
    /// Seen classes, classified against one training support set.
    SupportSet { episode: usize },
    /// Excluded classes only, candidates restricted to the excluded classes.
    PartialStrategy1,
    /// Excluded classes only, candidates are every class in the support set.
    PartialStrategy2,
    /// Same candidates as the support set, restricted to an explicit list.
    PartialRestricted,
    /// Cross-entropy classifier head.
    Supervised,
}

/// Counts of (truth, prediction) pairs. Rows follow `truth`, columns follow
/// `predicted`; both hold registry indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub registry: Vec<String>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(registry: Vec<String>, truth: Vec<usize>, predicted: Vec<usize>) -> Self {
        let counts = vec![vec![0; predicted.len()]; truth.len()];
        Self {
            registry,
            truth,
            predicted,
            counts,
        }
    }

    /// Tallies one outcome. Both classes must be in the row/column sets.
    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let i = self
            .truth
            .iter()
            .position(|&k| k == truth)
            .ok_or_else(|| Error::Protocol(format!("class {truth} is not a confusion row")))?;
        let j = self
            .predicted
            .iter()
            .position(|&k| k == predicted)
            .ok_or_else(|| Error::Protocol(format!("class {predicted} is not a candidate")))?;
        self.counts[i][j] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn correct_in_row(&self, i: usize) -> u64 {
        self.predicted
            .iter()
            .position(|&k| k == self.truth[i])
            .map_or(0, |j| self.counts[i][j])
    }

    /// Sum of the cells where prediction equals truth.
    pub fn correct(&self) -> u64 {
        (0..self.truth.len()).map(|i| self.correct_in_row(i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.correct() as f64 / t as f64
        }
    }

    pub fn class_accuracy(&self, i: usize) -> f64 {
        let t = self.row_total(i);
        if t == 0 {
            0.0
        } else {
            self.correct_in_row(i) as f64 / t as f64
        }
    }

    /// Row-normalized percentages; empty rows stay zero.
    pub fn percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if t == 0 {
                            0.0
                        } else {
                            100.0 * c as f64 / t as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Elementwise `self - other` of the percentage matrices.
    pub fn difference(&self, other: &Confusion) -> Result<Vec<Vec<f64>>> {
        if self.truth != other.truth || self.predicted != other.predicted {
            return Err(Error::arg(
                "confusion matrices cover different classes and cannot be compared",
            ));
        }
        Ok(self
            .percentages()
            .iter()
            .zip(other.percentages())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect())
    }

    /// Adds another matrix over the same classes.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if self.truth != other.truth || self.predicted != other.predicted {
            return Err(Error::arg(
                "cannot merge confusion matrices over different classes",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Fraction of all rows' samples predicted as each column class while
    /// belonging to a different class.
    pub fn misclassification_rates(&self) -> Vec<(String, f64)> {
        let total = self.total().max(1) as f64;
        self.predicted
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let wrong: u64 = self
                    .truth
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t != k)
                    .map(|(i, _)| self.counts[i][j])
                    .sum();
                (self.registry[k].clone(), wrong as f64 / total)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub accuracy: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub config_digest: String,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub confusion: Confusion,
    /// Wall time of the evaluation. Not serialized, so report files stay
    /// reproducible.
    #[serde(skip)]
    pub elapsed_ms: u128,
}

impl EvalReport {
    pub fn from_confusion(
        protocol: Protocol,
        seed: u64,
        config_digest: String,
        confusion: Confusion,
    ) -> Self {
        let per_class = confusion
            .truth
            .iter()
            .enumerate()
            .map(|(i, &k)| ClassAccuracy {
                class: confusion.registry[k].clone(),
                accuracy: confusion.class_accuracy(i),
                count: confusion.row_total(i),
            })
            .collect();
        Self {
            protocol,
            seed,
            config_digest,
            accuracy: confusion.accuracy(),
            per_class,
            confusion,
            elapsed_ms: 0,
        }
    }
}

/// Accuracy of each training support set next to the collective prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub per_set: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); zero for one set.
    pub std: f64,
    pub ccp_accuracy: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
