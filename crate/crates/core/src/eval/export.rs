use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::EvalReport;
use crate::cubeio::{Dataset, HyperCube};
use crate::embed::{attention_weights, embed_batch, EmbeddingParams};
use crate::error::{Error, Result};
use crate::fewshot::{CCPBank, PrototypeSet};
use crate::matrix::Matrix;

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn matrix_section(
    w: &mut csv::Writer<File>,
    kind: &str,
    report: &EvalReport,
    cell: impl Fn(usize, usize) -> String,
) -> Result<()> {
    let c = &report.confusion;
    for (i, &t) in c.truth.iter().enumerate() {
        let mut row = vec![kind.to_string(), c.registry[t].clone()];
        row.extend((0..c.predicted.len()).map(|j| cell(i, j)));
        w.write_record(&row)?;
    }
    Ok(())
}

fn header(report: &EvalReport) -> Vec<String> {
    let c = &report.confusion;
    let mut h = vec!["kind".to_string(), "truth".to_string()];
    h.extend(c.predicted.iter().map(|&k| c.registry[k].clone()));
    h
}

/// Writes the confusion counts followed by row percentages. Rows are truth
/// classes, columns are predictions; the first column tells the two apart.
pub fn export_confusion(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(header(report))?;
    let counts = &report.confusion.counts;
    matrix_section(&mut w, "count", report, |i, j| counts[i][j].to_string())?;
    let pct = report.confusion.percentages();
    matrix_section(&mut w, "percent", report, |i, j| pct[i][j].to_string())?;
    finish(w, path)
}

/// Writes `a - b` of the row percentages.
pub fn export_confusion_difference(
    a: &EvalReport,
    b: &EvalReport,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let diff = a.confusion.difference(&b.confusion)?;
    let mut w = writer(path)?;
    w.write_record(header(a))?;
    matrix_section(&mut w, "difference", a, |i, j| diff[i][j].to_string())?;
    finish(w, path)
}

/// Mean attention weight per class and channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeatmap {
    pub classes: Vec<String>,
    /// Classes × channels.
    pub weights: Matrix,
}

impl AttentionHeatmap {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = writer(path)?;
        let mut h = vec!["class".to_string()];
        h.extend((0..self.weights.cols()).map(|c| format!("ch{c}")));
        w.write_record(&h)?;
        for (name, row) in self.classes.iter().zip(self.weights.iter_rows()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        finish(w, path)
    }
}

/// Per-class mean of the channel attention weights over the cubes of `data`.
/// Only classes with cubes get a row.
pub fn export_attention_heatmap(
    data: &Dataset,
    params: &EmbeddingParams,
) -> Result<AttentionHeatmap> {
    if !params.config.attention {
        return Err(Error::Protocol(
            "attention is disabled for this model, there are no weights to export".into(),
        ));
    }
    let channels = params.in_channels();
    let mut classes = Vec::new();
    let mut rows = Vec::new();
    for (k, group) in data.indices_by_class().iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; channels];
        for &i in group {
            let s = attention_weights(&data.items[i].cube, params)?;
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / group.len() as f64;
            }
        }
        classes.push(data.classes[k].clone());
        rows.push(mean);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(AttentionHeatmap {
        classes,
        weights: Matrix::from_rows(&refs)?,
    })
}

/// One exported vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub class: String,
    pub values: Vec<f64>,
}

/// Embeddings of every cube of `data`, identified by cube id.
pub fn dataset_rows(data: &Dataset, params: &EmbeddingParams) -> Result<Vec<EmbeddingRow>> {
    let cubes: Vec<&HyperCube> = data.items.iter().map(|c| &c.cube).collect();
    let emb = embed_batch(&cubes, params, params.config.attention)?;
    Ok(data
        .items
        .iter()
        .zip(emb.iter_rows())
        .map(|(c, v)| EmbeddingRow {
            id: c.id.clone(),
            class: c.label.clone(),
            values: v.to_vec(),
        })
        .collect())
}

/// One row per collective prototype, identified as `ccp`.
pub fn bank_rows(bank: &CCPBank) -> Vec<EmbeddingRow> {
    bank.class_ids
        .iter()
        .zip(bank.vectors.iter_rows())
        .map(|(&k, v)| EmbeddingRow {
            id: "ccp".into(),
            class: bank.registry[k].clone(),
            values: v.to_vec(),
        })
        .collect()
}

/// One row per class and episode, identified as `episode<N>`.
pub fn prototype_rows(sets: &[PrototypeSet], registry: &[String]) -> Vec<EmbeddingRow> {
    sets.iter()
        .flat_map(|set| {
            let id = format!("episode{}", set.episode.unwrap_or(0));
            set.classes
                .iter()
                .zip(set.vectors.iter_rows())
                .map(move |(&k, v)| EmbeddingRow {
                    id: id.clone(),
                    class: registry[k].clone(),
                    values: v.to_vec(),
                })
        })
        .collect()
}

/// Rows of `id,class,v0,..,v{D-1}`. Values use shortest round-trip formatting.
pub fn export_embeddings(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |r| r.values.len());
    if rows.iter().any(|r| r.values.len() != dim) {
        return Err(Error::arg("embedding rows have different lengths"));
    }
    let mut w = writer(path)?;
    let mut h = vec!["id".to_string(), "class".to_string()];
    h.extend((0..dim).map(|d| format!("v{d}")));
    w.write_record(&h)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.class.clone()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn parse_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::decode("embeddings", "row has no id and class"));
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::decode("embeddings", format!("`{v}`: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            id: rec[0].to_string(),
            class: rec[1].to_string(),
            values,
        });
    }
    Ok(rows)
}
