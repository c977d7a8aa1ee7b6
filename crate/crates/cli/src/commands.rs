use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hsi_fewshot::cubeio::{
    average_reduce_channels, crop_windows, density_filter, save_cube, split_dataset, trim_channels,
    Dataset, DatasetManifest, HyperCube, ManifestEntry,
};
use hsi_fewshot::embed::{load_checkpoint, save_checkpoint, EmbeddingParams};
use hsi_fewshot::eval::{
    bank_rows, dataset_rows, eval_complete, eval_supervised, eval_with_support_sets,
    export_attention_heatmap, export_confusion, export_confusion_difference, export_embeddings,
    partial_class_study, prototype_rows, train_supervised_baseline, EvalReport,
};
use hsi_fewshot::fewshot::{build_ccp, load_ccp, save_ccp, train, CCPBank, TrainLog};
use hsi_fewshot::synth::gen_dataset;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{EvalProtocol, Layout, RunConfig};

/// What a command reports back: a one-line summary and its result document.
pub struct Outcome {
    pub summary: String,
    pub document: PathBuf,
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(short_hash(&bytes))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Writes `<reports>/<name>.json` with the resolved config, digests and the
/// command-specific result.
fn result_document(
    layout: &Layout,
    name: &str,
    config: &RunConfig,
    digests: BTreeMap<&str, String>,
    result: Value,
) -> Result<PathBuf> {
    let path = layout.reports.join(format!("{name}.json"));
    let doc = json!({
        "command": name,
        "config": config,
        "digests": digests,
        "result": result,
    });
    write_json(&path, &doc)?;
    Ok(path)
}

/// The run config with the model section replaced by the checkpoint's own.
fn with_model(config: &RunConfig, params: &EmbeddingParams) -> RunConfig {
    let mut resolved = config.clone();
    resolved.model = params.config.clone();
    resolved
}

fn load_split(layout: &Layout, manifest: &Path) -> Result<(Dataset, String)> {
    let path = layout.data.join(manifest);
    if !path.exists() {
        bail!(
            "manifest {} does not exist; run `hsfs synth` or `hsfs prep` first",
            path.display()
        );
    }
    let m = DatasetManifest::load(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let data = m.load_dataset(base)?;
    Ok((data, file_digest(&path)?))
}

fn class_indices(data: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            data.class_index(n).ok_or_else(|| {
                anyhow!(
                    "unknown class `{n}`; known classes: {}",
                    data.classes.join(", ")
                )
            })
        })
        .collect()
}

fn load_model(layout: &Layout) -> Result<(EmbeddingParams, TrainLog)> {
    let ckpt = layout.checkpoint();
    if !ckpt.exists() {
        bail!(
            "no checkpoint at {}; run `hsfs train` first",
            ckpt.display()
        );
    }
    let log = TrainLog::load(layout.train_log())?;
    let params = load_checkpoint(&ckpt, Some(&log.model_digest))?;
    Ok((params, log))
}

pub fn synth(config: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let out = gen_dataset(&config.synth, &layout.data)?;
    let mut digests = BTreeMap::new();
    for name in ["all.json", "train.json", "test.json"] {
        digests.insert(name, file_digest(&layout.data.join(name))?);
    }
    let result = json!({
        "classes": out.all.classes,
        "cubes": out.all.entries.len(),
        "train": out.train.entries.len(),
        "test": out.test.entries.len(),
        "data_dir": layout.data,
    });
    let document = result_document(layout, "synth", config, digests, result)?;
    Ok(Outcome {
        summary: format!(
            "synth: {} cubes in {} classes ({} train / {} test) -> {}",
            out.all.entries.len(),
            out.all.classes.len(),
            out.train.entries.len(),
            out.test.entries.len(),
            layout.data.display()
        ),
        document,
    })
}

fn prepare_cube(cube: &HyperCube, config: &RunConfig) -> Result<Vec<HyperCube>> {
    let p = &config.prep;
    let mut c = trim_channels(cube, p.trim_head, p.trim_tail)?;
    if p.reduce_factor > 1 {
        c = average_reduce_channels(&c, p.reduce_factor)?;
    }
    match p.window {
        None => Ok(vec![c]),
        Some(w) => Ok(density_filter(
            crop_windows(&c, w, p.stride)?,
            p.density_threshold,
        )?),
    }
}

pub fn prep(config: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let source = layout.data.join(&config.prep.source);
    if !source.exists() {
        bail!(
            "source manifest {} does not exist; run `hsfs synth` first",
            source.display()
        );
    }
    let manifest = DatasetManifest::load(&source)?;
    let base = source.parent().unwrap_or(Path::new("."));
    let out_dir = layout.data.join(&config.prep.output);
    create_dir(&out_dir.join("cubes"))?;

    let mut entries = Vec::new();
    for entry in &manifest.entries {
        let cube = hsi_fewshot::cubeio::load_cube(base.join(&entry.path))?;
        let stem = Path::new(&entry.path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cube")
            .to_string();
        for (n, piece) in prepare_cube(&cube, config)?.iter().enumerate() {
            let rel = format!("cubes/{stem}_{n:03}.hsc");
            save_cube(piece, out_dir.join(&rel), Some(&entry.label))?;
            entries.push(ManifestEntry {
                path: rel,
                label: entry.label.clone(),
                label_index: entry.label_index,
            });
        }
    }
    let classes = manifest.classes.clone();
    let (tr, te) = split_dataset(
        entries.clone(),
        &classes,
        config.prep.per_class_train,
        config.prep.seed,
    )?;
    let prov = serde_json::to_value(&config.prep)?;
    let mut digests = BTreeMap::new();
    digests.insert("source", file_digest(&source)?);
    let mut counts = BTreeMap::new();
    for (split, list) in [("all", entries), ("train", tr), ("test", te)] {
        let mut m = DatasetManifest::new(split, classes.clone(), list);
        let c = m.class_counts();
        m.balanced = c.iter().all(|&n| n == c[0]);
        m.provenance.insert("prep".into(), prov.clone());
        m.provenance
            .insert("source_manifest".into(), json!(config.prep.source));
        let path = out_dir.join(format!("{split}.json"));
        m.save(&path)?;
        counts.insert(split, m.entries.len());
        digests.insert(split, file_digest(&path)?);
    }
    let result = json!({ "counts": counts, "output_dir": out_dir });
    let document = result_document(layout, "prep", config, digests, result)?;
    Ok(Outcome {
        summary: format!(
            "prep: {} prepared cubes ({} train / {} test) -> {}",
            counts["all"],
            counts["train"],
            counts["test"],
            out_dir.display()
        ),
        document,
    })
}

pub fn train_cmd(config: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let (full, data_digest) = load_split(layout, &config.paths.train_manifest)?;
    let channels = full
        .channels()
        .ok_or_else(|| anyhow!("training manifest is empty"))?;
    let excluded = class_indices(&full, &config.eval.excluded)?;
    let data = if excluded.is_empty() {
        full
    } else {
        let keep: Vec<usize> = (0..full.classes.len())
            .filter(|k| !excluded.contains(k))
            .collect();
        full.retain_classes(&keep)
    };
    let mut model = config.model.clone();
    model.in_channels = channels;
    let init = EmbeddingParams::init(&model)?;
    let (params, log) = train(&data, init, &config.train)?;

    create_dir(&layout.model)?;
    save_checkpoint(&params, layout.checkpoint())?;
    log.save(layout.train_log())?;
    log.write_jsonl(layout.train_log_lines())?;

    let mut resolved = config.clone();
    resolved.model = model;
    let best = log.epoch(log.best_epoch).expect("best epoch is logged");
    let mut digests = BTreeMap::new();
    digests.insert("model", params.digest());
    digests.insert("train_manifest", data_digest);
    digests.insert("checkpoint", file_digest(&layout.checkpoint())?);
    let trained: Vec<&str> = log
        .trained_classes
        .iter()
        .map(|&k| log.classes[k].as_str())
        .collect();
    let result = json!({
        "trained_classes": trained,
        "episodes_per_epoch": log.best_episodes.len(),
        "best_epoch": log.best_epoch,
        "best_loss": best.mean_loss,
        "best_accuracy": best.accuracy,
        "first_epoch_loss": log.epochs[0].mean_loss,
        "parameters": params.num_params(),
    });
    let document = result_document(layout, "train", &resolved, digests, result)?;
    Ok(Outcome {
        summary: format!(
            "train: {}-way, {} epochs, best epoch {} (loss {:.4}, episode accuracy {:.4}), model {} -> {}",
            trained.len(),
            log.epochs.len(),
            log.best_epoch,
            best.mean_loss,
            best.accuracy,
            params.digest(),
            layout.checkpoint().display()
        ),
        document,
    })
}

pub fn ccp(config: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let (params, log) = load_model(layout)?;
    let bank = build_ccp(&log, &log.classes)?;
    save_ccp(&bank, layout.bank())?;
    let mut digests = BTreeMap::new();
    digests.insert("model", params.digest());
    digests.insert("bank", file_digest(&layout.bank())?);
    let result = json!({
        "classes": bank.class_names(),
        "best_epoch": bank.provenance.best_epoch,
        "episodes": bank.provenance.episodes,
        "dim": bank.dim,
    });
    let document = result_document(layout, "ccp", &with_model(config, &params), digests, result)?;
    Ok(Outcome {
        summary: format!(
            "ccp: {} collective prototypes from {} episodes of epoch {} -> {}",
            bank.class_ids.len(),
            bank.provenance.episodes,
            bank.provenance.best_epoch,
            layout.bank().display()
        ),
        document,
    })
}

fn load_bank(layout: &Layout, params: &EmbeddingParams) -> Result<CCPBank> {
    let path = layout.bank();
    if !path.exists() {
        bail!(
            "complete-class evaluation needs collective prototypes, but {} does not exist; run `hsfs ccp` first",
            path.display()
        );
    }
    Ok(load_ccp(&path, Some(&params.digest()))?)
}

pub fn eval(config: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let (params, log) = load_model(layout)?;
    let (test, test_digest) = load_split(layout, &config.paths.test_manifest)?;
    let mut digests = BTreeMap::new();
    digests.insert("model", params.digest());
    digests.insert("test_manifest", test_digest);
    let protocol = config.eval.protocol;
    let name = format!("eval-{}", protocol.name());

    let (summary, result) = match protocol {
        EvalProtocol::Complete => {
            let bank = load_bank(layout, &params)?;
            digests.insert("bank", file_digest(&layout.bank())?);
            let report = eval_complete(&test, &params, &bank)?;
            let (train_ds, train_digest) = load_split(layout, &config.paths.train_manifest)?;
            digests.insert("train_manifest", train_digest);
            let train_ds = train_ds.retain_classes(&log.trained_classes);
            let variability =
                eval_with_support_sets(&test, &train_ds, &params, &log.best_episodes, &bank)?;
            export_confusion(&report, layout.reports.join("confusion-complete.csv"))?;
            let mut summary = format!(
                "eval complete: CCP accuracy {:.4} on {} cubes; support sets {:.4} ± {:.4}",
                report.accuracy,
                report.confusion.total(),
                variability.mean,
                variability.std
            );
            let mut result = json!({ "report": report, "support_sets": variability });
            if config.eval.baseline {
                let init = EmbeddingParams::init(&params.config)?;
                let (model, history) =
                    train_supervised_baseline(&train_ds, init, &config.baseline)?;
                let base = eval_supervised(&test, &model)?;
                export_confusion(&base, layout.reports.join("confusion-supervised.csv"))?;
                export_confusion_difference(
                    &report,
                    &base,
                    layout.reports.join("confusion-difference.csv"),
                )?;
                summary.push_str(&format!("; supervised baseline {:.4}", base.accuracy));
                result["supervised"] = json!({ "report": base, "history": history });
            }
            (summary, result)
        }
        EvalProtocol::PartialS1 | EvalProtocol::PartialS2 => {
            let (pool, pool_digest) = load_split(layout, &config.paths.train_manifest)?;
            digests.insert("train_manifest", pool_digest);
            let excluded = class_indices(&test, &config.eval.excluded)?;
            if let Some(&k) = excluded.iter().find(|k| log.trained_classes.contains(k)) {
                bail!(
                    "class `{}` was seen in training; retrain with `hsfs train --exclude {}`",
                    test.classes[k],
                    config.eval.excluded.join(",")
                );
            }
            let study = partial_class_study(
                &test,
                &pool,
                &params,
                &excluded,
                config.eval.shot,
                config.eval.repetitions,
                config.eval.seed,
            )?;
            let (label, mean, std, confusion) = if protocol == EvalProtocol::PartialS1 {
                (
                    "strategy 1",
                    study.strategy1_mean,
                    study.strategy1_std,
                    &study.strategy1_confusion,
                )
            } else {
                (
                    "strategy 2",
                    study.strategy2_mean,
                    study.strategy2_std,
                    &study.strategy2_confusion,
                )
            };
            let pooled = EvalReport::from_confusion(
                if protocol == EvalProtocol::PartialS1 {
                    hsi_fewshot::eval::Protocol::PartialStrategy1
                } else {
                    hsi_fewshot::eval::Protocol::PartialStrategy2
                },
                config.eval.seed,
                params.digest(),
                confusion.clone(),
            );
            export_confusion(
                &pooled,
                layout
                    .reports
                    .join(format!("confusion-{}.csv", protocol.name())),
            )?;
            let summary = format!(
                "eval {}: {label} accuracy {mean:.4} ± {std:.4} over {} draws on excluded {}",
                protocol.name(),
                config.eval.repetitions,
                study.excluded.join(",")
            );
            (
                summary,
                json!({ "accuracy": mean, "std": std, "pooled": pooled, "study": study }),
            )
        }
    };
    let document = result_document(layout, &name, &with_model(config, &params), digests, result)?;
    Ok(Outcome { summary, document })
}

/// Loads the `report` object of an eval result document.
fn report_from_document(path: &Path) -> Result<EvalReport> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let doc: Value = serde_json::from_str(&text)?;
    let report = doc
        .pointer("/result/report")
        .or_else(|| doc.pointer("/result/pooled"))
        .ok_or_else(|| anyhow!("{} holds no evaluation report", path.display()))?;
    Ok(serde_json::from_value(report.clone())?)
}

pub fn report(config: &RunConfig, layout: &Layout, compare: Option<&[PathBuf]>) -> Result<Outcome> {
    let (params, log) = load_model(layout)?;
    let (test, test_digest) = load_split(layout, &config.paths.test_manifest)?;
    let mut digests = BTreeMap::new();
    digests.insert("model", params.digest());
    digests.insert("test_manifest", test_digest);
    create_dir(&layout.reports)?;
    let mut written = Vec::new();

    if params.config.attention {
        let heatmap = export_attention_heatmap(&test, &params)?;
        let p = layout.reports.join("attention-heatmap.csv");
        heatmap.write_csv(&p)?;
        written.push(p);
    }
    let p = layout.reports.join("embeddings-test.csv");
    export_embeddings(&dataset_rows(&test, &params)?, &p)?;
    written.push(p);
    let p = layout.reports.join("embeddings-prototypes.csv");
    export_embeddings(&prototype_rows(&log.best_prototypes, &log.classes), &p)?;
    written.push(p);
    if layout.bank().exists() {
        let bank = load_ccp(layout.bank(), Some(&params.digest()))?;
        let p = layout.reports.join("embeddings-ccp.csv");
        export_embeddings(&bank_rows(&bank), &p)?;
        written.push(p);
    }
    if let Some(pair) = compare {
        let a = report_from_document(&pair[0])?;
        let b = report_from_document(&pair[1])?;
        let p = layout.reports.join("confusion-compare.csv");
        export_confusion_difference(&a, &b, &p)?;
        written.push(p);
    }
    let names: Vec<String> = written
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let result = json!({ "files": names });
    let document = result_document(
        layout,
        "report",
        &with_model(config, &params),
        digests,
        result,
    )?;
    Ok(Outcome {
        summary: format!(
            "report: wrote {} -> {}",
            names.join(", "),
            layout.reports.display()
        ),
        document,
    })
}
