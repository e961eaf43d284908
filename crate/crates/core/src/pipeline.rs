//! End-to-end experiment drivers shared by the CLI and the C ABI: cohort
//! preprocessing, held-out segmentation cross-validation, classifier
//! cross-validation on predicted masks, and single-scan prediction.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{cls_metrics, mean_std, seg_metrics, ClsMetrics, SegMetrics};
use crate::nets::{ArchSpec, Network};
use crate::phantom::{CaseRecord, ManifestRow};
use crate::post::{binarize, remove_small};
use crate::prep::{preprocess_mask, preprocess_scan, z_trim};
use crate::seed;
use crate::train::{
    classify, holdout_test, scaled_holdout_counts, segment, stratified_kfold, train_classifier, train_segmentation,
    ClsFoldResult, ClsJob, ClsSample, FoldSplit, SegFoldResult, SegJob, SegSample,
};
use crate::volio::{read_nrrd, write_nrrd, Encoding, Group, MaskVolume, ScanMeta, Volume, VolumeKind};

pub fn seg_job(cfg: &RunConfig) -> SegJob {
    SegJob {
        generator: cfg.model.segmenter.clone(),
        discriminator: cfg.model.discriminator.clone(),
        loss: cfg.loss,
        optim: cfg.optim,
        train: cfg.train.clone(),
        threshold: cfg.post.threshold,
        seed: seed::derive(cfg.seed, "train_seg"),
    }
}

pub fn cls_job(cfg: &RunConfig) -> ClsJob {
    ClsJob {
        arch: cfg.model.classifier.clone(),
        optim: cfg.optim,
        epochs: cfg.train.cls_epochs,
        balance: cfg.train.balance,
        seed: seed::derive(cfg.seed, "train_cls"),
    }
}

/// Preprocesses in-memory phantom cases.
pub fn prepare_cases(cases: &[CaseRecord], cfg: &RunConfig) -> Result<Vec<SegSample>> {
    cases
        .par_iter()
        .map(|c| {
            Ok(SegSample {
                id: c.id.clone(),
                group: c.group,
                image: preprocess_scan(&c.volume, &c.meta, &cfg.prep)?,
                mask: preprocess_mask(&c.mask, &cfg.prep)?,
            })
        })
        .collect()
}

/// Preprocesses the cases of `manifest` found in `data_dir` and writes them to
/// `prep_dir` under the same names.
pub fn preprocess_dir(data_dir: &Path, prep_dir: &Path, manifest: &[ManifestRow], cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(prep_dir).map_err(|e| Error::io(prep_dir, e))?;
    manifest.par_iter().try_for_each(|row| {
        let scan = data_dir.join(format!("{}.nrrd", row.id));
        let raw = read_nrrd(&scan)?.into_volume()?;
        let meta = ScanMeta::read(ScanMeta::sidecar_path(&scan))?;
        let mask = read_nrrd(data_dir.join(format!("{}.mask.nrrd", row.id)))?.into_mask()?;
        write_nrrd(
            preprocess_scan(&raw, &meta, &cfg.prep)?,
            prep_dir.join(format!("{}.nrrd", row.id)),
            Encoding::Raw,
        )?;
        write_nrrd(
            preprocess_mask(&mask, &cfg.prep)?,
            prep_dir.join(format!("{}.mask.nrrd", row.id)),
            Encoding::Raw,
        )
    })?;
    crate::phantom::write_manifest(&prep_dir.join("manifest.csv"), manifest)
}

pub fn load_prepared(prep_dir: &Path, manifest: &[ManifestRow]) -> Result<Vec<SegSample>> {
    manifest
        .par_iter()
        .map(|row| {
            let image = read_nrrd(prep_dir.join(format!("{}.nrrd", row.id)))?.into_volume()?;
            image.expect_kind(VolumeKind::Windowed)?;
            Ok(SegSample {
                id: row.id.clone(),
                group: row.group,
                image,
                mask: read_nrrd(prep_dir.join(format!("{}.mask.nrrd", row.id)))?.into_mask()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegSummaryRow {
    pub fold: usize,
    pub best_epoch: usize,
    pub dev_dsc: f64,
    pub dev_precision: f64,
    pub dev_sensitivity: f64,
    pub test_dsc: f64,
    pub test_precision: f64,
    pub test_sensitivity: f64,
    pub test_dsc_post: f64,
    /// Not written to `summary.csv`.
    #[serde(skip_serializing)]
    pub mean_epoch_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SegExperiment {
    pub test_ids: Vec<String>,
    pub split: FoldSplit,
    pub folds: Vec<SegFoldResult>,
    pub summary: Vec<SegSummaryRow>,
}

impl SegExperiment {
    /// Mean and std over cases (or over folds with `per_fold`) of dev DSC.
    pub fn dev_dsc(&self, per_fold: bool) -> (f64, f64) {
        if per_fold {
            mean_std(&self.summary.iter().map(|r| r.dev_dsc).collect::<Vec<_>>())
        } else {
            mean_std(
                &self
                    .folds
                    .iter()
                    .flat_map(|f| f.best_dev_dsc.iter().copied())
                    .collect::<Vec<_>>(),
            )
        }
    }

    pub fn test_dsc(&self) -> (f64, f64) {
        mean_std(&self.summary.iter().map(|r| r.test_dsc).collect::<Vec<_>>())
    }

    /// Predicted dev masks of every cross-validated case.
    pub fn dev_predictions(&self) -> Vec<(&str, &MaskVolume)> {
        self.folds
            .iter()
            .flat_map(|f| f.dev_predictions.iter().map(|(id, m)| (id.as_str(), m)))
            .collect()
    }
}

fn mean_metrics(m: &[SegMetrics]) -> SegMetrics {
    let col = |f: fn(&SegMetrics) -> f64| mean_std(&m.iter().map(f).collect::<Vec<_>>()).0;
    SegMetrics {
        dsc: col(|m| m.dsc),
        precision: col(|m| m.precision),
        sensitivity: col(|m| m.sensitivity),
    }
}

/// Holds out a test set, cross-validates the segmenter on the remainder and
/// scores every fold's best checkpoint on the test set. `folds` restricts
/// which folds are trained (default all).
pub fn seg_experiment(
    cfg: &RunConfig,
    samples: &[SegSample],
    folds: Option<&[usize]>,
    out_dir: Option<&Path>,
) -> Result<SegExperiment> {
    let cases: Vec<(&str, Group)> = samples.iter().map(|s| (s.id.as_str(), s.group)).collect();
    let counts = cfg
        .train
        .holdout
        .unwrap_or_else(|| scaled_holdout_counts(samples.len()));
    let (test_ids, rest) = holdout_test(&cases, counts, seed::derive(cfg.seed, "holdout"))?;
    let strata: Vec<(String, String)> = samples
        .iter()
        .filter(|s| rest.contains(&s.id))
        .map(|s| (s.id.clone(), s.group.to_string()))
        .collect();
    let split = stratified_kfold(&strata, cfg.train.folds, seed::derive(cfg.seed, "seg_kfold"))?;
    let all: Vec<usize> = (0..split.k).collect();
    let folds = folds.unwrap_or(&all);
    let job = seg_job(cfg);
    let results = train_segmentation(&job, samples, &split, folds, out_dir)?;

    let test: Vec<&SegSample> = samples.iter().filter(|s| test_ids.contains(&s.id)).collect();
    let mut summary = Vec::new();
    for r in &results {
        let scored = test
            .par_iter()
            .map(|s| {
                let prob = segment(&r.generator, &s.image)?;
                let pred = binarize(&prob, cfg.post.threshold)?;
                let post = remove_small(&pred, cfg.post.min_component_frac, cfg.post.connectivity)?;
                Ok((seg_metrics(&pred, &s.mask)?, seg_metrics(&post, &s.mask)?.dsc))
            })
            .collect::<Result<Vec<_>>>()?;
        let raw: Vec<SegMetrics> = scored.iter().map(|s| s.0).collect();
        let t = if raw.is_empty() {
            SegMetrics {
                dsc: f64::NAN,
                precision: f64::NAN,
                sensitivity: f64::NAN,
            }
        } else {
            mean_metrics(&raw)
        };
        let post = if scored.is_empty() {
            f64::NAN
        } else {
            mean_std(&scored.iter().map(|s| s.1).collect::<Vec<_>>()).0
        };
        summary.push(SegSummaryRow {
            fold: r.fold,
            best_epoch: r.best_epoch,
            dev_dsc: r.best_dev.dsc,
            dev_precision: r.best_dev.precision,
            dev_sensitivity: r.best_dev.sensitivity,
            test_dsc: t.dsc,
            test_precision: t.precision,
            test_sensitivity: t.sensitivity,
            test_dsc_post: post,
            mean_epoch_seconds: mean_std(&r.epoch_seconds).0,
        });
    }
    let exp = SegExperiment {
        test_ids,
        split,
        folds: results,
        summary,
    };
    if let Some(out) = out_dir {
        write_seg_outputs(out, &exp, samples)?;
    }
    Ok(exp)
}

#[derive(Serialize)]
struct SplitRow<'a> {
    id: &'a str,
    group: Group,
    role: &'a str,
    fold: Option<usize>,
}

fn write_seg_outputs(out: &Path, exp: &SegExperiment, samples: &[SegSample]) -> Result<()> {
    let path = out.join("split.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for s in samples {
        let fold = exp.split.fold_of(&s.id);
        let role = if exp.test_ids.contains(&s.id) { "test" } else { "cv" };
        w.serialize(SplitRow {
            id: &s.id,
            group: s.group,
            role,
            fold,
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &exp.summary {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("dev_dsc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "fold", "dsc"])?;
    for f in &exp.folds {
        for ((id, _), d) in f.dev_predictions.iter().zip(&f.best_dev_dsc) {
            w.write_record([id.clone(), f.fold.to_string(), d.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let dir = out.join("dev_predictions");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (id, m) in exp.dev_predictions() {
        write_nrrd(m.clone(), dir.join(format!("{id}.mask.nrrd")), Encoding::Gzip)?;
    }
    Ok(())
}

/// Z-trimmed classifier inputs from `(id, group, mask)` triples.
pub fn cls_samples<'a>(masks: impl IntoIterator<Item = (&'a str, Group, &'a MaskVolume)>) -> Result<Vec<ClsSample>> {
    masks
        .into_iter()
        .map(|(id, group, m)| {
            Ok(ClsSample {
                id: id.to_string(),
                group,
                label: group.label(),
                mask: z_trim(m, None)?.mask,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsSummaryRow {
    pub fold: usize,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct ClsExperiment {
    pub split: FoldSplit,
    pub folds: Vec<ClsFoldResult>,
    pub summary: Vec<ClsSummaryRow>,
}

impl ClsExperiment {
    /// Mean and std over folds of `f`.
    pub fn fold_stat(&self, f: fn(&ClsSummaryRow) -> f64) -> (f64, f64) {
        mean_std(&self.summary.iter().map(f).collect::<Vec<_>>())
    }

    /// Metrics of all dev predictions pooled.
    pub fn pooled(&self) -> ClsMetrics {
        let rows: Vec<&(String, f64, u8)> = self.folds.iter().flat_map(|f| &f.dev_probs).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let y: Vec<u8> = rows.iter().map(|r| r.2).collect();
        cls_metrics(&p, &y)
    }
}

/// Stratified cross-validation of the classifier.
pub fn cls_experiment(
    cfg: &RunConfig,
    samples: &[ClsSample],
    folds: Option<&[usize]>,
    out_dir: Option<&Path>,
) -> Result<ClsExperiment> {
    let strata: Vec<(String, String)> = samples.iter().map(|s| (s.id.clone(), s.group.to_string())).collect();
    let split = stratified_kfold(&strata, cfg.train.cls_folds, seed::derive(cfg.seed, "cls_kfold"))?;
    let all: Vec<usize> = (0..split.k).collect();
    let results = train_classifier(&cls_job(cfg), samples, &split, folds.unwrap_or(&all), out_dir)?;
    let summary = results
        .iter()
        .map(|r| ClsSummaryRow {
            fold: r.fold,
            best_epoch: r.best_epoch,
            accuracy: r.best_dev.accuracy,
            precision: r.best_dev.precision,
            sensitivity: r.best_dev.sensitivity,
            specificity: r.best_dev.specificity,
            f1: r.best_dev.f1,
        })
        .collect();
    let exp = ClsExperiment {
        split,
        folds: results,
        summary,
    };
    if let Some(out) = out_dir {
        let path = out.join("summary.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &exp.summary {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = out.join("dev_predictions.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for f in &exp.folds {
            for (id, p, y) in &f.dev_probs {
                w.serialize(PredictionRow {
                    id: id.clone(),
                    probability: *p,
                    label: *y,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(exp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub probability: f64,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Postprocessed mask on the preprocessed grid.
    pub mask: MaskVolume,
    pub trimmed: MaskVolume,
    pub probability: Option<f64>,
}

/// Segmentation network loaded from a checkpoint, rejecting classifiers and
/// discriminators.
pub fn load_segmenter(path: &Path) -> Result<Network<f32>> {
    let net = Network::load(path)?;
    match net.spec() {
        ArchSpec::Savect { .. } | ArchSpec::DeepvoxDiscriminator { .. } => Err(Error::CheckpointMismatch(format!(
            "{} holds a {}, not a segmenter",
            path.display(),
            net.spec().name()
        ))),
        _ => Ok(net),
    }
}

pub fn load_classifier(path: &Path) -> Result<Network<f32>> {
    let net = Network::load(path)?;
    match net.spec() {
        ArchSpec::Savect { .. } => Ok(net),
        other => Err(Error::CheckpointMismatch(format!(
            "{} holds a {}, not a classifier",
            path.display(),
            other.name()
        ))),
    }
}

/// Full chain on one scan: preprocessing, segmentation, binarization,
/// small-component removal, Z-trim and optional classification.
pub fn predict_scan(
    cfg: &RunConfig,
    generator: &Network<f32>,
    classifier: Option<&Network<f32>>,
    scan: &Volume,
    meta: &ScanMeta,
) -> Result<Prediction> {
    let image = preprocess_scan(scan, meta, &cfg.prep)?;
    let prob = segment(generator, &image)?;
    let mask = remove_small(
        &binarize(&prob, cfg.post.threshold)?,
        cfg.post.min_component_frac,
        cfg.post.connectivity,
    )?;
    let trimmed = z_trim(&mask, None)?.mask;
    let probability = classifier.map(|c| classify(c, &trimmed)).transpose()?;
    Ok(Prediction {
        mask,
        trimmed,
        probability,
    })
}

/// Reads a scan and its sidecar. Without a sidecar, raw scans use the
/// standard CT rescale (slope 1, intercept −1024).
pub fn read_scan(path: &Path) -> Result<(Volume, ScanMeta)> {
    let v = read_nrrd(path)?.into_volume()?;
    let side = ScanMeta::sidecar_path(path);
    let meta = if side.exists() {
        ScanMeta::read(&side)?
    } else {
        if v.kind() == VolumeKind::Raw {
            log::warn!("{}: no sidecar, assuming slope 1 intercept -1024", path.display());
        }
        ScanMeta {
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            group: Group::Cta,
            label: 0,
        }
    };
    Ok((v, meta))
}

/// Case id of a scan path: the file name without `.nrrd`.
pub fn scan_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_suffix(".nrrd").unwrap_or(&name).to_string()
}

pub fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out_dir.join(stage)
}
