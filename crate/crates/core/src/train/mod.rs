//! Cohort splitting, augmentation and the segmentation / classification
//! training loops.

mod augment;
mod cls;
mod seg;
mod split;

pub use augment::{augment_sample, AugmentConfig};
pub use cls::{classify, train_classifier, ClsEpochRow, ClsFoldResult, ClsJob, ClsSample};
pub use seg::{gan_train_step, segment, train_segmentation, SegEpochRow, SegFoldResult, SegJob, SegSample};
pub use split::{
    balance_downsample, holdout_test, scaled_holdout_counts, stratified_kfold, vote_masks, FoldCase, FoldSplit,
    HOLDOUT_REFERENCE,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volio::{MaskVolume, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Cosine decay with warm restarts, stepped per optimizer update.
    Cosine,
    /// Reduce-on-plateau, stepped per epoch on the dev metric.
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Segmenter predictions on each case's dev fold.
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub folds: usize,
    pub epochs: usize,
    pub schedule: ScheduleKind,
    pub augment: AugmentConfig,
    /// Held-out test counts per group; `None` scales the reference counts to
    /// the cohort size.
    pub holdout: Option<[usize; 5]>,
    pub cls_folds: usize,
    pub cls_epochs: usize,
    pub cls_mask_source: MaskSource,
    pub balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            folds: 4,
            epochs: 300,
            schedule: ScheduleKind::Cosine,
            augment: AugmentConfig::default(),
            holdout: None,
            cls_folds: 10,
            cls_epochs: 50,
            cls_mask_source: MaskSource::Predicted,
            balance: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.cls_folds < 2 {
            return Err(Error::InvalidConfig(format!(
                "folds and cls_folds must be >= 2, got {} and {}",
                self.folds, self.cls_folds
            )));
        }
        self.augment.validate()
    }
}

/// `[1, 1, Z, Y, X]` view of a volume.
pub fn volume_tensor(v: &Volume) -> Tensor<f32> {
    let [nx, ny, nz] = v.dims();
    Tensor::new(vec![1, 1, nz, ny, nx], v.data().to_vec()).expect("volume length matches dims")
}

pub fn mask_tensor(m: &MaskVolume) -> Tensor<f32> {
    let [nx, ny, nz] = m.dims();
    Tensor::new(vec![1, 1, nz, ny, nx], m.data().iter().map(|&b| b as f32).collect()).expect("mask length matches dims")
}

/// Probability volume on the grid of `like` from a `[1, 1, Z, Y, X]` tensor.
pub fn tensor_volume(t: &Tensor<f32>, like: &Volume) -> Result<Volume> {
    let [nx, ny, nz] = like.dims();
    if t.shape() != [1, 1, nz, ny, nx] {
        return Err(Error::ShapeMismatch(format!(
            "{:?} does not match volume dims {:?}",
            t.shape(),
            like.dims()
        )));
    }
    Volume::new(like.geometry().clone(), VolumeKind::Windowed, t.data().to_vec())
}

fn fold_dir(out: &Path, fold: usize) -> Result<std::path::PathBuf> {
    let d = out.join(format!("fold{fold}"));
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_timing(path: &Path, seconds: &[f64]) -> Result<()> {
    let rows: Vec<(usize, f64)> = seconds.iter().copied().enumerate().map(|(e, s)| (e + 1, s)).collect();
    write_rows(path, &["epoch", "seconds"], &rows)
}
