//! Segmentation and classification metrics, statistical comparison,
//! Grad-CAM and visual montages.

mod gradcam;
mod metrics;
mod montage;
mod stats;

pub use gradcam::gradcam3d;
pub use metrics::{cls_metrics, mean_std, seg_metrics, seg_metrics_from, ClsMetrics, Confusion, SegMetrics};
pub use montage::{montage, montage_bytes, MontageLayout};
pub use stats::{friedman_test, nemenyi_cd, nemenyi_pairs, rank_row, FriedmanResult};
