//! Run configuration: one JSON document with a section per module, plus
//! dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loss::HybridFocalParams;
use crate::nets::ArchSpec;
use crate::optim::OptimConfig;
use crate::phantom::PhantomConfig;
use crate::post::PostConfig;
use crate::prep::PrepConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub segmenter: ArchSpec,
    pub discriminator: ArchSpec,
    pub classifier: ArchSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            segmenter: ArchSpec::deepvox_generator(),
            discriminator: ArchSpec::deepvox_discriminator(),
            classifier: ArchSpec::savect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Significance level of the Nemenyi test.
    pub alpha: f64,
    /// Grad-CAM layer; `None` picks the last convolution.
    pub gradcam_layer: Option<String>,
    pub montage_rows: usize,
    pub montage_cols: usize,
    /// Aggregate fold means instead of per-case values.
    pub per_fold: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            gradcam_layer: None,
            montage_rows: 3,
            montage_cols: 4,
            per_fold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub prep: PrepConfig,
    pub model: ModelConfig,
    pub loss: HybridFocalParams,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub post: PostConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Pins case-parallel work to one thread unless `VOXPIPE_THREADS` is set.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomConfig::default(),
            prep: PrepConfig::default(),
            model: ModelConfig::default(),
            loss: HybridFocalParams::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            post: PostConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            deterministic: false,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by the file at `path` (if any), overlaid by each
    /// `key.path=value` in `overrides`. Values parse as JSON and fall back to
    /// plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            merge(&mut tree, file);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        let v: Value = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        merge(&mut tree, v);
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.prep.validate()?;
        for a in [&self.model.segmenter, &self.model.discriminator, &self.model.classifier] {
            a.validate()?;
        }
        if !matches!(self.model.classifier, ArchSpec::Savect { .. }) {
            return Err(Error::InvalidConfig("model.classifier must be savect".into()));
        }
        if !matches!(self.model.discriminator, ArchSpec::DeepvoxDiscriminator { .. }) {
            return Err(Error::InvalidConfig(
                "model.discriminator must be deepvox_discriminator".into(),
            ));
        }
        if matches!(
            self.model.segmenter,
            ArchSpec::Savect { .. } | ArchSpec::DeepvoxDiscriminator { .. }
        ) {
            return Err(Error::InvalidConfig(format!(
                "model.segmenter cannot be {}",
                self.model.segmenter.name()
            )));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.post.threshold) || !(0.0..=1.0).contains(&self.post.min_component_frac) {
            return Err(Error::InvalidConfig(
                "post.threshold and post.min_component_frac must lie in [0, 1]".into(),
            ));
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eval.alpha must lie in (0, 1), got {}",
                self.eval.alpha
            )));
        }
        if self.eval.montage_rows == 0 || self.eval.montage_cols == 0 {
            return Err(Error::InvalidConfig("montage grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// Recursive object merge. An architecture object whose `arch` tag changes
/// replaces the default wholesale so stale variant fields do not leak in.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retag = match (b.get("arch"), o.get("arch")) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            };
            if retag {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::InvalidConfig(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(tree, patch);
    Ok(())
}
