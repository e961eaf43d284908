use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::seg::lookup;
use super::{balance_downsample, fold_dir, mask_tensor, write_rows, write_timing, FoldSplit};
use crate::error::{Error, Result};
use crate::eval::{cls_metrics, ClsMetrics};
use crate::loss::bce;
use crate::nets::{ArchSpec, Network};
use crate::optim::{Adam, AdamConfig, OptimConfig, PlateauState};
use crate::seed;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::volio::{Group, MaskVolume};

const LOG_CLAMP: f64 = 1e-12;

/// A Z-trimmed binary mask with its case label.
#[derive(Debug, Clone)]
pub struct ClsSample {
    pub id: String,
    pub group: Group,
    pub label: u8,
    pub mask: MaskVolume,
}

#[derive(Debug, Clone)]
pub struct ClsJob {
    pub arch: ArchSpec,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub balance: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsEpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_precision: f64,
    pub dev_sensitivity: f64,
    pub dev_specificity: f64,
    pub dev_f1: f64,
}

pub(crate) const CLS_HEADER: [&str; 8] = [
    "epoch",
    "lr",
    "train_loss",
    "dev_accuracy",
    "dev_precision",
    "dev_sensitivity",
    "dev_specificity",
    "dev_f1",
];

#[derive(Debug, Clone)]
pub struct ClsFoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_dev: ClsMetrics,
    pub history: Vec<ClsEpochRow>,
    pub epoch_seconds: Vec<f64>,
    pub steps_per_epoch: Vec<usize>,
    pub net: Network<f32>,
    /// `(id, probability, label)` of the best checkpoint on the dev fold.
    pub dev_probs: Vec<(String, f64, u8)>,
}

/// Probability that `mask` shows an aneurysm.
pub fn classify(net: &Network<f32>, mask: &MaskVolume) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(mask_tensor(mask));
    let o = net.forward(&mut tape, x, false, None)?;
    Ok(tape.value(o.out).item().f64())
}

fn train_step(net: &mut Network<f32>, opt: &mut Adam<f32>, s: &ClsSample) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(mask_tensor(&s.mask));
    let o = net.forward(&mut tape, x, true, None)?;
    let l = bce(&mut tape, o.out, &Tensor::full(vec![1, 1], s.label as f32))?;
    let v = tape.value(l).item().f64();
    let grads = tape.backward(l)?;
    let g = net.param_grads(&o, &grads);
    let mut params: Vec<&mut Tensor<f32>> = net.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
    opt.step(&mut params, &g)?;
    Ok(v)
}

struct DevEval {
    metrics: ClsMetrics,
    loss: f64,
    probs: Vec<(String, f64, u8)>,
}

fn evaluate(net: &Network<f32>, dev: &[&ClsSample]) -> Result<DevEval> {
    let probs = dev
        .iter()
        .map(|s| Ok((s.id.clone(), classify(net, &s.mask)?, s.label)))
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = probs.iter().map(|r| r.1).collect();
    let y: Vec<u8> = probs.iter().map(|r| r.2).collect();
    let loss = p
        .iter()
        .zip(&y)
        .map(|(&p, &y)| {
            let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / p.len() as f64;
    Ok(DevEval {
        metrics: cls_metrics(&p, &y),
        loss,
        probs,
    })
}

/// Trains one classifier per requested fold on (optionally class-balanced)
/// training folds. With `out_dir`, writes `fold<k>/metrics.csv`,
/// `fold<k>/timing.csv` and the best-dev `fold<k>/classifier.ckpt`.
pub fn train_classifier(
    job: &ClsJob,
    samples: &[ClsSample],
    split: &FoldSplit,
    folds: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<ClsFoldResult>> {
    if !matches!(job.arch, ArchSpec::Savect { .. }) {
        return Err(Error::InvalidConfig(format!("{} is not a classifier", job.arch.name())));
    }
    job.arch.validate()?;
    job.optim.validate()?;
    let by_id: HashMap<&str, &ClsSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    folds
        .iter()
        .map(|&f| {
            if f >= split.k {
                return Err(Error::InvalidConfig(format!(
                    "fold {f} out of range for k = {}",
                    split.k
                )));
            }
            let train = lookup(&by_id, split.train_ids(f))?;
            let dev = lookup(&by_id, split.dev_ids(f))?;
            let res = train_fold(job, train, &dev, f)?;
            if let Some(out) = out_dir {
                let dir = fold_dir(out, f)?;
                write_rows(&dir.join("metrics.csv"), &CLS_HEADER, &res.history)?;
                write_timing(&dir.join("timing.csv"), &res.epoch_seconds)?;
                res.net.save(&dir.join("classifier.ckpt"))?;
            }
            Ok(res)
        })
        .collect()
}

fn train_fold(job: &ClsJob, train: Vec<&ClsSample>, dev: &[&ClsSample], fold: usize) -> Result<ClsFoldResult> {
    if dev.is_empty() {
        return Err(Error::InvalidConfig(format!("fold {fold} has an empty dev set")));
    }
    let fold_seed = seed::derive_indexed(job.seed, "cls_fold", fold as u64);
    let train = if job.balance {
        balance_downsample(&train, |s| s.label, seed::derive(fold_seed, "balance"))?
    } else {
        train
    };
    let mut net: Network<f32> = Network::build(job.arch.clone(), seed::derive(fold_seed, "classifier"))?;
    let mut opt = Adam::new(AdamConfig {
        lr: job.optim.cls_lr,
        ..job.optim.adam
    });
    let mut plateau = PlateauState::new(job.optim.plateau, job.optim.cls_lr)?;

    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut steps_per_epoch = Vec::new();
    let mut best: Option<(usize, DevEval, Network<f32>)> = None;
    for epoch in 1..=job.epochs {
        let t0 = Instant::now();
        let epoch_seed = seed::derive_indexed(fold_seed, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(epoch_seed));
        let lr = plateau.lr;
        opt.set_lr(lr);
        let mut loss_sum = 0.0;
        for &i in &order {
            loss_sum += train_step(&mut net, &mut opt, train[i])?;
        }
        let ev = evaluate(&net, dev)?;
        plateau.update(ev.loss);
        let m = ev.metrics;
        history.push(ClsEpochRow {
            epoch,
            lr,
            train_loss: loss_sum / order.len().max(1) as f64,
            dev_accuracy: m.accuracy,
            dev_precision: m.precision,
            dev_sensitivity: m.sensitivity,
            dev_specificity: m.specificity,
            dev_f1: m.f1,
        });
        steps_per_epoch.push(order.len());
        log::info!(
            "cls fold {fold} epoch {epoch}: dev loss {:.5} acc {:.4}",
            ev.loss,
            m.accuracy
        );
        if best.as_ref().is_none_or(|b| m.accuracy > b.1.metrics.accuracy) {
            best = Some((epoch, ev, net.clone()));
        }
        epoch_seconds.push(t0.elapsed().as_secs_f64());
    }
    let (best_epoch, ev, net) = match best {
        Some(b) => b,
        None => (0, evaluate(&net, dev)?, net),
    };
    Ok(ClsFoldResult {
        fold,
        best_epoch,
        best_dev: ev.metrics,
        history,
        epoch_seconds,
        steps_per_epoch,
        net,
        dev_probs: ev.probs,
    })
}
