use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{augment_sample, fold_dir, mask_tensor, tensor_volume, volume_tensor, write_rows, write_timing};
use super::{FoldSplit, ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{mean_std, seg_metrics, SegMetrics};
use crate::loss::{d_loss, g_total, hybrid_focal, HybridFocalParams};
use crate::nets::{ArchSpec, Network, Output};
use crate::optim::{Adam, OptimConfig, PlateauState};
use crate::post::binarize;
use crate::prep::reshape_z;
use crate::seed;
use crate::tensor::{Gradients, Scalar, Tape, Tensor};
use crate::volio::{Group, MaskVolume, Volume, VolumeKind};

/// A preprocessed (windowed, resampled, cropped) scan with its reference mask.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub group: Group,
    pub image: Volume,
    pub mask: MaskVolume,
}

#[derive(Debug, Clone)]
pub struct SegJob {
    pub generator: ArchSpec,
    /// Used only when the generator is the DeepVox generator.
    pub discriminator: ArchSpec,
    pub loss: HybridFocalParams,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub threshold: f64,
    pub seed: u64,
}

impl SegJob {
    fn is_gan(&self) -> bool {
        matches!(self.generator, ArchSpec::DeepvoxGenerator { .. })
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.is_gan() {
            self.discriminator.validate()?;
            if !matches!(self.discriminator, ArchSpec::DeepvoxDiscriminator { .. }) {
                return Err(Error::InvalidConfig(
                    "discriminator must be a deepvox_discriminator".into(),
                ));
            }
        }
        if matches!(
            self.generator,
            ArchSpec::DeepvoxDiscriminator { .. } | ArchSpec::Savect { .. }
        ) {
            return Err(Error::InvalidConfig(format!(
                "{} is not a segmentation network",
                self.generator.name()
            )));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegEpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_dsc: f64,
    pub dev_precision: f64,
    pub dev_sensitivity: f64,
}

pub(crate) const SEG_HEADER: [&str; 6] = [
    "epoch",
    "lr",
    "train_loss",
    "dev_dsc",
    "dev_precision",
    "dev_sensitivity",
];

#[derive(Debug, Clone)]
pub struct SegFoldResult {
    pub fold: usize,
    /// 0 when no epoch ran and the initialization was kept.
    pub best_epoch: usize,
    pub best_dev: SegMetrics,
    /// Per-case DSC of the best checkpoint on the dev fold.
    pub best_dev_dsc: Vec<f64>,
    pub history: Vec<SegEpochRow>,
    pub epoch_seconds: Vec<f64>,
    pub steps_per_epoch: Vec<usize>,
    pub generator: Network<f32>,
    pub dev_predictions: Vec<(String, MaskVolume)>,
}

fn apply<T: Scalar>(net: &mut Network<T>, opt: &mut Adam<T>, out: &Output, grads: &Gradients<T>) -> Result<()> {
    let g = net.param_grads(out, grads);
    let mut params: Vec<&mut Tensor<T>> = net.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
    opt.step(&mut params, &g)
}

/// One discriminator update on (real, detached fake), then one generator
/// update on the adversarial plus weighted hybrid loss. The generator runs
/// once; its output feeds both updates. Returns `(d_loss, g_total)` as
/// evaluated before the respective update.
pub fn gan_train_step<T: Scalar>(
    g: &mut Network<T>,
    d: &mut Network<T>,
    opt_g: &mut Adam<T>,
    opt_d: &mut Adam<T>,
    scan: &Tensor<T>,
    gt: &Tensor<T>,
    params: &HybridFocalParams,
) -> Result<(f64, f64)> {
    let mut g_tape = Tape::new();
    let gx = g_tape.constant(scan.clone());
    let go = g.forward(&mut g_tape, gx, true, None)?;

    let mut tape = Tape::new();
    let x = tape.constant(scan.clone());
    let y = tape.constant(gt.clone());
    let fake = tape.constant(g_tape.value(go.out).clone());
    let real_in = tape.concat_channels(x, y)?;
    let fake_in = tape.concat_channels(x, fake)?;
    let dr = d.forward(&mut tape, real_in, true, None)?;
    let df = d.forward_shared(&mut tape, fake_in, &dr)?;
    let dl = d_loss(&mut tape, dr.out, df.out)?;
    let d_val = tape.value(dl).item().f64();
    let grads = tape.backward(dl)?;
    apply(d, opt_d, &dr, &grads)?;
    drop(tape);

    let fake_in = g_tape.concat_channels(gx, go.out)?;
    let df = d.forward(&mut g_tape, fake_in, false, None)?;
    let gl = g_total(&mut g_tape, df.out, go.out, gt, params)?;
    let g_val = g_tape.value(gl).item().f64();
    let grads = g_tape.backward(gl)?;
    apply(g, opt_g, &go, &grads)?;
    Ok((d_val, g_val))
}

/// Supervised update on the hybrid loss alone (non-adversarial baselines).
pub(crate) fn seg_train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    scan: &Tensor<T>,
    gt: &Tensor<T>,
    params: &HybridFocalParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(scan.clone());
    let o = net.forward(&mut tape, x, true, None)?;
    let l = hybrid_focal(&mut tape, o.out, gt, params)?;
    let v = tape.value(l).item().f64();
    let grads = tape.backward(l)?;
    apply(net, opt, &o, &grads)?;
    Ok(v)
}

/// Foreground probabilities of `image` on its own grid. Fixed-depth networks
/// see the volume reshaped to their depth and the output is reshaped back.
pub fn segment(net: &Network<f32>, image: &Volume) -> Result<Volume> {
    let fixed = match net.spec() {
        ArchSpec::Unet3dFixed { fixed_z, .. } => Some(*fixed_z),
        _ => None,
    };
    let nz = image.dims()[2];
    let input = match fixed {
        Some(z) if z != nz => reshape_z(image, z)?,
        _ => image.clone(),
    };
    let mut tape = Tape::new();
    let x = tape.constant(volume_tensor(&input));
    let o = net.forward(&mut tape, x, false, None)?;
    let p = tensor_volume(tape.value(o.out), &input)?;
    if p.dims()[2] != nz {
        let back = reshape_z(&p, nz)?;
        Volume::new(image.geometry().clone(), VolumeKind::Windowed, back.into_data())
    } else {
        Ok(p)
    }
}

struct DevEval {
    mean: SegMetrics,
    dsc: Vec<f64>,
    preds: Vec<(String, MaskVolume)>,
}

fn evaluate_dev(net: &Network<f32>, dev: &[&SegSample], threshold: f64) -> Result<DevEval> {
    let mut per_case = Vec::with_capacity(dev.len());
    let mut preds = Vec::with_capacity(dev.len());
    for s in dev {
        let pred = binarize(&segment(net, &s.image)?, threshold)?;
        per_case.push(seg_metrics(&pred, &s.mask)?);
        preds.push((s.id.clone(), pred));
    }
    let col = |f: fn(&SegMetrics) -> f64| mean_std(&per_case.iter().map(f).collect::<Vec<_>>()).0;
    Ok(DevEval {
        mean: SegMetrics {
            dsc: col(|m| m.dsc),
            precision: col(|m| m.precision),
            sensitivity: col(|m| m.sensitivity),
        },
        dsc: per_case.iter().map(|m| m.dsc).collect(),
        preds,
    })
}

pub(crate) fn lookup<'a, S>(by_id: &HashMap<&str, &'a S>, ids: Vec<&str>) -> Result<Vec<&'a S>> {
    ids.into_iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("split references unknown case {id:?}")))
        })
        .collect()
}

/// Trains one segmenter per requested fold. With `out_dir`, writes
/// `fold<k>/metrics.csv`, `fold<k>/timing.csv` and the best-dev
/// `fold<k>/generator.ckpt`.
pub fn train_segmentation(
    job: &SegJob,
    samples: &[SegSample],
    split: &FoldSplit,
    folds: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<SegFoldResult>> {
    job.validate()?;
    let by_id: HashMap<&str, &SegSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
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
            let res = train_fold(job, &train, &dev, f)?;
            if let Some(out) = out_dir {
                let dir = fold_dir(out, f)?;
                write_rows(&dir.join("metrics.csv"), &SEG_HEADER, &res.history)?;
                write_timing(&dir.join("timing.csv"), &res.epoch_seconds)?;
                res.generator.save(&dir.join("generator.ckpt"))?;
            }
            Ok(res)
        })
        .collect()
}

fn train_fold(job: &SegJob, train: &[&SegSample], dev: &[&SegSample], fold: usize) -> Result<SegFoldResult> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "fold {fold} has an empty train or dev set"
        )));
    }
    let fold_seed = seed::derive_indexed(job.seed, "seg_fold", fold as u64);
    let mut g: Network<f32> = Network::build(job.generator.clone(), seed::derive(fold_seed, "generator"))?;
    let mut d: Option<Network<f32>> = if job.is_gan() {
        Some(Network::build(
            job.discriminator.clone(),
            seed::derive(fold_seed, "discriminator"),
        )?)
    } else {
        None
    };
    let mut opt_g = Adam::new(job.optim.adam);
    let mut opt_d = Adam::new(job.optim.adam);
    let cosine = job.optim.cosine.with_first_cycle(train.len());
    let mut plateau = PlateauState::new(job.optim.plateau, job.optim.adam.lr)?;

    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut steps_per_epoch = Vec::new();
    let mut best: Option<(usize, DevEval, Network<f32>)> = None;
    let mut global_step = 0u64;
    for epoch in 1..=job.train.epochs {
        let t0 = Instant::now();
        let epoch_seed = seed::derive_indexed(fold_seed, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(epoch_seed, "shuffle")));
        let lr_at = |step: u64, plateau: &PlateauState| match job.train.schedule {
            ScheduleKind::Cosine => cosine.lr(step),
            ScheduleKind::Plateau => plateau.lr,
        };
        let epoch_lr = lr_at(global_step, &plateau);
        let mut loss_sum = 0.0;
        for &i in &order {
            let s = train[i];
            let lr = lr_at(global_step, &plateau);
            opt_g.set_lr(lr);
            opt_d.set_lr(lr);
            let (img, msk) = augment_sample(&s.image, &s.mask, &job.train.augment, seed::derive(epoch_seed, &s.id))?;
            let (xt, yt) = (volume_tensor(&img), mask_tensor(&msk));
            loss_sum += match d.as_mut() {
                Some(d) => gan_train_step(&mut g, d, &mut opt_g, &mut opt_d, &xt, &yt, &job.loss)?.1,
                None => seg_train_step(&mut g, &mut opt_g, &xt, &yt, &job.loss)?,
            };
            global_step += 1;
        }
        let ev = evaluate_dev(&g, dev, job.threshold)?;
        if job.train.schedule == ScheduleKind::Plateau {
            plateau.update(1.0 - ev.mean.dsc);
        }
        history.push(SegEpochRow {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / order.len() as f64,
            dev_dsc: ev.mean.dsc,
            dev_precision: ev.mean.precision,
            dev_sensitivity: ev.mean.sensitivity,
        });
        steps_per_epoch.push(order.len());
        log::info!(
            "seg fold {fold} epoch {epoch}: loss {:.5} dev dsc {:.4}",
            loss_sum / order.len() as f64,
            ev.mean.dsc
        );
        if best.as_ref().is_none_or(|b| ev.mean.dsc > b.1.mean.dsc) {
            best = Some((epoch, ev, g.clone()));
        }
        epoch_seconds.push(t0.elapsed().as_secs_f64());
    }
    let (best_epoch, ev, generator) = match best {
        Some(b) => b,
        None => (0, evaluate_dev(&g, dev, job.threshold)?, g),
    };
    Ok(SegFoldResult {
        fold,
        best_epoch,
        best_dev: ev.mean,
        best_dev_dsc: ev.dsc,
        history,
        epoch_seconds,
        steps_per_epoch,
        generator,
        dev_predictions: ev.preds,
    })
}
