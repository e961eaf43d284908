//! Trained-model criteria on phantom cohorts: variable depth, segmentation,
//! classification, Grad-CAM and run-to-run determinism.
//!
//! The default run uses reduced cohorts and networks; the full-size runs
//! execute only with `VOXPIPE_FULL_ACCEPTANCE=1`.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use voxpipe::config::RunConfig;
use voxpipe::eval::{gradcam3d, mean_std};
use voxpipe::nets::{ArchSpec, Network};
use voxpipe::phantom::{make_cohort, AneurysmSite, CaseRecord};
use voxpipe::pipeline::{cls_experiment, cls_samples, load_segmenter, prepare_cases, seg_experiment, seg_job};
use voxpipe::prep::{preprocess_mask, z_trim};
use voxpipe::seed::derive;
use voxpipe::train::{classify, segment, stratified_kfold, train_classifier, train_segmentation, ClsJob, SegSample};
use voxpipe::volio::{Geometry, Group, MaskVolume, Orientation, Volume, VolumeKind};

use crate::Outcome;

/// Reduced segmentation run: 24 phantoms at 4 mm, fold 0 of 4.
const REDUCED_SEG: &str = r#"{
  "phantom": {"n_total": 24, "xy": 96, "nz_range": [40, 60], "fat_mm": 5.0},
  "prep": {"target_spacing": [4, 4, 4], "crop_xy": 48},
  "model": {
    "segmenter": {"arch": "deepvox_generator", "widths": [4, 8, 16, 32], "residual_blocks": 2},
    "discriminator": {"arch": "deepvox_discriminator", "widths": [4, 8, 16, 16, 16], "convs": [1, 1, 2, 2, 2]},
    "classifier": {"arch": "savect", "widths": [4, 8, 16], "convs": [1, 1, 2]}
  },
  "optim": {"adam": {"lr": 0.004}, "cosine": {"eta0": 0.004}},
  "train": {"folds": 4, "epochs": 30, "schedule": "cosine", "augment": {"enabled": false}},
  "seed": 11,
  "deterministic": true
}"#;

/// Reduced classification run: 60 phantoms, ground-truth masks.
const REDUCED_CLS: &str = r#"{
  "phantom": {"n_total": 60, "xy": 96, "nz_range": [40, 60], "fat_mm": 5.0},
  "prep": {"target_spacing": [4, 4, 4], "crop_xy": 48},
  "model": {"classifier": {"arch": "savect", "widths": [4, 8, 16], "convs": [1, 1, 2]}},
  "train": {"cls_folds": 10, "cls_epochs": 25, "balance": true, "cls_mask_source": "ground_truth"},
  "seed": 12,
  "deterministic": true
}"#;

/// Full-size runs: 120 phantoms, 96×96 grids at 2×2×3 mm, default networks.
const FULL: &str = r#"{
  "phantom": {"n_total": 120},
  "prep": {"crop_xy": 96},
  "train": {"folds": 4, "epochs": 30, "schedule": "cosine", "cls_folds": 10, "cls_epochs": 25, "balance": true},
  "seed": 1,
  "deterministic": true
}"#;

const DSC_FLOOR: f64 = 0.85;
const DEV_TEST_GAP: f64 = 0.05;
const EPOCH_TIME_RATIO: f64 = 1.5;
const ACC_FLOOR: f64 = 0.90;
const SPEC_FLOOR: f64 = 0.85;
const CLS_MAX_SECS: f64 = 15.0 * 60.0;

fn cfg(json: &str) -> RunConfig {
    RunConfig::from_json(json).expect("acceptance config")
}

fn cohort(cfg: &RunConfig) -> Vec<CaseRecord> {
    make_cohort(&cfg.phantom, cfg.phantom.n_total, derive(cfg.seed, "cohort"))
        .unwrap()
        .0
}

fn mins(secs: f64) -> String {
    format!("{:.1} min", secs / 60.0)
}

pub fn c6_variable_z() -> Outcome {
    let mut c = cfg(REDUCED_SEG);
    c.phantom.n_total = 6;
    c.phantom.nz_range = [30, 40];
    c.prep.crop_xy = 32;
    c.train.epochs = 2;
    c.train.folds = 3;
    let samples = prepare_cases(&cohort(&c), &c).unwrap();
    let strata: Vec<(String, String)> = samples.iter().map(|s| (s.id.clone(), s.group.to_string())).collect();
    let split = stratified_kfold(&strata, 3, 5).unwrap();
    let trained = train_segmentation(&seg_job(&c), &samples, &split, &[0], None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deepvox.ckpt");
    trained[0].generator.save(&path).unwrap();
    let net = load_segmenter(&path).unwrap();

    let mut parts = Vec::new();
    let mut pass = true;
    for z in [5usize, 17, 40, 96] {
        let g = Geometry::new([32, 32, z], [4.0; 3], Orientation::Hfs).unwrap();
        let data = (0..g.len()).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
        let v = Volume::new(g, VolumeKind::Windowed, data).unwrap();
        match segment(&net, &v) {
            Ok(p) => {
                let ok = p.dims() == [32, 32, z] && p.data().iter().all(|x| (0.0..=1.0).contains(x));
                pass &= ok;
                parts.push(format!("Z={z} -> {:?}", p.dims()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("Z={z} failed: {e}"));
            }
        }
    }
    Outcome::new(pass, parts.join(", "))
}

struct SegRun {
    dev: (f64, f64),
    test: (f64, f64),
    folds: usize,
    held_out: usize,
    secs: f64,
    samples: Vec<SegSample>,
    dev_masks: Vec<(String, MaskVolume)>,
}

fn run_seg(c: &RunConfig, folds: Option<&[usize]>, out: Option<&Path>) -> SegRun {
    let t = Instant::now();
    let samples = prepare_cases(&cohort(c), c).unwrap();
    let exp = seg_experiment(c, &samples, folds, out).unwrap();
    SegRun {
        dev: exp.dev_dsc(false),
        test: exp.test_dsc(),
        folds: exp.folds.len(),
        held_out: exp.test_ids.len(),
        secs: t.elapsed().as_secs_f64(),
        dev_masks: exp
            .dev_predictions()
            .into_iter()
            .map(|(id, m)| (id.to_string(), m.clone()))
            .collect(),
        samples,
    }
}

/// Mean per-epoch seconds of DeepAAA over DeepVox on the same fold.
fn epoch_time_ratio(c: &RunConfig, samples: &[SegSample], fold: usize) -> (f64, f64, f64) {
    let strata: Vec<(String, String)> = samples.iter().map(|s| (s.id.clone(), s.group.to_string())).collect();
    let split = stratified_kfold(&strata, c.train.folds, derive(c.seed, "seg_kfold")).unwrap();
    let time = |arch: ArchSpec| {
        let mut c = c.clone();
        c.model.segmenter = arch;
        let r = train_segmentation(&seg_job(&c), samples, &split, &[fold], None).unwrap();
        mean_std(&r[0].epoch_seconds).0
    };
    let vox = time(c.model.segmenter.clone());
    let aaa = time(ArchSpec::deepaaa());
    (aaa / vox, vox, aaa)
}

static FULL_SEG: OnceLock<SegRun> = OnceLock::new();

fn full_seg() -> &'static SegRun {
    FULL_SEG.get_or_init(|| run_seg(&cfg(FULL), None, None))
}

fn seg_verdict(r: &SegRun) -> (bool, String) {
    let gap = r.dev.0 - r.test.0;
    let ok = r.dev.0 >= DSC_FLOOR && gap.abs() <= DEV_TEST_GAP;
    (
        ok,
        format!(
            "dev DSC {:.4} ± {:.4}, test DSC {:.4} ({} held out), dev - test {gap:+.4}, {} fold(s), {}",
            r.dev.0,
            r.dev.1,
            r.test.0,
            r.held_out,
            r.folds,
            mins(r.secs)
        ),
    )
}

pub fn c7_segmentation(full: bool) -> Outcome {
    if full {
        let c = cfg(FULL);
        let r = full_seg();
        let (ok, msg) = seg_verdict(r);
        let (ratio, vox, aaa) = epoch_time_ratio(&c, &r.samples, 0);
        let pass = ok && ratio >= EPOCH_TIME_RATIO;
        return Outcome::new(
            pass,
            format!("full: {msg}; epoch time DeepAAA {aaa:.1}s / DeepVox {vox:.1}s = {ratio:.2}"),
        );
    }
    let c = cfg(REDUCED_SEG);
    let r = run_seg(&c, Some(&[0]), None);
    let (ok, msg) = seg_verdict(&r);

    // default-width networks on 96×96 grids, two training cases, one epoch
    let mut t = cfg(FULL);
    t.phantom.nz_range = [32, 32];
    t.train.folds = 3;
    t.train.epochs = 1;
    t.train.augment.enabled = false;
    let mut cases = make_cohort(&t.phantom, 5, derive(t.seed, "timing")).unwrap().0;
    cases.truncate(3);
    let timing_samples = prepare_cases(&cases, &t).unwrap();
    let (ratio, vox, aaa) = epoch_time_ratio(&t, &timing_samples, 0);
    let pass = ok && ratio >= EPOCH_TIME_RATIO;
    Outcome::new(
        pass,
        format!(
            "reduced (24 phantoms, 4 mm, fold 0): {msg}; default-width epoch time DeepAAA {aaa:.1}s / DeepVox {vox:.1}s = {ratio:.2}; full run not executed"
        ),
    )
    .reduced()
}

struct ClsRun {
    acc: (f64, f64),
    spec: (f64, f64),
    pooled_acc: f64,
    pooled_spec: f64,
    n: usize,
    secs: f64,
}

fn run_cls(c: &RunConfig, masks: &[(String, Group, MaskVolume)], out: Option<&Path>) -> ClsRun {
    let t = Instant::now();
    let samples = cls_samples(masks.iter().map(|(id, g, m)| (id.as_str(), *g, m))).unwrap();
    let exp = cls_experiment(c, &samples, None, out).unwrap();
    let pooled = exp.pooled();
    ClsRun {
        acc: exp.fold_stat(|r| r.accuracy),
        spec: exp.fold_stat(|r| r.specificity),
        pooled_acc: pooled.accuracy,
        pooled_spec: pooled.specificity,
        n: samples.len(),
        secs: t.elapsed().as_secs_f64(),
    }
}

fn ground_truth_masks(c: &RunConfig) -> Vec<(String, Group, MaskVolume)> {
    cohort(c)
        .iter()
        .map(|k| (k.id.clone(), k.group, preprocess_mask(&k.mask, &c.prep).unwrap()))
        .collect()
}

fn cls_verdict(r: &ClsRun) -> (bool, String) {
    let ok = r.acc.0 >= ACC_FLOOR && r.spec.0 >= SPEC_FLOOR && r.secs <= CLS_MAX_SECS;
    (
        ok,
        format!(
            "dev accuracy {:.4} ± {:.4}, specificity {:.4} ± {:.4} over folds (pooled {:.4} / {:.4}, {} cases), {}",
            r.acc.0,
            r.acc.1,
            r.spec.0,
            r.spec.1,
            r.pooled_acc,
            r.pooled_spec,
            r.n,
            mins(r.secs)
        ),
    )
}

fn full_dev_masks() -> Vec<(String, Group, MaskVolume)> {
    let r = full_seg();
    r.dev_masks
        .iter()
        .map(|(id, m)| {
            let g = r.samples.iter().find(|s| &s.id == id).unwrap().group;
            (id.clone(), g, m.clone())
        })
        .collect()
}

pub fn c8_classification(full: bool) -> Outcome {
    if full {
        let r = run_cls(&cfg(FULL), &full_dev_masks(), None);
        let (ok, msg) = cls_verdict(&r);
        return Outcome::new(ok, format!("full, predicted dev masks: {msg}"));
    }
    let c = cfg(REDUCED_CLS);
    let r = run_cls(&c, &ground_truth_masks(&c), None);
    let (ok, msg) = cls_verdict(&r);
    Outcome::new(
        ok,
        format!("reduced (60 phantoms, 4 mm, ground-truth masks, 10 folds): {msg}; full run not executed"),
    )
    .reduced()
}

/// Mean CAM over aneurysmal slices and over the other aortic slices of one
/// arch-aneurysm case, in the classifier's input frame.
fn cam_contrast(net: &Network<f32>, case: &CaseRecord, c: &RunConfig) -> (f64, f64) {
    let a = case.aneurysm.expect("aneurysm case");
    let mask = preprocess_mask(&case.mask, &c.prep).unwrap();
    let trimmed = z_trim(&mask, None).unwrap();
    let cam = gradcam3d(net, &trimmed.mask, None).unwrap();
    let [nx, ny, nz] = cam.dims();
    let (src_sp, dst_sp) = (case.mask.spacing()[2], c.prep.target_spacing[2]);
    let src_nz = case.mask.dims()[2];
    let half = a.length_mm / 2.0;
    let clear = half + a.ratio * a.baseline_radius_mm;
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for k in 0..nz {
        let j = k + trimmed.z_start;
        let src = (((j as f64 + 0.5) * dst_sp / src_sp).floor() as usize).min(src_nz - 1);
        let dz = (src as f64 * src_sp - a.center_mm[2]).abs();
        let plane = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y)));
        let mean = plane.map(|(x, y)| cam.get(x, y, k) as f64).sum::<f64>() / (nx * ny) as f64;
        if dz <= half {
            inside.push(mean);
        } else if dz > clear {
            outside.push(mean);
        }
    }
    (mean_std(&inside).0, mean_std(&outside).0)
}

pub fn c9_gradcam() -> Outcome {
    let mut c = cfg(REDUCED_CLS);
    c.phantom.n_total = 40;
    c.phantom.aneurysm_site = AneurysmSite::Arch;
    let cases = cohort(&c);
    let masks: Vec<(String, Group, MaskVolume)> = cases
        .iter()
        .map(|k| (k.id.clone(), k.group, preprocess_mask(&k.mask, &c.prep).unwrap()))
        .collect();
    let samples = cls_samples(masks.iter().map(|(id, g, m)| (id.as_str(), *g, m))).unwrap();
    let strata: Vec<(String, String)> = samples.iter().map(|s| (s.id.clone(), s.group.to_string())).collect();
    let split = stratified_kfold(&strata, 5, derive(c.seed, "cam_kfold")).unwrap();
    let job = ClsJob {
        arch: c.model.classifier.clone(),
        optim: c.optim,
        epochs: c.train.cls_epochs,
        balance: true,
        seed: derive(c.seed, "cam_train"),
    };
    let net = train_classifier(&job, &samples, &split, &[0], None)
        .unwrap()
        .remove(0)
        .net;

    let dev = split.dev_ids(0);
    let mut pairs = Vec::new();
    for case in cases
        .iter()
        .filter(|k| k.aneurysm.is_some() && dev.contains(&k.id.as_str()))
    {
        pairs.push((case.id.clone(), cam_contrast(&net, case, &c)));
    }
    let wins = pairs.iter().filter(|(_, (i, o))| i > o).count();
    let directional = !pairs.is_empty() && wins * 2 > pairs.len();

    let mut zeroed = net.clone();
    for p in zeroed.params_mut() {
        if p.name.starts_with("fc") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let probe = &samples.iter().find(|s| s.label == 1).unwrap().mask;
    let zero_map = gradcam3d(&zeroed, probe, None).unwrap();
    let all_zero = zero_map.data().iter().all(|&v| v == 0.0);
    let p_probe = classify(&zeroed, probe).unwrap();

    let detail: Vec<String> = pairs
        .iter()
        .map(|(id, (i, o))| format!("{id}: {i:.3} vs {o:.3}"))
        .collect();
    Outcome::new(
        directional && all_zero,
        format!(
            "aneurysmal > other aortic slices in {wins}/{} dev arch cases [{}]; zeroed head (p = {p_probe:.2}) gives all-zero map: {all_zero}",
            pairs.len(),
            detail.join("; ")
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "timing.csv") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn seg_and_cls(seg: &RunConfig, cls: &RunConfig, seg_folds: Option<&[usize]>, gt_cls: bool, out: &Path) {
    let s = out.join("seg");
    let k = out.join("cls");
    std::fs::create_dir_all(&s).unwrap();
    std::fs::create_dir_all(&k).unwrap();
    let r = run_seg(seg, seg_folds, Some(&s));
    let masks = if gt_cls {
        ground_truth_masks(cls)
    } else {
        r.dev_masks
            .iter()
            .map(|(id, m)| {
                (
                    id.clone(),
                    r.samples.iter().find(|x| &x.id == id).unwrap().group,
                    m.clone(),
                )
            })
            .collect()
    };
    run_cls(cls, &masks, Some(&k));
}

pub fn c10_determinism(full: bool) -> Outcome {
    let (seg, cls, folds, gt, label) = if full {
        let c = cfg(FULL);
        (c.clone(), c, None, false, "full")
    } else {
        let mut seg = cfg(REDUCED_SEG);
        seg.phantom.n_total = 10;
        seg.train.epochs = 3;
        let mut cls = cfg(REDUCED_CLS);
        cls.phantom.n_total = 24;
        cls.train.cls_folds = 3;
        cls.train.cls_epochs = 3;
        (seg, cls, Some(vec![0]), true, "reduced")
    };
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            seg_and_cls(&seg, &cls, folds.as_deref(), gt, dir.path());
            csv_files(dir.path())
        })
        .collect();
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let pass = runs[0].len() == runs[1].len() && differing.is_empty() && !names.is_empty();
    let o = Outcome::new(
        pass,
        format!(
            "{label}: {} metrics CSVs compared ({}), {} differ{}",
            names.len(),
            names.join(", "),
            differing.len(),
            if full { "" } else { "; full run not executed" }
        ),
    );
    if full {
        o
    } else {
        o.reduced()
    }
}
