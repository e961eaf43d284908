//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 2 for bad flags or configuration, 1 for runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    cls_metrics, friedman_test, gradcam3d, mean_std, montage, nemenyi_cd, nemenyi_pairs, seg_metrics, MontageLayout,
};
use crate::phantom::{generate_cohort_to_dir, read_manifest};
use crate::pipeline::{
    cls_experiment, cls_samples, load_classifier, load_prepared, load_segmenter, predict_scan, preprocess_dir,
    read_scan, scan_id, seg_experiment, stage_dir, PredictionRow,
};
use crate::train::MaskSource;
use crate::volio::{read_nrrd, write_nrrd, Encoding};

#[derive(Debug, Parser)]
#[command(
    name = "voxpipe",
    version,
    about = "Aorta segmentation and aneurysm classification on CT volumes"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.epochs=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=S`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a phantom cohort into <out_dir>/data.
    GenData,
    /// Window, resample and crop <out_dir>/data into <out_dir>/prep.
    Preprocess,
    /// Held-out test split plus stratified cross-validation of the segmenter.
    TrainSeg {
        /// Train only these folds (comma separated).
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Stratified cross-validation of the classifier on Z-trimmed masks.
    TrainCls {
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Segment (and optionally classify) scans.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Append probabilities to predictions.csv (needs --classifier).
        #[arg(long)]
        classify: bool,
        /// Output directory (default <out_dir>/predict).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        scans: Vec<PathBuf>,
    },
    /// Segmentation metrics of predicted vs reference masks, or
    /// classification metrics of a predictions CSV.
    Eval {
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        predictions: Option<PathBuf>,
        /// CSV with `id` and `label` columns (a cohort manifest works).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM volume of a classifier on a mask.
    Gradcam {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a montage of the CAM over the mask.
        #[arg(long)]
        montage: Option<PathBuf>,
    },
    /// Friedman test and Nemenyi post-hoc on a cases × methods score table.
    Stats {
        #[arg(long)]
        scores: PathBuf,
        /// Lower scores are better (default: higher).
        #[arg(long)]
        lower_better: bool,
    },
    /// Axial-slice montage image (PGM, or PPM with overlays).
    Montage {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        cam: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        slices: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = match RunConfig::load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    init_threads(&cfg);
    match dispatch(&cfg, cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

fn init_threads(cfg: &RunConfig) {
    let env = std::env::var("VOXPIPE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let n = match env {
        Some(n) if n > 0 => n,
        _ if cfg.deterministic => 1,
        _ => return,
    };
    // the global pool can only be set once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn dispatch(cfg: &RunConfig, cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData => gen_data(cfg),
        Command::Preprocess => preprocess(cfg),
        Command::TrainSeg { folds } => train_seg(cfg, folds),
        Command::TrainCls { folds } => train_cls(cfg, folds),
        Command::Predict {
            checkpoint,
            classifier,
            classify,
            out,
            scans,
        } => predict(cfg, &checkpoint, classifier.as_deref(), classify, out, &scans),
        Command::Eval {
            pred,
            gt,
            predictions,
            labels,
            out,
        } => eval(cfg, pred, gt, predictions, labels, out),
        Command::Gradcam {
            classifier,
            mask,
            out,
            montage,
        } => gradcam(cfg, &classifier, &mask, &out, montage.as_deref()),
        Command::Stats { scores, lower_better } => stats(cfg, &scores, lower_better),
        Command::Montage {
            volume,
            mask,
            cam,
            slices,
            out,
        } => montage_cmd(cfg, &volume, mask.as_deref(), cam.as_deref(), slices, &out),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = stage_dir(cfg, "data");
    let rows = generate_cohort_to_dir(
        &cfg.phantom,
        cfg.phantom.n_total,
        crate::seed::derive(cfg.seed, "cohort"),
        &dir,
        Encoding::Gzip,
    )?;
    println!("wrote {} cases to {}", rows.len(), dir.display());
    Ok(())
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let data = stage_dir(cfg, "data");
    let prep = stage_dir(cfg, "prep");
    let manifest = read_manifest(&data.join("manifest.csv"))?;
    preprocess_dir(&data, &prep, &manifest, cfg)?;
    println!("preprocessed {} cases into {}", manifest.len(), prep.display());
    Ok(())
}

fn train_seg(cfg: &RunConfig, folds: Option<Vec<usize>>) -> Result<()> {
    let prep = stage_dir(cfg, "prep");
    let out = stage_dir(cfg, "seg");
    mkdir(&out)?;
    let manifest = read_manifest(&prep.join("manifest.csv"))?;
    let samples = load_prepared(&prep, &manifest)?;
    let exp = seg_experiment(cfg, &samples, folds.as_deref(), Some(&out))?;
    let (dm, ds) = exp.dev_dsc(cfg.eval.per_fold);
    let (tm, ts) = exp.test_dsc();
    println!("dev dsc {dm:.4} ± {ds:.4}");
    println!("test dsc {tm:.4} ± {ts:.4} ({} held out)", exp.test_ids.len());
    Ok(())
}

fn train_cls(cfg: &RunConfig, folds: Option<Vec<usize>>) -> Result<()> {
    let prep = stage_dir(cfg, "prep");
    let out = stage_dir(cfg, "cls");
    mkdir(&out)?;
    let manifest = read_manifest(&prep.join("manifest.csv"))?;
    let mut masks = Vec::new();
    for row in &manifest {
        let path = match cfg.train.cls_mask_source {
            MaskSource::Predicted => stage_dir(cfg, "seg")
                .join("dev_predictions")
                .join(format!("{}.mask.nrrd", row.id)),
            MaskSource::GroundTruth => prep.join(format!("{}.mask.nrrd", row.id)),
        };
        // held-out test cases have no dev prediction
        if cfg.train.cls_mask_source == MaskSource::Predicted && !path.exists() {
            continue;
        }
        masks.push((row.id.as_str(), row.group, read_nrrd(&path)?.into_mask()?));
    }
    if masks.is_empty() {
        return Err(Error::InvalidConfig(
            "no classifier inputs found; run train-seg first".into(),
        ));
    }
    let samples = cls_samples(masks.iter().map(|(id, g, m)| (*id, *g, m)))?;
    let exp = cls_experiment(cfg, &samples, folds.as_deref(), Some(&out))?;
    let (am, asd) = exp.fold_stat(|r| r.accuracy);
    let (sm, ssd) = exp.fold_stat(|r| r.specificity);
    println!(
        "dev accuracy {am:.4} ± {asd:.4}, specificity {sm:.4} ± {ssd:.4} over {} cases",
        samples.len()
    );
    Ok(())
}

fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    classifier: Option<&Path>,
    classify: bool,
    out: Option<PathBuf>,
    scans: &[PathBuf],
) -> Result<()> {
    if classify && classifier.is_none() {
        return Err(Error::InvalidConfig("--classify needs --classifier".into()));
    }
    let out = out.unwrap_or_else(|| stage_dir(cfg, "predict"));
    mkdir(&out)?;
    let generator = load_segmenter(checkpoint)?;
    let cls = if classify {
        classifier.map(load_classifier).transpose()?
    } else {
        None
    };
    let mut rows = Vec::new();
    for scan in scans {
        let id = scan_id(scan);
        let (vol, meta) = read_scan(scan)?;
        let p = predict_scan(cfg, &generator, cls.as_ref(), &vol, &meta)?;
        write_nrrd(p.mask.clone(), out.join(format!("{id}.mask.nrrd")), Encoding::Gzip)?;
        write_nrrd(
            p.trimmed.clone(),
            out.join(format!("{id}.trimmed.mask.nrrd")),
            Encoding::Gzip,
        )?;
        if let Some(prob) = p.probability {
            rows.push(PredictionRow {
                id,
                probability: prob,
                label: (prob >= 0.5) as u8,
            });
        }
    }
    if classify {
        let path = out.join("predictions.csv");
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    println!("predicted {} scans into {}", scans.len(), out.display());
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    predictions: Option<PathBuf>,
    labels: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out.unwrap_or_else(|| stage_dir(cfg, "eval"));
    mkdir(&out)?;
    let mut did = false;
    if let (Some(pred), Some(gt)) = (pred, gt) {
        eval_seg(&pred, &gt, &out.join("seg_metrics.csv"))?;
        did = true;
    }
    if let (Some(p), Some(l)) = (predictions, labels) {
        eval_cls(&p, &l, &out.join("cls_metrics.csv"))?;
        did = true;
    }
    if !did {
        return Err(Error::InvalidConfig(
            "eval needs --pred/--gt or --predictions/--labels".into(),
        ));
    }
    Ok(())
}

fn eval_seg(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let mut ids: Vec<String> = std::fs::read_dir(pred)
        .map_err(|e| Error::io(pred, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.ends_with(".trimmed.mask.nrrd") {
                None
            } else {
                name.strip_suffix(".mask.nrrd").map(str::to_string)
            }
        })
        .collect();
    ids.sort();
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["id", "dsc", "precision", "sensitivity"])?;
    let mut all = Vec::new();
    for id in &ids {
        let g = gt.join(format!("{id}.mask.nrrd"));
        if !g.exists() {
            log::warn!("no reference mask for {id}");
            continue;
        }
        let p = read_nrrd(pred.join(format!("{id}.mask.nrrd")))?.into_mask()?;
        let m = seg_metrics(&p, &read_nrrd(&g)?.into_mask()?)?;
        w.write_record([
            id.clone(),
            m.dsc.to_string(),
            m.precision.to_string(),
            m.sensitivity.to_string(),
        ])?;
        all.push(m);
    }
    if all.is_empty() {
        return Err(Error::DegenerateInput("no matching prediction/reference pairs".into()));
    }
    let col = |f: fn(&crate::eval::SegMetrics) -> f64| mean_std(&all.iter().map(f).collect::<Vec<_>>());
    let (d, p, s) = (col(|m| m.dsc), col(|m| m.precision), col(|m| m.sensitivity));
    w.write_record(["mean".into(), d.0.to_string(), p.0.to_string(), s.0.to_string()])?;
    w.write_record(["std".into(), d.1.to_string(), p.1.to_string(), s.1.to_string()])?;
    w.flush().map_err(|e| Error::io(out, e))?;
    println!(
        "dsc {:.4} ± {:.4} precision {:.4} sensitivity {:.4} over {} cases",
        d.0,
        d.1,
        p.0,
        s.0,
        all.len()
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct LabelRow {
    id: String,
    label: u8,
}

fn eval_cls(predictions: &Path, labels: &Path, out: &Path) -> Result<()> {
    let preds: Vec<PredictionRow> = csv::Reader::from_path(predictions)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let truth: std::collections::HashMap<String, u8> = csv::Reader::from_path(labels)?
        .deserialize::<LabelRow>()
        .map(|r| r.map(|r| (r.id, r.label)))
        .collect::<std::result::Result<_, _>>()?;
    let mut p = Vec::new();
    let mut y = Vec::new();
    for r in &preds {
        match truth.get(&r.id) {
            Some(&l) => {
                p.push(r.probability);
                y.push(l);
            }
            None => log::warn!("no label for {}", r.id),
        }
    }
    if p.is_empty() {
        return Err(Error::DegenerateInput("no labelled predictions".into()));
    }
    let m = cls_metrics(&p, &y);
    let mut w = csv::Writer::from_path(out)?;
    w.serialize(m)?;
    w.flush().map_err(|e| Error::io(out, e))?;
    println!(
        "accuracy {:.4} precision {:.4} sensitivity {:.4} specificity {:.4} f1 {:.4}",
        m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1
    );
    Ok(())
}

fn gradcam(cfg: &RunConfig, classifier: &Path, mask: &Path, out: &Path, montage_out: Option<&Path>) -> Result<()> {
    let net = load_classifier(classifier)?;
    let m = read_nrrd(mask)?.into_mask()?;
    let cam = gradcam3d(&net, &m, cfg.eval.gradcam_layer.as_deref())?;
    write_nrrd(cam.clone(), out, Encoding::Gzip)?;
    if let Some(p) = montage_out {
        let base = crate::volio::Volume::new(
            m.geometry().clone(),
            crate::volio::VolumeKind::Windowed,
            m.data().iter().map(|&b| b as f32 * 0.5).collect(),
        )?;
        montage(&base, Some(&m), Some(&cam), layout(cfg), None, p)?;
    }
    Ok(())
}

fn layout(cfg: &RunConfig) -> MontageLayout {
    MontageLayout {
        rows: cfg.eval.montage_rows,
        cols: cfg.eval.montage_cols,
    }
}

/// Score table: a header of method names, one row per case. A leading
/// `id` or `case` column is skipped.
fn read_scores(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let skip = header
        .first()
        .is_some_and(|h| matches!(h.to_ascii_lowercase().as_str(), "id" | "case"));
    let names = header[skip as usize..].to_vec();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(skip as usize)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::DegenerateInput(format!("non-numeric score {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((names, rows))
}

fn stats(cfg: &RunConfig, scores: &Path, lower_better: bool) -> Result<()> {
    let (names, rows) = read_scores(scores)?;
    let f = friedman_test(&rows, !lower_better)?;
    let mut out = std::io::stdout().lock();
    let w = |out: &mut std::io::StdoutLock, s: String| writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e));
    w(&mut out, format!("chi2 {:.4}", f.chi2))?;
    w(&mut out, format!("df {}", f.df))?;
    w(&mut out, format!("p {:.6}", f.p))?;
    for (n, r) in names.iter().zip(&f.mean_ranks) {
        w(&mut out, format!("mean_rank {n} {r:.4}"))?;
    }
    match nemenyi_cd(names.len(), rows.len(), cfg.eval.alpha) {
        Ok(cd) => {
            w(&mut out, format!("cd {cd:.4}"))?;
            for (i, j) in nemenyi_pairs(&f.mean_ranks, cd) {
                w(&mut out, format!("significant {} {}", names[i], names[j]))?;
            }
        }
        Err(e) => log::warn!("no Nemenyi test: {e}"),
    }
    Ok(())
}

fn montage_cmd(
    cfg: &RunConfig,
    volume: &Path,
    mask: Option<&Path>,
    cam: Option<&Path>,
    slices: Option<Vec<usize>>,
    out: &Path,
) -> Result<()> {
    let v = read_nrrd(volume)?.into_volume()?;
    let m = mask.map(|p| read_nrrd(p)?.into_mask()).transpose()?;
    let c = cam.map(|p| read_nrrd(p)?.into_volume()).transpose()?;
    montage(&v, m.as_ref(), c.as_ref(), layout(cfg), slices.as_deref(), out)
}
