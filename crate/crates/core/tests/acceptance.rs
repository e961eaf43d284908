//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! `VOXPIPE_FULL_ACCEPTANCE=1` runs the full-size segmentation,
//! classification and determinism runs instead of their reduced versions.
//! `VOXPIPE_ACCEPTANCE_ONLY=1,3,11` restricts the run to some criteria.
//! Failures are reported but only turn into a non-zero exit status with
//! `VOXPIPE_ACCEPTANCE_STRICT=1`.

#[path = "acceptance/desk.rs"]
mod desk;
#[path = "acceptance/gradcheck.rs"]
mod gradcheck;
#[path = "acceptance/kernels.rs"]
mod kernels;

use std::time::Instant;

use voxpipe::eval::{friedman_test, nemenyi_cd};
use voxpipe::loss::{bce, dice_loss, focal_loss, focal_tversky_loss, hybrid_focal, HybridFocalParams, DEFAULT_SMOOTH};
use voxpipe::post::{remove_small, Connectivity};
use voxpipe::prep::{window, PrepConfig};
use voxpipe::tensor::{Tape, Tensor, Var};
use voxpipe::train::vote_masks;
use voxpipe::volio::{Geometry, MaskVolume, Orientation, Volume, VolumeKind};

pub struct Outcome {
    pub pass: bool,
    /// Result of the reduced stand-in; the full-size run did not execute.
    pub reduced: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            reduced: false,
            detail: detail.into(),
        }
    }

    pub fn reduced(mut self) -> Self {
        self.reduced = true;
        self
    }
}

fn c1_autodiff() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::all();
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let min_shapes = reports.iter().map(|r| r.shapes).min().unwrap_or(0);
    for r in reports.iter().filter(|r| r.worst.is_nan() || r.worst >= 1e-4) {
        eprintln!("  gradcheck {}: rel err {:.3e}", r.name, r.worst);
    }
    let pass = gradcheck::passes(&reports) && min_shapes >= gradcheck::SHAPES_PER_OP && secs < 300.0;
    Outcome::new(
        pass,
        format!(
            "{} ops, >= {min_shapes} shapes each, worst rel err {worst:.2e}, {secs:.1}s",
            reports.len()
        ),
    )
}

fn c2_kernels() -> Outcome {
    let t = Instant::now();
    let reports = kernels::all();
    let secs = t.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    for r in &reports {
        parts.push(format!("{}: {} inst, worst {:.1e}", r.name, r.instances, r.worst));
    }
    let pass = reports.iter().all(|r| r.ok()) && secs < 300.0;
    Outcome::new(pass, format!("{}; {secs:.1}s", parts.join("; ")))
}

fn loss_value(p: f64, y: f64, f: impl Fn(&mut Tape<f64>, Var, &Tensor<f64>) -> voxpipe::Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::from_f64(vec![1], &[p]).unwrap());
    let yt = Tensor::from_f64(vec![1], &[y]).unwrap();
    let l = f(&mut tape, pv, &yt).unwrap();
    tape.value(l).item()
}

#[allow(clippy::approx_constant)]
fn c3_losses() -> Outcome {
    // independent closed forms for the single-voxel case y = 1, p = 0.8
    let focal_want = 0.6 * 0.2f64.powi(2) * -(0.8f64.ln());
    let ti = (0.8 + DEFAULT_SMOOTH) / (0.8 + 0.6 * 0.2 + DEFAULT_SMOOTH);
    let ft_want = (1.0 - ti).powf(0.75);
    let hybrid_want = 0.5 * focal_want + 0.5 * ft_want;

    let focal = loss_value(0.8, 1.0, |t, p, y| focal_loss(t, p, y, 0.6, 2.0));
    let ft = loss_value(0.8, 1.0, |t, p, y| {
        focal_tversky_loss(t, p, y, 0.6, 0.75, DEFAULT_SMOOTH)
    });
    let params = HybridFocalParams {
        lambda: 0.5,
        delta: 0.6,
        gamma: 0.75,
        smooth: DEFAULT_SMOOTH,
        focal_gamma: Some(2.0),
    };
    let hybrid = loss_value(0.8, 1.0, |t, p, y| hybrid_focal(t, p, y, &params));
    let bce_half = loss_value(0.5, 1.0, bce);
    let bce_09 = loss_value(0.9, 1.0, bce);

    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::from_f64(vec![4], &[0.5; 4]).unwrap());
    let yt = Tensor::from_f64(vec![4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let d = dice_loss(&mut tape, pv, &yt, DEFAULT_SMOOTH).unwrap();
    let dice_half = tape.value(d).item();

    let checks = [
        ("focal", focal, focal_want, 5.355e-3),
        ("focal_tversky", ft, ft_want, 0.2171),
        ("hybrid", hybrid, hybrid_want, 0.11122),
        ("bce(0.5)", bce_half, std::f64::consts::LN_2, 0.69315),
        ("bce(0.9)", bce_09, -(0.9f64.ln()), 0.10536),
        ("dice(0.5)", dice_half, 0.5, 0.5),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, got, exact, printed) in checks {
        let e = (got - exact).abs();
        // printed constants carry 4-5 significant digits
        let e_printed = (got - printed).abs();
        pass &= e <= 1e-6 && e_printed <= 1e-4;
        parts.push(format!("{name} {got:.6} (|d| {e:.1e}, vs printed {e_printed:.1e})"));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c4_stats() -> Outcome {
    let scores = vec![vec![0.9, 0.8, 0.7]; 4];
    let f = friedman_test(&scores, true).unwrap();
    let cd = nemenyi_cd(3, 16, 0.05).unwrap();
    let pass = f.chi2 == 8.0 && f.df == 2 && (0.018..=0.019).contains(&f.p) && (cd - 0.8285).abs() <= 1e-3;
    Outcome::new(pass, format!("chi2 {} df {} p {:.6}; CD {cd:.4}", f.chi2, f.df, f.p))
}

fn c5_prep() -> Outcome {
    let g = Geometry::new([3, 1, 1], [1.0; 3], Orientation::Hfs).unwrap();
    let v = Volume::new(g, VolumeKind::Hu, vec![-150.0, 50.0, 250.0]).unwrap();
    let w = window(&v, &PrepConfig::default()).unwrap();
    let want = [0.0, 0.5, 1.0];
    let window_ok = w.data().iter().zip(want).all(|(a, b)| (*a as f64 - b).abs() < 1e-6);

    // 96-voxel slab and a separate 4-voxel blob, 4% of the foreground
    let g = Geometry::new([20, 20, 3], [1.0; 3], Orientation::Hfs).unwrap();
    let mut m = vec![0u8; g.len()];
    for y in 0..8 {
        for x in 0..12 {
            m[g.index(x, y, 0)] = 1;
        }
    }
    for x in 15..19 {
        m[g.index(x, 15, 2)] = 1;
    }
    let mask = MaskVolume::new(g.clone(), m).unwrap();
    let out = remove_small(&mask, 0.05, Connectivity::TwentySix).unwrap();
    let kept_big = (0..8).all(|y| (0..12).all(|x| out.get(x, y, 0) == 1));
    let dropped_small = (15..19).all(|x| out.get(x, 15, 2) == 0);
    let pass = window_ok && kept_big && dropped_small && out.count() == 96;
    Outcome::new(
        pass,
        format!("window {:?}; remove_small kept {} of 100 voxels", w.data(), out.count()),
    )
}

fn c11_voting() -> Outcome {
    let g = Geometry::new([8, 1, 1], [1.0; 3], Orientation::Hfs).unwrap();
    let bit = |k: usize| (0..8).map(|i| ((i >> k) & 1) as u8).collect::<Vec<_>>();
    let a = MaskVolume::new(g.clone(), bit(0)).unwrap();
    let b = MaskVolume::new(g.clone(), bit(1)).unwrap();
    let c = MaskVolume::new(g.clone(), bit(2)).unwrap();
    let v = vote_masks(&a, &b, &c).unwrap();
    let want: Vec<u8> = (0..8u32).map(|i| (i.count_ones() >= 2) as u8).collect();
    Outcome::new(
        v.data() == want.as_slice(),
        format!("got {:?}, want {:?}", v.data(), want),
    )
}

fn selected() -> Option<Vec<usize>> {
    let s = std::env::var("VOXPIPE_ACCEPTANCE_ONLY").ok()?;
    Some(s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() {
    let flag = |k: &str| std::env::var(k).is_ok_and(|v| v == "1");
    let full = flag("VOXPIPE_FULL_ACCEPTANCE");
    let only = selected();
    let criteria: Vec<(usize, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(c1_autodiff)),
        (2, Box::new(c2_kernels)),
        (3, Box::new(c3_losses)),
        (4, Box::new(c4_stats)),
        (5, Box::new(c5_prep)),
        (6, Box::new(desk::c6_variable_z)),
        (7, Box::new(move || desk::c7_segmentation(full))),
        (8, Box::new(move || desk::c8_classification(full))),
        (9, Box::new(desk::c9_gradcam)),
        (10, Box::new(move || desk::c10_determinism(full))),
        (11, Box::new(c11_voting)),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let tag = match (o.pass, o.reduced) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (true, true) => "PASS (reduced)",
            (false, true) => "FAIL (reduced)",
        };
        println!(
            "criterion {n:>2} {tag} [{:.1}s] {}",
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        if flag("VOXPIPE_ACCEPTANCE_STRICT") {
            std::process::exit(1);
        }
    }
}
