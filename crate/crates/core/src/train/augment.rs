use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volio::{MaskVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotate: bool,
    /// Per-axis bound, degrees.
    pub rot_deg_max: f64,
    pub flip: bool,
    /// Axes (x, y, z) eligible for a random flip.
    pub flip_axes: [bool; 3],
    pub intensity: bool,
    pub gamma_range: [f64; 2],
    pub gain_range: [f64; 2],
    pub elastic: bool,
    /// Smoothing of the displacement field, voxels.
    pub elastic_sigma: f64,
    /// Standard deviation of the smoothed displacement, voxels.
    pub elastic_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotate: true,
            rot_deg_max: 10.0,
            flip: true,
            flip_axes: [true, true, false],
            intensity: true,
            gamma_range: [0.9, 1.1],
            gain_range: [0.9, 1.1],
            elastic: true,
            elastic_sigma: 2.0,
            elastic_alpha: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite();
        if !range_ok(self.gamma_range) || !range_ok(self.gain_range) {
            return Err(Error::InvalidConfig(
                "gamma_range and gain_range must be positive, lo <= hi".into(),
            ));
        }
        if !(self.elastic_sigma > 0.0) || !(self.elastic_alpha >= 0.0) || !(self.rot_deg_max >= 0.0) {
            return Err(Error::InvalidConfig(
                "elastic_sigma must be > 0, alpha and rot_deg_max >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// One random draw of every transform parameter.
#[derive(Debug, Clone, PartialEq)]
struct Draw {
    angles: [f64; 3],
    flips: [bool; 3],
    gamma: f64,
    gain: f64,
    field_seed: u64,
}

impl Draw {
    fn new(cfg: &AugmentConfig, seed: u64) -> Draw {
        let mut rng = seed::rng(seed);
        let m = cfg.rot_deg_max.to_radians();
        let angles: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, [-m, m]));
        let flips: [bool; 3] = std::array::from_fn(|a| rng.gen_bool(0.5) && cfg.flip_axes[a]);
        let gamma = uniform(&mut rng, cfg.gamma_range);
        let gain = uniform(&mut rng, cfg.gain_range);
        Draw {
            angles,
            flips,
            gamma,
            gain,
            field_seed: rng.gen(),
        }
    }
}

/// Random rotation, flips, gain/gamma (image only) and elastic warp, applied
/// in that order. Deterministic in `seed`; shapes are preserved and the mask
/// stays binary.
pub fn augment_sample(vol: &Volume, mask: &MaskVolume, cfg: &AugmentConfig, seed: u64) -> Result<(Volume, MaskVolume)> {
    vol.geometry().ensure_same(mask.geometry())?;
    if !cfg.enabled {
        return Ok((vol.clone(), mask.clone()));
    }
    let d = Draw::new(cfg, seed);
    let dims = vol.dims();
    let mut img = vol.data().to_vec();
    let mut msk = mask.data().to_vec();

    if cfg.rotate && d.angles.iter().any(|&a| a != 0.0) {
        let r = rotation(d.angles);
        let sp = vol.spacing();
        let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
        // inverse map: source = Rᵀ·(p − c) in mm, back to index space
        let src = |p: [f64; 3]| -> [f64; 3] {
            let q: [f64; 3] = std::array::from_fn(|a| (p[a] - c[a]) * sp[a]);
            std::array::from_fn(|a| (r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2]) / sp[a] + c[a])
        };
        (img, msk) = warp(&img, &msk, dims, src);
    }
    if cfg.flip {
        for axis in 0..3 {
            if d.flips[axis] {
                img = flip_axis(&img, dims, axis);
                msk = flip_axis(&msk, dims, axis);
            }
        }
    }
    if cfg.intensity && (d.gamma != 1.0 || d.gain != 1.0) {
        for v in img.iter_mut() {
            *v = (d.gain * (v.clamp(0.0, 1.0) as f64).powf(d.gamma)).clamp(0.0, 1.0) as f32;
        }
    }
    if cfg.elastic && cfg.elastic_alpha > 0.0 {
        let field = displacement_field(dims, cfg.elastic_sigma, cfg.elastic_alpha, d.field_seed);
        let [nx, ny, _] = dims;
        let src = |p: [f64; 3]| -> [f64; 3] {
            let i = p[0] as usize + nx * (p[1] as usize + ny * p[2] as usize);
            std::array::from_fn(|a| p[a] + field[a][i] as f64)
        };
        (img, msk) = warp(&img, &msk, dims, src);
    }
    Ok((
        vol.rebuild(vol.geometry().clone(), img)?,
        mask.rebuild(mask.geometry().clone(), msk)?,
    ))
}

/// `Rz·Ry·Rx` for angles about (x, y, z).
fn rotation(a: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = a[0].sin_cos();
    let (sy, cy) = a[1].sin_cos();
    let (sz, cz) = a[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(rz, matmul(ry, rx))
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Resamples image (trilinear, edge-clamped) and mask (nearest, zero
/// outside) at `src(p)` for every output voxel `p`.
fn warp(img: &[f32], msk: &[u8], dims: [usize; 3], src: impl Fn([f64; 3]) -> [f64; 3]) -> (Vec<f32>, Vec<u8>) {
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut out_img = Vec::with_capacity(img.len());
    let mut out_msk = Vec::with_capacity(msk.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let s = src([x as f64, y as f64, z as f64]);
                let mut acc = 0f64;
                let base: [f64; 3] = std::array::from_fn(|a| s[a].clamp(0.0, (dims[a] - 1) as f64));
                let i0: [usize; 3] = std::array::from_fn(|a| base[a].floor() as usize);
                let i1: [usize; 3] = std::array::from_fn(|a| (i0[a] + 1).min(dims[a] - 1));
                let f: [f64; 3] = std::array::from_fn(|a| base[a] - i0[a] as f64);
                for corner in 0..8 {
                    let pick = |a: usize| corner >> a & 1 == 1;
                    let w: f64 = (0..3).map(|a| if pick(a) { f[a] } else { 1.0 - f[a] }).product();
                    if w != 0.0 {
                        let p: [usize; 3] = std::array::from_fn(|a| if pick(a) { i1[a] } else { i0[a] });
                        acc += w * img[idx(p[0], p[1], p[2])] as f64;
                    }
                }
                out_img.push(acc as f32);
                let r: [f64; 3] = std::array::from_fn(|a| s[a].round());
                let inside = (0..3).all(|a| r[a] >= 0.0 && r[a] <= (dims[a] - 1) as f64);
                out_msk.push(if inside {
                    msk[idx(r[0] as usize, r[1] as usize, r[2] as usize)]
                } else {
                    0
                });
            }
        }
    }
    (out_img, out_msk)
}

fn flip_axis<V: Copy>(data: &[V], dims: [usize; 3], axis: usize) -> Vec<V> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut p = [x, y, z];
                p[axis] = dims[axis] - 1 - p[axis];
                out.push(data[p[0] + nx * (p[1] + ny * p[2])]);
            }
        }
    }
    out
}

/// Gaussian-smoothed white noise per axis, rescaled to standard deviation
/// `alpha` voxels.
fn displacement_field(dims: [usize; 3], sigma: f64, alpha: f64, seed: u64) -> [Vec<f32>; 3] {
    let n: usize = dims.iter().product();
    let mut rng = seed::rng(seed);
    std::array::from_fn(|_| {
        let mut f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for axis in 0..3 {
            f = smooth_axis(&f, dims, axis, sigma);
        }
        let mean = f.iter().sum::<f64>() / n as f64;
        let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let scale = if sd > 0.0 { alpha / sd } else { 0.0 };
        f.iter().map(|v| ((v - mean) * scale) as f32).collect()
    })
}

fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis] as isize;
    let mut out = vec![0f64; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) as isize % len;
        let base = i as isize - pos * stride as isize;
        let mut acc = 0f64;
        for (k, w) in kernel.iter().enumerate() {
            let q = (pos + k as isize - radius).clamp(0, len - 1);
            acc += w * data[(base + q * stride as isize) as usize];
        }
        *o = acc / norm;
    }
    out
}
