//! Preprocessing chain: soft-tissue windowing, nearest-neighbor resampling,
//! XY crop/pad, optional fixed-depth Z reshape and Z trimming of masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{hu_convert, reorient_hfs, reorient_mask_hfs, Geometry, MaskVolume, ScanMeta, Volume, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub window_level: f64,
    pub window_width: f64,
    /// Target voxel spacing (x, y, z) in mm.
    pub target_spacing: [f64; 3],
    pub crop_xy: usize,
    /// Only the fixed-depth baseline sets this (to 128).
    pub fixed_z: Option<usize>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            window_level: 50.0,
            window_width: 400.0,
            target_spacing: [2.0, 2.0, 3.0],
            crop_xy: 128,
            fixed_z: None,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_width > 0.0) {
            return Err(Error::InvalidConfig("window_width must be > 0".into()));
        }
        if self.crop_xy == 0 {
            return Err(Error::InvalidConfig("crop_xy must be > 0".into()));
        }
        if self.fixed_z == Some(0) {
            return Err(Error::InvalidConfig("fixed_z must be > 0".into()));
        }
        if self.target_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("target_spacing must be > 0".into()));
        }
        Ok(())
    }
}

/// Maps HU to `[0, 1]` through a level/width window.
pub fn window(v: &Volume, cfg: &PrepConfig) -> Result<Volume> {
    v.expect_kind(VolumeKind::Hu)?;
    let lo = cfg.window_level - cfg.window_width / 2.0;
    let width = cfg.window_width;
    let data = v
        .data()
        .iter()
        .map(|&hu| ((hu as f64 - lo) / width).clamp(0.0, 1.0) as f32)
        .collect();
    Volume::new(v.geometry().clone(), VolumeKind::Windowed, data)
}

/// Source index for output index `j` when `scale` source voxels make up one
/// output voxel: the source voxel containing the output voxel center.
#[inline]
pub(crate) fn nearest_source(j: usize, scale: f64, in_len: usize) -> usize {
    let s = ((j as f64 + 0.5) * scale).floor();
    (s.max(0.0) as usize).min(in_len - 1)
}

fn resample_dims(geom: &Geometry, target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (geom.dims[a] as f64 * geom.spacing[a] / target[a]).round();
        if n < 1.0 {
            return Err(Error::DegenerateOutput(format!(
                "axis {a} would have {n} voxels after resampling"
            )));
        }
        out[a] = n as usize;
    }
    Ok(out)
}

fn gather<T: Copy>(data: &[T], in_dims: [usize; 3], maps: &[Vec<usize>; 3]) -> Vec<T> {
    let (nx, ny) = (in_dims[0], in_dims[1]);
    let mut out = Vec::with_capacity(maps[0].len() * maps[1].len() * maps[2].len());
    for &sz in &maps[2] {
        for &sy in &maps[1] {
            let row = nx * (sy + ny * sz);
            out.extend(maps[0].iter().map(|&sx| data[row + sx]));
        }
    }
    out
}

fn index_maps(in_dims: [usize; 3], out_dims: [usize; 3], scales: [f64; 3]) -> [Vec<usize>; 3] {
    std::array::from_fn(|a| {
        (0..out_dims[a])
            .map(|j| nearest_source(j, scales[a], in_dims[a]))
            .collect()
    })
}

fn resample_plan(geom: &Geometry, target: [f64; 3]) -> Result<(Geometry, [Vec<usize>; 3])> {
    let out_dims = resample_dims(geom, target)?;
    let scales = std::array::from_fn(|a| target[a] / geom.spacing[a]);
    let maps = index_maps(geom.dims, out_dims, scales);
    let out_geom = Geometry {
        dims: out_dims,
        spacing: target,
        orientation: geom.orientation.clone(),
    };
    Ok((out_geom, maps))
}

/// Nearest-neighbor resampling of an intensity volume to `target` spacing.
pub fn resample_nn(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if v.spacing() == target {
        return Ok(v.clone());
    }
    let (geom, maps) = resample_plan(v.geometry(), target)?;
    v.rebuild(geom, gather(v.data(), v.dims(), &maps))
}

pub fn resample_mask_nn(m: &MaskVolume, target: [f64; 3]) -> Result<MaskVolume> {
    if m.spacing() == target {
        return Ok(m.clone());
    }
    let (geom, maps) = resample_plan(m.geometry(), target)?;
    m.rebuild(geom, gather(m.data(), m.dims(), &maps))
}

/// Offsets of a centered crop (positive) or pad (negative) with the odd
/// remainder on the high side.
fn crop_pad_offset(n: usize, size: usize) -> isize {
    if n >= size {
        ((n - size) / 2) as isize
    } else {
        -(((size - n) / 2) as isize)
    }
}

fn crop_or_pad_data<T: Copy + Default>(data: &[T], dims: [usize; 3], size: usize) -> Vec<T> {
    let [nx, ny, nz] = dims;
    let ox = crop_pad_offset(nx, size);
    let oy = crop_pad_offset(ny, size);
    let mut out = vec![T::default(); size * size * nz];
    for z in 0..nz {
        for y in 0..size {
            let sy = y as isize + oy;
            if sy < 0 || sy >= ny as isize {
                continue;
            }
            for x in 0..size {
                let sx = x as isize + ox;
                if sx < 0 || sx >= nx as isize {
                    continue;
                }
                out[x + size * (y + size * z)] = data[sx as usize + nx * (sy as usize + ny * z)];
            }
        }
    }
    out
}

/// Centered XY crop or symmetric zero pad to `size × size`; Z untouched.
pub fn crop_or_pad_xy(v: &Volume, size: usize) -> Result<Volume> {
    if v.dims()[0] == size && v.dims()[1] == size {
        return Ok(v.clone());
    }
    let geom = v.geometry().with_dims([size, size, v.dims()[2]]);
    v.rebuild(geom, crop_or_pad_data(v.data(), v.dims(), size))
}

pub fn crop_or_pad_mask_xy(m: &MaskVolume, size: usize) -> Result<MaskVolume> {
    if m.dims()[0] == size && m.dims()[1] == size {
        return Ok(m.clone());
    }
    let geom = m.geometry().with_dims([size, size, m.dims()[2]]);
    m.rebuild(geom, crop_or_pad_data(m.data(), m.dims(), size))
}

fn z_map(in_nz: usize, nz: usize) -> Vec<usize> {
    let scale = in_nz as f64 / nz as f64;
    (0..nz).map(|j| nearest_source(j, scale, in_nz)).collect()
}

fn reshape_z_data<T: Copy>(data: &[T], dims: [usize; 3], nz: usize) -> Vec<T> {
    let maps = [(0..dims[0]).collect(), (0..dims[1]).collect(), z_map(dims[2], nz)];
    gather(data, dims, &maps)
}

/// Nearest-neighbor resampling along Z only, to exactly `nz` slices. The
/// slice thickness is rescaled so the physical extent is preserved.
pub fn reshape_z(v: &Volume, nz: usize) -> Result<Volume> {
    if nz == 0 {
        return Err(Error::DegenerateOutput("reshape_z to 0 slices".into()));
    }
    if v.dims()[2] == nz {
        return Ok(v.clone());
    }
    let geom = reshaped_geometry(v.geometry(), nz);
    v.rebuild(geom, reshape_z_data(v.data(), v.dims(), nz))
}

pub fn reshape_mask_z(m: &MaskVolume, nz: usize) -> Result<MaskVolume> {
    if nz == 0 {
        return Err(Error::DegenerateOutput("reshape_z to 0 slices".into()));
    }
    if m.dims()[2] == nz {
        return Ok(m.clone());
    }
    let geom = reshaped_geometry(m.geometry(), nz);
    m.rebuild(geom, reshape_z_data(m.data(), m.dims(), nz))
}

fn reshaped_geometry(g: &Geometry, nz: usize) -> Geometry {
    let mut spacing = g.spacing;
    spacing[2] = g.spacing[2] * g.dims[2] as f64 / nz as f64;
    Geometry {
        dims: [g.dims[0], g.dims[1], nz],
        spacing,
        orientation: g.orientation.clone(),
    }
}

/// Output of [`z_trim`].
#[derive(Debug, Clone, PartialEq)]
pub struct ZTrimmed {
    pub mask: MaskVolume,
    pub volume: Option<Volume>,
    /// First retained slice of the input.
    pub z_start: usize,
    /// Set when the mask was entirely empty.
    pub empty_warning: bool,
}

/// Removes leading and trailing all-background slices from a mask (and
/// identically from the paired volume).
pub fn z_trim(m: &MaskVolume, paired: Option<&Volume>) -> Result<ZTrimmed> {
    if let Some(v) = paired {
        v.geometry().ensure_same(m.geometry())?;
    }
    let plane = m.geometry().slice_len();
    let nz = m.dims()[2];
    let occupied = |z: usize| m.data()[z * plane..(z + 1) * plane].iter().any(|&v| v != 0);
    let first = (0..nz).find(|&z| occupied(z));
    let (z0, z1, empty) = match first {
        Some(z0) => {
            let z1 = (0..nz).rev().find(|&z| occupied(z)).unwrap_or(z0);
            (z0, z1 + 1, false)
        }
        None => {
            log::warn!("z_trim: mask is entirely empty, keeping a single slice");
            (0, 1, true)
        }
    };
    let geom = m.geometry().with_dims([m.dims()[0], m.dims()[1], z1 - z0]);
    let mask = m.rebuild(geom.clone(), m.data()[z0 * plane..z1 * plane].to_vec())?;
    let volume = paired
        .map(|v| v.rebuild(geom, v.data()[z0 * plane..z1 * plane].to_vec()))
        .transpose()?;
    Ok(ZTrimmed {
        mask,
        volume,
        z_start: z0,
        empty_warning: empty,
    })
}

/// Full scan chain: HU conversion, reorientation to HFS, windowing,
/// resampling, XY crop/pad and (for fixed-depth models) Z reshape.
pub fn preprocess_scan(raw: &Volume, meta: &ScanMeta, cfg: &PrepConfig) -> Result<Volume> {
    cfg.validate()?;
    let hu = match raw.kind() {
        VolumeKind::Raw => hu_convert(raw, meta)?,
        _ => raw.clone(),
    };
    let v = window(&reorient_hfs(&hu)?, cfg)?;
    let v = crop_or_pad_xy(&resample_nn(&v, cfg.target_spacing)?, cfg.crop_xy)?;
    match cfg.fixed_z {
        Some(nz) => reshape_z(&v, nz),
        None => Ok(v),
    }
}

/// The geometric part of [`preprocess_scan`] applied to a mask.
pub fn preprocess_mask(m: &MaskVolume, cfg: &PrepConfig) -> Result<MaskVolume> {
    cfg.validate()?;
    let m = resample_mask_nn(&reorient_mask_hfs(m)?, cfg.target_spacing)?;
    let m = crop_or_pad_mask_xy(&m, cfg.crop_xy)?;
    match cfg.fixed_z {
        Some(nz) => reshape_mask_z(&m, nz),
        None => Ok(m),
    }
}
