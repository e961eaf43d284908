use std::path::Path;

use crate::error::{Error, Result};
use crate::volio::{MaskVolume, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MontageLayout {
    pub rows: usize,
    pub cols: usize,
}

/// Axial-slice montage as binary PGM (P5), or PPM (P6) when a mask contour
/// or CAM heat overlay is given. `slices` defaults to evenly spaced slices
/// filling the grid.
pub fn montage_bytes(
    vol: &Volume,
    mask: Option<&MaskVolume>,
    cam: Option<&Volume>,
    layout: MontageLayout,
    slices: Option<&[usize]>,
) -> Result<Vec<u8>> {
    let [nx, ny, nz] = vol.dims();
    if let Some(m) = mask {
        vol.geometry().ensure_same(m.geometry())?;
    }
    if let Some(c) = cam {
        if c.dims() != vol.dims() {
            return Err(Error::GeometryMismatch(format!(
                "cam {:?} vs volume {:?}",
                c.dims(),
                vol.dims()
            )));
        }
    }
    let cells = layout.rows * layout.cols;
    if cells == 0 {
        return Err(Error::InvalidConfig("montage needs at least one row and column".into()));
    }
    let picked: Vec<usize> = match slices {
        Some(s) => s.to_vec(),
        None if cells == 1 || nz == 1 => vec![nz / 2; cells.min(1)],
        None => (0..cells.min(nz))
            .map(|i| (i as f64 * (nz - 1) as f64 / (cells.min(nz) - 1).max(1) as f64).round() as usize)
            .collect(),
    };
    if let Some(&bad) = picked.iter().find(|&&z| z >= nz) {
        return Err(Error::InvalidVolume(format!("slice {bad} out of range 0..{nz}")));
    }
    if picked.len() > cells {
        return Err(Error::InvalidConfig(format!(
            "{} slices do not fit {cells} cells",
            picked.len()
        )));
    }

    let (lo, hi) = match vol.kind() {
        VolumeKind::Windowed => (0.0, 1.0),
        _ => vol
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v))),
    };
    let gray = |v: f32| -> f64 {
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0) as f64
        } else {
            0.0
        }
    };
    let color = mask.is_some() || cam.is_some();
    let (w, h) = (layout.cols * nx, layout.rows * ny);
    let channels = if color { 3 } else { 1 };
    let mut px = vec![0u8; w * h * channels];
    for (cell, &z) in picked.iter().enumerate() {
        let (r0, c0) = ((cell / layout.cols) * ny, (cell % layout.cols) * nx);
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let g = gray(vol.data()[i]);
                let mut rgb = [g, g, g];
                if let Some(c) = cam {
                    let a = 0.5 * c.data()[i].clamp(0.0, 1.0) as f64;
                    let heat = jet(c.data()[i].clamp(0.0, 1.0) as f64);
                    for k in 0..3 {
                        rgb[k] = (1.0 - a) * rgb[k] + a * heat[k];
                    }
                }
                if let Some(m) = mask {
                    if on_contour(m, x, y, z) {
                        rgb = [1.0, 0.0, 0.0];
                    }
                }
                let o = ((r0 + y) * w + c0 + x) * channels;
                for k in 0..channels {
                    px[o + k] = (rgb[k] * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("{}\n{w} {h}\n255\n", if color { "P6" } else { "P5" }).into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn montage(
    vol: &Volume,
    mask: Option<&MaskVolume>,
    cam: Option<&Volume>,
    layout: MontageLayout,
    slices: Option<&[usize]>,
    path: &Path,
) -> Result<()> {
    let bytes = montage_bytes(vol, mask, cam, layout, slices)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn on_contour(m: &MaskVolume, x: usize, y: usize, z: usize) -> bool {
    let [nx, ny, _] = m.dims();
    if m.get(x, y, z) == 0 {
        return false;
    }
    x == 0
        || y == 0
        || x + 1 == nx
        || y + 1 == ny
        || m.get(x - 1, y, z) == 0
        || m.get(x + 1, y, z) == 0
        || m.get(x, y - 1, z) == 0
        || m.get(x, y + 1, z) == 0
}

fn jet(t: f64) -> [f64; 3] {
    let c = |o: f64| (1.5 - (4.0 * t - o).abs()).clamp(0.0, 1.0);
    [c(3.0), c(2.0), c(1.0)]
}
