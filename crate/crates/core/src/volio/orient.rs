use std::fmt;

use crate::error::{Error, Result};

use super::{Geometry, MaskVolume, Volume};

/// Patient position of an axial stack. Non-HFS codes are pure axis flips
/// relative to head-first-supine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Orientation {
    Hfs,
    Ffs,
    Hfp,
    Ffp,
    Other(String),
}

impl Orientation {
    pub fn parse(code: &str) -> Orientation {
        match code.trim().to_ascii_uppercase().as_str() {
            "HFS" => Orientation::Hfs,
            "FFS" => Orientation::Ffs,
            "HFP" => Orientation::Hfp,
            "FFP" => Orientation::Ffp,
            _ => Orientation::Other(code.trim().to_string()),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            Orientation::Hfs => "HFS",
            Orientation::Ffs => "FFS",
            Orientation::Hfp => "HFP",
            Orientation::Ffp => "FFP",
            Orientation::Other(c) => c,
        }
    }

    /// Axes (x, y, z) that must be reversed to reach HFS.
    pub fn flips(&self) -> Result<[bool; 3]> {
        match self {
            Orientation::Hfs => Ok([false, false, false]),
            Orientation::Ffs => Ok([false, false, true]),
            Orientation::Hfp => Ok([true, true, false]),
            Orientation::Ffp => Ok([true, true, true]),
            Orientation::Other(c) => Err(Error::UnknownOrientationCode(c.clone())),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

pub(crate) fn flip_axes<T: Copy>(data: &[T], dims: [usize; 3], flips: [bool; 3]) -> Vec<T> {
    if !flips.iter().any(|&f| f) {
        return data.to_vec();
    }
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..nz {
        let sz = if flips[2] { nz - 1 - z } else { z };
        for y in 0..ny {
            let sy = if flips[1] { ny - 1 - y } else { y };
            let row = nx * (sy + ny * sz);
            if flips[0] {
                out.extend(data[row..row + nx].iter().rev());
            } else {
                out.extend_from_slice(&data[row..row + nx]);
            }
        }
    }
    out
}

fn hfs_geometry(g: &Geometry) -> Geometry {
    Geometry {
        dims: g.dims,
        spacing: g.spacing,
        orientation: Orientation::Hfs,
    }
}

/// Flips voxel data so the volume is head-first-supine.
pub fn reorient_hfs(v: &Volume) -> Result<Volume> {
    let flips = v.orientation().flips()?;
    let data = flip_axes(v.data(), v.dims(), flips);
    v.rebuild(hfs_geometry(v.geometry()), data)
}

pub fn reorient_mask_hfs(m: &MaskVolume) -> Result<MaskVolume> {
    let flips = m.geometry().orientation.flips()?;
    let data = flip_axes(m.data(), m.dims(), flips);
    m.rebuild(hfs_geometry(m.geometry()), data)
}
