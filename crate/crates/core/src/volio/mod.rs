//! Volume and mask containers, NRRD I/O, HU conversion and orientation
//! normalization.
//!
//! Voxel data is stored row-major with x fastest: the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

mod meta;
mod nrrd;
mod orient;

pub use meta::{Group, ScanMeta};
pub use nrrd::{read_nrrd, write_nrrd, Encoding, NrrdImage};
pub use orient::{reorient_hfs, reorient_mask_hfs, Orientation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity semantics of a [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Raw,
    Hu,
    Windowed,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Raw => "raw",
            VolumeKind::Hu => "hu",
            VolumeKind::Windowed => "windowed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(VolumeKind::Raw),
            "hu" => Some(VolumeKind::Hu),
            "windowed" => Some(VolumeKind::Windowed),
            _ => None,
        }
    }
}

/// On-disk sample type of an intensity volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleType {
    I16,
    F32,
}

/// Grid size, voxel spacing (mm) and patient orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], orientation: Orientation) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            orientation,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn with_dims(&self, dims: [usize; 3]) -> Geometry {
        Geometry {
            dims,
            spacing: self.spacing,
            orientation: self.orientation.clone(),
        }
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{:?}/{:?}/{} vs {:?}/{:?}/{}",
                self.dims,
                self.spacing,
                self.orientation.code(),
                other.dims,
                other.spacing,
                other.orientation.code()
            )));
        }
        Ok(())
    }
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    kind: VolumeKind,
    sample: SampleType,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume, storing raw volumes as int16 and everything else as
    /// float32.
    pub fn new(geom: Geometry, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        let sample = match kind {
            VolumeKind::Raw => SampleType::I16,
            _ => SampleType::F32,
        };
        Self::with_sample_type(geom, kind, sample, data)
    }

    pub fn with_sample_type(geom: Geometry, kind: VolumeKind, sample: SampleType, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if sample == SampleType::I16
            && data
                .iter()
                .any(|&v| v.fract() != 0.0 || !(-32768.0..=32767.0).contains(&v))
        {
            return Err(Error::InvalidVolume(
                "int16 volume holds a non-integral or out-of-range sample".into(),
            ));
        }
        if kind == VolumeKind::Windowed && data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidVolume("windowed volume values must lie in [0, 1]".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite sample".into()));
        }
        Ok(Volume {
            geom,
            kind,
            sample,
            data,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.geom.orientation
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn sample_type(&self) -> SampleType {
        self.sample
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    /// Same kind and sample type, new geometry and samples.
    pub fn rebuild(&self, geom: Geometry, data: Vec<f32>) -> Result<Volume> {
        Volume::with_sample_type(geom, self.kind, self.sample, data)
    }

    pub(crate) fn expect_kind(&self, expected: VolumeKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::WrongKind {
                expected,
                found: self.kind,
            });
        }
        Ok(())
    }
}

/// Binary mask volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    geom: Geometry,
    data: Vec<u8>,
}

impl Eq for Geometry {}

impl MaskVolume {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::NonBinaryMaskValues);
        }
        Ok(MaskVolume { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        let n = geom.len();
        MaskVolume::new(geom, vec![0; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn rebuild(&self, geom: Geometry, data: Vec<u8>) -> Result<MaskVolume> {
        MaskVolume::new(geom, data)
    }
}

/// `out = slope * raw + intercept`, elementwise.
pub fn hu_convert(v: &Volume, meta: &ScanMeta) -> Result<Volume> {
    v.expect_kind(VolumeKind::Raw)?;
    let slope = meta.rescale_slope as f32;
    let intercept = meta.rescale_intercept as f32;
    let data = v.data.iter().map(|&r| slope * r + intercept).collect();
    Volume::with_sample_type(v.geom.clone(), VolumeKind::Hu, SampleType::F32, data)
}
