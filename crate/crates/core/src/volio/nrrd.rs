//! A frozen NRRD subset: `NRRD0004`/`NRRD0005`, three dimensions,
//! `int16`/`uint8`/`float32` samples, raw or gzip encoding, little endian,
//! attached data and diagonal `space directions` (or `spacings`).
//!
//! Anything outside that subset is rejected with
//! [`Error::UnsupportedHeaderField`] rather than read approximately.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

use super::{Geometry, MaskVolume, Orientation, SampleType, Volume, VolumeKind};

const ORIENTATION_KEY: &str = "voxpipe_orientation";
const KIND_KEY: &str = "voxpipe_kind";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Raw,
    Gzip,
}

impl Encoding {
    fn as_str(self) -> &'static str {
        match self {
            Encoding::Raw => "raw",
            Encoding::Gzip => "gzip",
        }
    }
}

/// Result of [`read_nrrd`]: uint8 files are masks, everything else volumes.
#[derive(Debug, Clone, PartialEq)]
pub enum NrrdImage {
    Volume(Volume),
    Mask(MaskVolume),
}

impl NrrdImage {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            NrrdImage::Volume(v) => Ok(v),
            NrrdImage::Mask(_) => Err(Error::InvalidVolume(
                "expected an intensity volume, found a uint8 mask".into(),
            )),
        }
    }

    pub fn into_mask(self) -> Result<MaskVolume> {
        match self {
            NrrdImage::Mask(m) => Ok(m),
            NrrdImage::Volume(_) => Err(Error::InvalidVolume(
                "expected a uint8 mask, found an intensity volume".into(),
            )),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        match self {
            NrrdImage::Volume(v) => v.geometry(),
            NrrdImage::Mask(m) => m.geometry(),
        }
    }
}

impl From<Volume> for NrrdImage {
    fn from(v: Volume) -> Self {
        NrrdImage::Volume(v)
    }
}

impl From<MaskVolume> for NrrdImage {
    fn from(m: MaskVolume) -> Self {
        NrrdImage::Mask(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NrrdType {
    Int16,
    Uint8,
    Float32,
}

impl NrrdType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "int16" | "short" | "short int" | "signed short" | "signed short int" | "int16_t" => Ok(NrrdType::Int16),
            "uint8" | "uchar" | "unsigned char" | "uint8_t" => Ok(NrrdType::Uint8),
            "float" | "float32" => Ok(NrrdType::Float32),
            other => Err(Error::UnsupportedHeaderField(format!("type: {other}"))),
        }
    }

    fn bytes(self) -> usize {
        match self {
            NrrdType::Int16 => 2,
            NrrdType::Uint8 => 1,
            NrrdType::Float32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            NrrdType::Int16 => "int16",
            NrrdType::Uint8 => "uint8",
            NrrdType::Float32 => "float",
        }
    }
}

#[derive(Default)]
struct Header {
    ty: Option<NrrdType>,
    dimension: Option<usize>,
    sizes: Option<[usize; 3]>,
    encoding: Option<Encoding>,
    endian_little: Option<bool>,
    spacing: Option<[f64; 3]>,
    orientation: Option<Orientation>,
    kind: Option<VolumeKind>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_triple<T: std::str::FromStr>(field: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(malformed(format!("{field}: expected 3 values, got {value:?}")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| malformed(format!("{field}: cannot parse {p:?}")))?,
        );
    }
    out.try_into()
        .map_err(|_| malformed(format!("{field}: expected 3 values")))
}

/// Parses `(a,b,c) (d,e,f) (g,h,i)` and requires a positive diagonal.
fn parse_space_directions(value: &str) -> Result<[f64; 3]> {
    let mut vectors = Vec::new();
    let mut rest = value.trim();
    while !rest.is_empty() {
        if rest.starts_with("none") {
            return Err(Error::UnsupportedHeaderField("space directions: none".into()));
        }
        let open = rest
            .find('(')
            .ok_or_else(|| malformed(format!("space directions: {value:?}")))?;
        let close = rest
            .find(')')
            .ok_or_else(|| malformed(format!("space directions: {value:?}")))?;
        if close < open {
            return Err(malformed(format!("space directions: {value:?}")));
        }
        let comps: Vec<f64> = rest[open + 1..close]
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(format!("space directions: {value:?}")))?;
        if comps.len() != 3 {
            return Err(malformed(format!("space directions: {value:?}")));
        }
        vectors.push(comps);
        rest = rest[close + 1..].trim_start();
    }
    if vectors.len() != 3 {
        return Err(malformed(format!(
            "space directions: expected 3 vectors, got {}",
            vectors.len()
        )));
    }
    let mut spacing = [0.0; 3];
    for (axis, v) in vectors.iter().enumerate() {
        for (j, &c) in v.iter().enumerate() {
            if j != axis && c != 0.0 {
                return Err(Error::UnsupportedHeaderField(format!(
                    "space directions: non-diagonal {value:?}"
                )));
            }
        }
        if !(v[axis] > 0.0) {
            return Err(Error::UnsupportedHeaderField(format!(
                "space directions: non-positive diagonal {value:?}"
            )));
        }
        spacing[axis] = v[axis];
    }
    Ok(spacing)
}

fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text.lines();
    let magic = lines.next().ok_or_else(|| malformed("empty file"))?;
    match magic.trim_end() {
        "NRRD0004" | "NRRD0005" => {}
        m if m.starts_with("NRRD000") => return Err(Error::UnsupportedHeaderField(format!("magic {m}"))),
        m => return Err(malformed(format!("bad magic {m:?}"))),
    }
    let mut h = Header::default();
    for line in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once(":=") {
            match key {
                ORIENTATION_KEY => h.orientation = Some(Orientation::parse(value)),
                KIND_KEY => {
                    h.kind = Some(
                        VolumeKind::parse(value.trim()).ok_or_else(|| malformed(format!("{KIND_KEY}: {value:?}")))?,
                    )
                }
                // free-form key/value pairs carry no semantics for the reader
                _ => {}
            }
            continue;
        }
        let (field, value) = line
            .split_once(": ")
            .ok_or_else(|| malformed(format!("cannot parse line {line:?}")))?;
        let value = value.trim();
        match field {
            "type" => h.ty = Some(NrrdType::parse(value)?),
            "dimension" => {
                let d: usize = value.parse().map_err(|_| malformed(format!("dimension: {value:?}")))?;
                if d != 3 {
                    return Err(Error::UnsupportedHeaderField(format!("dimension: {d}")));
                }
                h.dimension = Some(d);
            }
            "sizes" => h.sizes = Some(parse_triple::<usize>("sizes", value)?),
            "encoding" => {
                h.encoding = Some(match value {
                    "raw" => Encoding::Raw,
                    "gzip" | "gz" => Encoding::Gzip,
                    other => return Err(Error::UnsupportedHeaderField(format!("encoding: {other}"))),
                })
            }
            "endian" => {
                h.endian_little = Some(match value {
                    "little" => true,
                    other => return Err(Error::UnsupportedHeaderField(format!("endian: {other}"))),
                })
            }
            "space directions" => h.spacing = Some(parse_space_directions(value)?),
            "spacings" => {
                let s = parse_triple::<f64>("spacings", value)?;
                if s.iter().any(|&v| !(v > 0.0)) {
                    return Err(malformed(format!("spacings: {value:?}")));
                }
                if h.spacing.is_none() {
                    h.spacing = Some(s);
                }
            }
            "space" => match value {
                "left-posterior-superior" | "LPS" | "right-anterior-superior" | "RAS" => {}
                other => return Err(Error::UnsupportedHeaderField(format!("space: {other}"))),
            },
            "space origin" | "content" => {}
            "kinds" => {
                if value.split_whitespace().any(|k| !matches!(k, "domain" | "space")) {
                    return Err(Error::UnsupportedHeaderField(format!("kinds: {value}")));
                }
            }
            other => return Err(Error::UnsupportedHeaderField(other.to_string())),
        }
    }
    Ok(h)
}

/// Reads a volume or mask from an NRRD file.
pub fn read_nrrd(path: impl AsRef<Path>) -> Result<NrrdImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nrrd(&bytes)
}

pub(crate) fn parse_nrrd(bytes: &[u8]) -> Result<NrrdImage> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed("missing blank line after header"))?;
    let header_text = std::str::from_utf8(&bytes[..split]).map_err(|_| malformed("header is not valid UTF-8"))?;
    let h = parse_header(header_text)?;
    let payload = &bytes[split + 2..];

    let ty = h.ty.ok_or_else(|| malformed("missing type"))?;
    h.dimension.ok_or_else(|| malformed("missing dimension"))?;
    let dims = h.sizes.ok_or_else(|| malformed("missing sizes"))?;
    let encoding = h.encoding.ok_or_else(|| malformed("missing encoding"))?;
    if ty.bytes() > 1 && h.endian_little.is_none() {
        return Err(malformed("missing endian for multi-byte type"));
    }
    let spacing = h.spacing.unwrap_or([1.0, 1.0, 1.0]);
    let orientation = h.orientation.unwrap_or(Orientation::Hfs);
    let geom = Geometry::new(dims, spacing, orientation).map_err(|e| malformed(format!("invalid geometry: {e}")))?;

    let raw = match encoding {
        Encoding::Raw => payload.to_vec(),
        Encoding::Gzip => {
            let mut out = Vec::new();
            GzDecoder::new(payload)
                .read_to_end(&mut out)
                .map_err(|e| malformed(format!("gzip payload: {e}")))?;
            out
        }
    };
    let expected = geom.len() * ty.bytes();
    if raw.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            found: raw.len(),
        });
    }

    match ty {
        NrrdType::Uint8 => {
            if raw.iter().any(|&v| v > 1) {
                return Err(Error::NonBinaryMaskValues);
            }
            Ok(NrrdImage::Mask(MaskVolume::new(geom, raw)?))
        }
        NrrdType::Int16 => {
            let data = raw
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect();
            let kind = h.kind.unwrap_or(VolumeKind::Raw);
            Ok(NrrdImage::Volume(Volume::with_sample_type(
                geom,
                kind,
                SampleType::I16,
                data,
            )?))
        }
        NrrdType::Float32 => {
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let kind = h.kind.unwrap_or(VolumeKind::Hu);
            Ok(NrrdImage::Volume(Volume::with_sample_type(
                geom,
                kind,
                SampleType::F32,
                data,
            )?))
        }
    }
}

pub(crate) fn encode_nrrd(img: &NrrdImage, encoding: Encoding) -> Result<Vec<u8>> {
    let (geom, ty, kind, payload) = match img {
        NrrdImage::Mask(m) => (m.geometry(), NrrdType::Uint8, None, m.data().to_vec()),
        NrrdImage::Volume(v) => match v.sample_type() {
            SampleType::I16 => (
                v.geometry(),
                NrrdType::Int16,
                Some(v.kind()),
                v.data().iter().flat_map(|&s| (s as i16).to_le_bytes()).collect(),
            ),
            SampleType::F32 => (
                v.geometry(),
                NrrdType::Float32,
                Some(v.kind()),
                v.data().iter().flat_map(|&s| s.to_le_bytes()).collect(),
            ),
        },
    };
    let [sx, sy, sz] = geom.spacing;
    let [nx, ny, nz] = geom.dims;
    let mut out = String::new();
    out.push_str("NRRD0005\n");
    out.push_str("# Complete NRRD file format specification at:\n");
    out.push_str("# http://teem.sourceforge.net/nrrd/format.html\n");
    out.push_str(&format!("type: {}\n", ty.name()));
    out.push_str("dimension: 3\n");
    out.push_str("space: left-posterior-superior\n");
    out.push_str(&format!("sizes: {nx} {ny} {nz}\n"));
    out.push_str(&format!("space directions: ({sx:?},0,0) (0,{sy:?},0) (0,0,{sz:?})\n"));
    out.push_str("kinds: domain domain domain\n");
    if ty.bytes() > 1 {
        out.push_str("endian: little\n");
    }
    out.push_str(&format!("encoding: {}\n", encoding.as_str()));
    out.push_str(&format!("{ORIENTATION_KEY}:={}\n", geom.orientation.code()));
    if let Some(kind) = kind {
        out.push_str(&format!("{KIND_KEY}:={}\n", kind.as_str()));
    }
    out.push('\n');

    let mut bytes = out.into_bytes();
    match encoding {
        Encoding::Raw => bytes.extend_from_slice(&payload),
        Encoding::Gzip => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&payload)
                .and_then(|_| enc.finish())
                .map(|z| bytes.extend_from_slice(&z))
                .map_err(|e| Error::io("<gzip>", e))?;
        }
    }
    Ok(bytes)
}

/// Writes a volume or mask; masks are stored as uint8.
pub fn write_nrrd(img: impl Into<NrrdImage>, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nrrd(&img.into(), encoding)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
