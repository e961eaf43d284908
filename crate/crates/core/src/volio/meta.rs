use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition group of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "LD")]
    Ld,
    #[serde(rename = "SD")]
    Sd,
    #[serde(rename = "CTA")]
    Cta,
    #[serde(rename = "AN")]
    An,
    #[serde(rename = "ANNC")]
    Annc,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Ld, Group::Sd, Group::Cta, Group::An, Group::Annc];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Ld => "LD",
            Group::Sd => "SD",
            Group::Cta => "CTA",
            Group::An => "AN",
            Group::Annc => "ANNC",
        }
    }

    /// 1 for aneurysm groups, 0 for controls.
    pub fn label(self) -> u8 {
        matches!(self, Group::An | Group::Annc) as u8
    }

    pub fn contrast(self) -> bool {
        matches!(self, Group::Cta | Group::An)
    }

    pub fn low_dose(self) -> bool {
        self == Group::Ld
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown group {s:?}")))
    }
}

/// Sidecar metadata standing in for the DICOM rescale tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanMeta {
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub group: Group,
    pub label: u8,
}

impl ScanMeta {
    pub fn read(path: impl AsRef<Path>) -> Result<ScanMeta> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: ScanMeta = serde_json::from_str(&text)?;
        if meta.label > 1 {
            return Err(Error::InvalidVolume(format!(
                "label must be 0 or 1, got {}",
                meta.label
            )));
        }
        Ok(meta)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// `<dir>/<id>.meta.json`
    pub fn sidecar_path(scan_path: &Path) -> std::path::PathBuf {
        let name = scan_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stem = name.strip_suffix(".nrrd").unwrap_or(&name);
        scan_path.with_file_name(format!("{stem}.meta.json"))
    }
}
