//! Dataset ingestion: JSON manifest plus PGM slice files, HU windowing,
//! patient-level splits and the synthetic volume generator.
//!
//! Manifest schema (paths relative to the manifest's directory):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "patients": [{
//!     "patient_id": "covid_000",
//!     "label": "COVID",
//!     "encoding": "pgm16_hu",
//!     "slices": ["covid_000/slice_000.pgm", "..."],
//!     "masks": ["covid_000/mask_000.pgm", "..."],
//!     "infection": [false, true, "..."]
//!   }]
//! }
//! ```
//!
//! `pgm8` slices are read as `sample / maxval`; `pgm16_hu` samples store
//! `HU + 32768` and are windowed to `[0, 1]`. Mask pixels are binarised
//! (non-zero = lung).

mod pgm;
mod split;
mod synth;

pub use pgm::{to_u8_samples, Pgm};
pub use split::{split, Split, SplitSpec};
pub use synth::{
    generate_synthetic, load_ground_truth, synth_volume, synthesize, GroundTruth, GroundTruthPatient, SynthConfig,
    SynthPatient, SynthSummary,
};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Label, SliceRecord, Volume};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
/// Offset added to Hounsfield units in 16-bit files.
pub const HU_OFFSET: i32 = 32768;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub patients: Vec<PatientEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub patient_id: String,
    pub label: Label,
    /// `pgm8` or `pgm16_hu`.
    pub encoding: String,
    pub slices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infection: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelEncoding {
    Pgm8,
    Pgm16Hu,
}

impl PixelEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            PixelEncoding::Pgm8 => "pgm8",
            PixelEncoding::Pgm16Hu => "pgm16_hu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pgm8" => Some(PixelEncoding::Pgm8),
            "pgm16_hu" => Some(PixelEncoding::Pgm16Hu),
            _ => None,
        }
    }
}

/// Display window in Hounsfield units; the default is the lung window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HuWindow {
    pub center: f64,
    pub width: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow {
            center: -600.0,
            width: 1200.0,
        }
    }
}

/// Clamps to `[center − width/2, center + width/2]` and maps affinely to `[0, 1]`.
pub fn hu_window(raw: &Tensor, center: f64, width: f64) -> Result<Tensor> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("window width {width} must be positive")));
    }
    let lo = center - width / 2.0;
    Ok(raw.map(|v| (v.clamp(lo, lo + width) - lo) / width))
}

/// Pixel tensor `[H, W]` for a decoded slice file.
pub fn pixels_from_pgm(p: &Pgm, encoding: PixelEncoding, window: HuWindow) -> Result<Tensor> {
    let shape = [p.height, p.width];
    match encoding {
        PixelEncoding::Pgm8 => {
            let m = p.maxval as f64;
            Tensor::new(&shape, p.samples.iter().map(|&s| s as f64 / m).collect())
        }
        PixelEncoding::Pgm16Hu => {
            let hu = p.samples.iter().map(|&s| (s as i32 - HU_OFFSET) as f64).collect();
            hu_window(&Tensor::new(&shape, hu)?, window.center, window.width)
        }
    }
}

pub fn mask_from_pgm(p: &Pgm) -> Result<Tensor> {
    let data = p.samples.iter().map(|&s| if s != 0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[p.height, p.width], data)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported manifest version {} (expected {MANIFEST_VERSION})",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_vec_pretty(m).map_err(|e| Error::json(path, e))?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checks list lengths, the encoding name and file existence for one entry.
fn check_entry(e: &PatientEntry, base: &Path) -> Result<PixelEncoding> {
    let n = e.slices.len();
    let mismatch = |what, got| Error::LengthMismatch {
        patient: e.patient_id.clone(),
        what,
        expected: n,
        got,
    };
    if let Some(m) = &e.masks {
        if m.len() != n {
            return Err(mismatch("mask list", m.len()));
        }
    }
    if let Some(l) = &e.infection {
        if l.len() != n {
            return Err(mismatch("infection label list", l.len()));
        }
    }
    let enc = PixelEncoding::parse(&e.encoding).ok_or_else(|| Error::UnknownEncoding {
        patient: e.patient_id.clone(),
        encoding: e.encoding.clone(),
    })?;
    for rel in e.slices.iter().chain(e.masks.iter().flatten()) {
        let p = base.join(rel);
        if !p.is_file() {
            return Err(Error::MissingFile {
                patient: e.patient_id.clone(),
                path: p,
            });
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("patient {}: no slices listed", e.patient_id)));
    }
    Ok(enc)
}

fn load_entry(e: &PatientEntry, base: &Path, window: HuWindow) -> Result<Volume> {
    let enc = check_entry(e, base)?;
    let mut slices = Vec::with_capacity(e.slices.len());
    for (i, rel) in e.slices.iter().enumerate() {
        let pixels = pixels_from_pgm(&Pgm::read(base.join(rel))?, enc, window)?;
        let lung_mask = match &e.masks {
            Some(m) => Some(mask_from_pgm(&Pgm::read(base.join(&m[i]))?)?),
            None => None,
        };
        slices.push(SliceRecord {
            index: i,
            pixels,
            lung_mask,
            infection_label: e.infection.as_ref().map(|l| l[i]),
        });
    }
    let v = Volume {
        patient_id: e.patient_id.clone(),
        slices,
        label: e.label,
    };
    v.validate()?;
    Ok(v)
}

/// Loads every patient of a manifest, in manifest order.
pub fn load_dataset(manifest: impl AsRef<Path>, window: HuWindow) -> Result<Vec<Volume>> {
    let manifest = manifest.as_ref();
    let m = read_manifest(manifest)?;
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    m.patients.par_iter().map(|e| load_entry(e, &base, window)).collect()
}
