//! Synthetic chest-CT-like volumes with known lesion geometry.
//!
//! Each slice is a soft-tissue body ellipse holding two lung ellipses with
//! bright vessels and noise. COVID-like volumes carry faint, soft-edged
//! ground-glass blobs near the lateral lung periphery; CAP-like volumes carry
//! dense, sharp-edged blobs near the lung centre; normal volumes carry none.
//! Infected slices form one contiguous run. Optional lung-free slices at
//! both ends have empty lung masks.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mask_from_pgm, pixels_from_pgm, write_manifest, HuWindow, Manifest, PatientEntry, Pgm, PixelEncoding};
use super::{HU_OFFSET, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::pipeline::{Label, SliceRecord, Volume};
use crate::tensor::{SeededRng, Tensor};

/// Smallest infected share of an infected volume.
pub const MIN_INFECTED_FRACTION: f64 = 0.07;

const BODY_HU: f64 = 40.0;
const AIR_HU: f64 = -1000.0;
const LUNG_HU: f64 = -850.0;
/// Vessel cores above the top of the lung window, so every lung slice
/// saturates and per-slice normalisation does not depend on lesions.
const VESSEL_HU: f64 = 1000.0;
const GGO_HU: f64 = -480.0;
const CONSOLIDATION_HU: f64 = -80.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub patients_per_class: usize,
    pub slices_per_volume: usize,
    pub image_size: usize,
    /// Lung-free slices at each end of every volume.
    pub lung_free_end_slices: usize,
    /// Range of the infected-slice share of COVID/CAP volumes.
    pub infected_fraction: (f64, f64),
    pub lesions_per_slice: (usize, usize),
    /// Lesion radius range in pixels.
    pub lesion_radius: (f64, f64),
    pub noise_hu: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            patients_per_class: 24,
            slices_per_volume: 20,
            image_size: 32,
            lung_free_end_slices: 1,
            infected_fraction: (0.2, 0.5),
            lesions_per_slice: (1, 3),
            lesion_radius: (2.0, 3.5),
            noise_hu: 15.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("image size {} is below the minimum of 16", self.image_size));
        }
        if self.slices_per_volume <= 2 * self.lung_free_end_slices {
            return bad("volumes need at least one slice with lungs".into());
        }
        let (flo, fhi) = self.infected_fraction;
        if !(MIN_INFECTED_FRACTION..=1.0).contains(&flo) || !(flo..=1.0).contains(&fhi) {
            return bad(format!(
                "infected fraction range must lie within [{MIN_INFECTED_FRACTION}, 1] and be ordered"
            ));
        }
        let (llo, lhi) = self.lesions_per_slice;
        if llo == 0 || llo > lhi {
            return bad("lesion count range must be ordered and start at 1 or more".into());
        }
        let (rlo, rhi) = self.lesion_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("lesion radius range must be positive and ordered".into());
        }
        if rhi > 0.16 * self.image_size as f64 {
            return bad(format!(
                "image size {} too small for lesion radius {rhi} (max {:.2})",
                self.image_size,
                0.16 * self.image_size as f64
            ));
        }
        if !(self.noise_hu >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }

    fn lung_slices(&self) -> usize {
        self.slices_per_volume - 2 * self.lung_free_end_slices
    }
}

/// One generated patient, with integer HU slices and ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPatient {
    pub patient_id: String,
    pub label: Label,
    pub size: usize,
    pub hu: Vec<Vec<i32>>,
    pub lung: Vec<Vec<bool>>,
    pub lesion: Vec<Vec<bool>>,
    pub infected: Vec<bool>,
}

fn bool_pgm(size: usize, m: &[bool]) -> Pgm {
    let samples = m.iter().map(|&b| if b { 255 } else { 0 }).collect();
    Pgm::new(size, size, 255, samples).expect("mask dimensions")
}

impl SynthPatient {
    pub fn slice_pgm(&self, i: usize) -> Pgm {
        let samples = self.hu[i].iter().map(|&h| (h + HU_OFFSET) as u16).collect();
        Pgm::new(self.size, self.size, u16::MAX, samples).expect("slice dimensions")
    }

    pub fn lung_pgm(&self, i: usize) -> Pgm {
        bool_pgm(self.size, &self.lung[i])
    }

    pub fn lesion_pgm(&self, i: usize) -> Pgm {
        bool_pgm(self.size, &self.lesion[i])
    }

    pub fn lesion_mask(&self, i: usize) -> Tensor {
        mask_from_pgm(&self.lesion_pgm(i)).expect("mask dimensions")
    }

    /// The volume exactly as `load_dataset` reads it back from disk.
    pub fn volume(&self, window: HuWindow) -> Result<Volume> {
        let slices = (0..self.hu.len())
            .map(|i| {
                Ok(SliceRecord {
                    index: i,
                    pixels: pixels_from_pgm(&self.slice_pgm(i), PixelEncoding::Pgm16Hu, window)?,
                    lung_mask: Some(mask_from_pgm(&self.lung_pgm(i))?),
                    infection_label: Some(self.infected[i]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Volume {
            patient_id: self.patient_id.clone(),
            slices,
            label: self.label,
        })
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn rho2(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)
    }
}

/// Lateral direction of each lung: −1 for the left-hand one, +1 otherwise.
fn lungs(size: f64, z_scale: f64) -> [(Ellipse, f64); 2] {
    let lung = |cx: f64| Ellipse {
        cy: 0.5 * size,
        cx,
        ry: 0.34 * size * z_scale,
        rx: 0.17 * size * z_scale.sqrt(),
    };
    [(lung(0.29 * size), -1.0), (lung(0.71 * size), 1.0)]
}

fn lesion_style(label: Label) -> Option<(f64, f64, bool)> {
    // (target HU, radial position range start, peripheral?)
    match label {
        Label::Covid => Some((GGO_HU, 0.55, true)),
        Label::Cap => Some((CONSOLIDATION_HU, 0.0, false)),
        Label::Normal | Label::Unknown => None,
    }
}

fn render_slice(
    cfg: &SynthConfig,
    label: Label,
    z: Option<f64>,
    infected: bool,
    rng: &mut SeededRng,
) -> (Vec<i32>, Vec<bool>, Vec<bool>) {
    let n = cfg.image_size;
    let s = n as f64;
    let body = Ellipse {
        cy: 0.5 * s,
        cx: 0.5 * s,
        ry: 0.45 * s,
        rx: 0.47 * s,
    };
    let mut hu = vec![0.0; n * n];
    let mut lung = vec![false; n * n];
    let mut lesion = vec![false; n * n];
    let centre = |i: usize| ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
    for (i, h) in hu.iter_mut().enumerate() {
        let (y, x) = centre(i);
        *h = if body.rho2(y, x) <= 1.0 { BODY_HU } else { AIR_HU };
    }
    if let Some(z) = z {
        let geo = lungs(s, 0.8 + 0.2 * (PI * z).sin());
        for (i, h) in hu.iter_mut().enumerate() {
            let (y, x) = centre(i);
            if geo.iter().any(|(e, _)| e.rho2(y, x) <= 1.0) {
                *h = LUNG_HU;
                lung[i] = true;
            }
        }
        // vessels: one-pixel bright dots
        for (e, _) in &geo {
            for _ in 0..3 {
                let (rho, phi) = (0.75 * rng.uniform(0.0, 1.0).sqrt(), rng.uniform(0.0, 2.0 * PI));
                let snap = |v: f64| v.floor() + 0.5;
                let (vy, vx) = (snap(e.cy + rho * e.ry * phi.sin()), snap(e.cx + rho * e.rx * phi.cos()));
                for (i, h) in hu.iter_mut().enumerate() {
                    let (y, x) = centre(i);
                    let d2 = (y - vy).powi(2) + (x - vx).powi(2);
                    if lung[i] && d2 < 4.0 {
                        *h += VESSEL_HU * (-d2 / (2.0 * 0.1)).exp();
                    }
                }
            }
        }
        if let (true, Some((target, rho_lo, peripheral))) = (infected, lesion_style(label)) {
            let (llo, lhi) = cfg.lesions_per_slice;
            let count = llo + rng.below(lhi - llo + 1);
            let mut placed = 0;
            let mut attempts = 0;
            while placed < count && attempts < 50 * count {
                attempts += 1;
                let (e, side) = &geo[rng.below(2)];
                let r = rng.uniform(cfg.lesion_radius.0, cfg.lesion_radius.1);
                let target = target + rng.uniform(-40.0, 40.0);
                let (ly, lx) = if peripheral {
                    let rho = rng.uniform(rho_lo, 0.8);
                    let phi = rng.uniform(-1.2, 1.2);
                    (e.cy + rho * e.ry * phi.sin(), e.cx + side * rho * e.rx * phi.cos())
                } else {
                    let rho = rng.uniform(0.0, 0.3);
                    let phi = rng.uniform(0.0, 2.0 * PI);
                    (e.cy + rho * e.ry * phi.sin(), e.cx + rho * e.rx * phi.cos())
                };
                let mut any = false;
                for i in 0..n * n {
                    if !lung[i] {
                        continue;
                    }
                    let (y, x) = centre(i);
                    let d = ((y - ly).powi(2) + (x - lx).powi(2)).sqrt();
                    let w = if peripheral {
                        let sigma = r / 1.4;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    } else {
                        1.0 / (1.0 + ((d - r) / 0.5).exp())
                    };
                    if w > 1e-3 {
                        hu[i] += w * (target - hu[i]);
                    }
                    if d <= r {
                        lesion[i] = true;
                        any = true;
                    }
                }
                if any {
                    placed += 1;
                }
            }
        }
    }
    let hu = hu
        .into_iter()
        .map(|h| (h + cfg.noise_hu * rng.normal()).round().clamp(-1024.0, 3071.0) as i32)
        .collect();
    (hu, lung, lesion)
}

/// One volume with exactly `infected` infected slices (zero for normal
/// patients), placed as a contiguous run among the lung slices.
pub fn synth_volume(
    label: Label,
    patient_id: &str,
    infected: usize,
    cfg: &SynthConfig,
    rng: &mut SeededRng,
) -> Result<SynthPatient> {
    cfg.validate()?;
    let n_lung = cfg.lung_slices();
    let end = cfg.lung_free_end_slices;
    let infected = if lesion_style(label).is_some() { infected } else { 0 };
    if infected > n_lung {
        return Err(Error::Config(format!(
            "{infected} infected slices do not fit in {n_lung} lung slices"
        )));
    }
    let start = end + rng.below(n_lung - infected + 1);
    let mut p = SynthPatient {
        patient_id: patient_id.to_string(),
        label,
        size: cfg.image_size,
        hu: Vec::new(),
        lung: Vec::new(),
        lesion: Vec::new(),
        infected: Vec::new(),
    };
    for i in 0..cfg.slices_per_volume {
        let z = (end..end + n_lung)
            .contains(&i)
            .then(|| (i - end) as f64 / n_lung.max(2) as f64 + 0.5 / n_lung as f64);
        let is_inf = (start..start + infected).contains(&i);
        let (hu, lung, lesion) = render_slice(cfg, label, z, is_inf, rng);
        // a lesion that missed the lungs entirely leaves the slice uninfected
        p.infected.push(lesion.iter().any(|&b| b));
        p.hu.push(hu);
        p.lung.push(lung);
        p.lesion.push(lesion);
    }
    Ok(p)
}

const CLASSES: [(Label, &str); 3] = [(Label::Covid, "covid"), (Label::Cap, "cap"), (Label::Normal, "normal")];

/// Generates the whole dataset in memory, class by class.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthPatient>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let total = cfg.slices_per_volume;
    let min_k = ((MIN_INFECTED_FRACTION * total as f64) - 1e-9).ceil() as usize;
    let mut out = Vec::new();
    for (label, prefix) in CLASSES {
        for k in 0..cfg.patients_per_class {
            let frac = rng.uniform(cfg.infected_fraction.0, cfg.infected_fraction.1);
            let infected = ((frac * total as f64).round() as usize).clamp(min_k.max(1), cfg.lung_slices());
            out.push(synth_volume(label, &format!("{prefix}_{k:03}"), infected, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPatient {
    pub patient_id: String,
    pub label: Label,
    pub infected: Vec<bool>,
    pub lesion_masks: Vec<String>,
    pub lesion_pixels: Vec<usize>,
}

/// Sidecar written next to the manifest of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format_version: u32,
    pub config: SynthConfig,
    pub patients: Vec<GroundTruthPatient>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub covid: usize,
    pub cap: usize,
    pub normal: usize,
    pub slices: usize,
    pub infected_slices: usize,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} patients (COVID {}, CAP {}, normal {}), {} slices, {} infected",
            self.covid + self.cap + self.normal,
            self.covid,
            self.cap,
            self.normal,
            self.slices,
            self.infected_slices
        )
    }
}

/// Writes `manifest.json`, `ground_truth.json` and one directory of PGM
/// files per patient under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<SynthSummary> {
    let out = out.as_ref();
    let patients = synthesize(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest {
        format_version: MANIFEST_VERSION,
        patients: Vec::new(),
    };
    let mut truth = GroundTruth {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        patients: Vec::new(),
    };
    let mut summary = SynthSummary::default();
    for p in &patients {
        let dir = out.join(&p.patient_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = |kind: &str, i: usize| format!("{}/{kind}_{i:03}.pgm", p.patient_id);
        let n = p.hu.len();
        let (mut slices, mut masks, mut lesions) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let (s, m, l) = (name("slice", i), name("mask", i), name("lesion", i));
            p.slice_pgm(i).write(out.join(&s))?;
            p.lung_pgm(i).write(out.join(&m))?;
            p.lesion_pgm(i).write(out.join(&l))?;
            slices.push(s);
            masks.push(m);
            lesions.push(l);
        }
        manifest.patients.push(PatientEntry {
            patient_id: p.patient_id.clone(),
            label: p.label,
            encoding: PixelEncoding::Pgm16Hu.as_str().into(),
            slices,
            masks: Some(masks),
            infection: Some(p.infected.clone()),
        });
        truth.patients.push(GroundTruthPatient {
            patient_id: p.patient_id.clone(),
            label: p.label,
            infected: p.infected.clone(),
            lesion_masks: lesions,
            lesion_pixels: p.lesion.iter().map(|m| m.iter().filter(|&&b| b).count()).collect(),
        });
        match p.label {
            Label::Covid => summary.covid += 1,
            Label::Cap => summary.cap += 1,
            _ => summary.normal += 1,
        }
        summary.slices += n;
        summary.infected_slices += p.infected.iter().filter(|&&b| b).count();
    }
    write_manifest(out.join("manifest.json"), &manifest)?;
    let gt_path = out.join("ground_truth.json");
    let mut text = serde_json::to_vec_pretty(&truth).map_err(|e| Error::json(&gt_path, e))?;
    text.push(b'\n');
    std::fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;
    Ok(summary)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(path, e))
}
