//! Patient-level inference: preprocessing, stage-one slice filtering, the
//! minimum-infection rule, stage-two slice scoring and average voting.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelBundle, POSITIVE};
use crate::tensor::Tensor;

pub const DEFAULT_CUTOFF: f64 = 0.5;
pub const DEFAULT_INFECTION_THRESHOLD: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "COVID")]
    Covid,
    #[serde(rename = "CAP")]
    Cap,
    Normal,
    Unknown,
}

impl Label {
    /// `Some(true)` for COVID, `Some(false)` for the other known classes.
    pub fn is_covid(self) -> Option<bool> {
        match self {
            Label::Covid => Some(true),
            Label::Cap | Label::Normal => Some(false),
            Label::Unknown => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    /// Position of the slice in the original (unfiltered) volume.
    pub index: usize,
    /// `[H, W]` intensities; in `[0, 1]` after preprocessing.
    pub pixels: Tensor,
    pub lung_mask: Option<Tensor>,
    pub infection_label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub patient_id: String,
    pub slices: Vec<SliceRecord>,
    pub label: Label,
}

impl Volume {
    /// Checks the slice invariants: at least one slice, all `[H, W]` with a
    /// common size, masks matching their slice.
    pub fn validate(&self) -> Result<()> {
        let id = &self.patient_id;
        let first = self
            .slices
            .first()
            .ok_or_else(|| Error::Data(format!("patient {id}: volume has no slices")))?;
        let shape = first.pixels.shape();
        if shape.len() != 2 {
            return Err(Error::Data(format!("patient {id}: slices must be 2-D, got {shape:?}")));
        }
        for s in &self.slices {
            if s.pixels.shape() != shape {
                return Err(Error::Data(format!(
                    "patient {id}: slice {} has shape {:?}, expected {shape:?}",
                    s.index,
                    s.pixels.shape()
                )));
            }
            if let Some(m) = &s.lung_mask {
                if m.shape() != shape {
                    return Err(Error::Data(format!("patient {id}: mask of slice {} has wrong shape", s.index)));
                }
            }
        }
        Ok(())
    }

    pub fn slice_size(&self) -> Option<(usize, usize)> {
        self.slices.first().map(|s| (s.pixels.shape()[0], s.pixels.shape()[1]))
    }

    /// Slices stacked as a model batch `[N, 1, H, W]`.
    pub fn batch(&self) -> Result<Tensor> {
        stack(self.slices.iter().map(|s| &s.pixels))
    }
}

fn stack<'a>(planes: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = (0, 0);
    for p in planes {
        hw = (p.shape()[0], p.shape()[1]);
        data.extend_from_slice(p.data());
        n += 1;
    }
    Tensor::new(&[n, 1, hw.0, hw.1], data)
}

/// Min-max normalisation to `[0, 1]`; a constant plane maps to zeros.
pub fn normalize_min_max(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(t.shape())
    }
}

/// Area-average downsampling of `[H, W]` by integer factors.
pub fn downsample_area(t: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    if out.0 == 0 || out.1 == 0 || h % out.0 != 0 || w % out.1 != 0 {
        return Err(Error::Config(format!(
            "cannot area-downsample {h}x{w} to {}x{}: sizes must divide evenly",
            out.0, out.1
        )));
    }
    let (fy, fx) = (h / out.0, w / out.1);
    if fy == 1 && fx == 1 {
        return Ok(t.clone());
    }
    let d = t.data();
    let inv = 1.0 / (fy * fx) as f64;
    let mut res = Vec::with_capacity(out.0 * out.1);
    for oy in 0..out.0 {
        for ox in 0..out.1 {
            let mut acc = 0.0;
            for y in oy * fy..(oy + 1) * fy {
                acc += d[y * w + ox * fx..y * w + (ox + 1) * fx].iter().sum::<f64>();
            }
            res.push(acc * inv);
        }
    }
    Tensor::new(&[out.0, out.1], res)
}

/// Drops lung-free slices, zeroes the background, normalises each slice to
/// `[0, 1]` and downsamples to `size`. Masks are downsampled by majority.
pub fn preprocess(v: &Volume, size: (usize, usize)) -> Result<Volume> {
    v.validate()?;
    let mut slices = Vec::with_capacity(v.slices.len());
    for s in &v.slices {
        let masked = match &s.lung_mask {
            Some(m) if m.data().iter().all(|&x| x == 0.0) => continue,
            Some(m) => s.pixels.zip_map(m, |p, m| if m != 0.0 { p } else { 0.0 }),
            None => s.pixels.clone(),
        };
        let pixels = downsample_area(&normalize_min_max(&masked), size)?;
        let lung_mask = match &s.lung_mask {
            Some(m) => {
                let binary = m.map(|x| if x != 0.0 { 1.0 } else { 0.0 });
                Some(downsample_area(&binary, size)?.map(|x| if x >= 0.5 { 1.0 } else { 0.0 }))
            }
            None => None,
        };
        slices.push(SliceRecord {
            index: s.index,
            pixels,
            lung_mask,
            infection_label: s.infection_label,
        });
    }
    if slices.is_empty() {
        return Err(Error::Data(format!(
            "patient {}: no slices with lung regions remain",
            v.patient_id
        )));
    }
    Ok(Volume {
        patient_id: v.patient_id.clone(),
        slices,
        label: v.label,
    })
}

/// Anything that maps slices `[N, 1, H, W]` to class lengths `[N, 2]`.
pub trait SliceClassifier {
    fn input_size(&self) -> (usize, usize);
    fn class_lengths(&self, slices: &Tensor) -> Result<Tensor>;
}

impl SliceClassifier for ModelBundle {
    fn input_size(&self) -> (usize, usize) {
        self.spec.input_size
    }

    fn class_lengths(&self, slices: &Tensor) -> Result<Tensor> {
        self.predict(slices)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Infected capsule longer than the non-infected one.
    Argmax,
    /// Infected capsule length above a fixed value.
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityMode {
    /// Positive class-capsule length as is.
    Raw,
    /// Positive length divided by the sum of both lengths (0.5 if both are 0).
    Normalized,
}

/// Denominator of the infected-slice fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionBase {
    /// Slices that survive lung-presence filtering.
    Surviving,
    /// Every slice of the raw volume.
    AllSlices,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub cutoff: f64,
    pub infection_threshold: f64,
    pub probability_mode: ProbabilityMode,
    pub selection: SelectionRule,
    pub fraction_base: FractionBase,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cutoff: DEFAULT_CUTOFF,
            infection_threshold: DEFAULT_INFECTION_THRESHOLD,
            probability_mode: ProbabilityMode::Raw,
            selection: SelectionRule::Argmax,
            fraction_base: FractionBase::Surviving,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.cutoff) || !unit(self.infection_threshold) {
            return Err(Error::Config("cutoff and infection threshold must lie in [0, 1]".into()));
        }
        if let SelectionRule::Threshold(t) = self.selection {
            if !unit(t) {
                return Err(Error::Config("selection threshold must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

pub fn positive_probability(lengths: [f64; 2], mode: ProbabilityMode) -> f64 {
    let [pos, neg] = lengths;
    match mode {
        ProbabilityMode::Raw => pos,
        ProbabilityMode::Normalized if pos + neg > 0.0 => pos / (pos + neg),
        ProbabilityMode::Normalized => 0.5,
    }
}

fn row(t: &Tensor, i: usize) -> [f64; 2] {
    [t.data()[2 * i + POSITIVE], t.data()[2 * i + 1 - POSITIVE]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    /// Positions (into `Volume::slices`) of the selected slices.
    pub selected: Vec<usize>,
    /// Class lengths `[N, 2]` for every slice.
    pub lengths: Tensor,
    pub infected_fraction: f64,
}

/// Runs stage one over every slice of a preprocessed volume.
pub fn stage1_filter(v: &Volume, m1: &dyn SliceClassifier, rule: SelectionRule) -> Result<Stage1Output> {
    if v.slices.is_empty() {
        return Err(Error::Data(format!("patient {}: empty volume", v.patient_id)));
    }
    let lengths = m1.class_lengths(&v.batch()?)?;
    if lengths.shape() != [v.slices.len(), 2] {
        return Err(Error::Shape {
            op: "stage1_filter",
            expected: vec![v.slices.len(), 2],
            got: lengths.shape().to_vec(),
        });
    }
    let selected: Vec<usize> = (0..v.slices.len())
        .filter(|&i| {
            let [pos, neg] = row(&lengths, i);
            match rule {
                SelectionRule::Argmax => pos > neg,
                SelectionRule::Threshold(t) => pos > t,
            }
        })
        .collect();
    let infected_fraction = selected.len() as f64 / v.slices.len() as f64;
    Ok(Stage1Output {
        selected,
        lengths,
        infected_fraction,
    })
}

/// True when too few slices are infected and the patient is short-circuited
/// to non-COVID. The comparison is strict.
pub fn three_percent_rule(infected_fraction: f64, threshold: f64) -> bool {
    infected_fraction < threshold
}

/// Average vote over slice probabilities.
pub fn vote(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("vote over an empty slice list".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("slice probability {p} outside [0, 1]")));
    }
    // summing in sorted order makes the result independent of slice order
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    // guard against rounding just outside the observed range
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    Ok(mean.clamp(lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "COVID")]
    Covid,
    #[serde(rename = "non-COVID")]
    NonCovid,
}

/// COVID iff `p > cutoff`.
pub fn apply_cutoff(p: f64, cutoff: f64) -> Decision {
    if p > cutoff {
        Decision::Covid
    } else {
        Decision::NonCovid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    Vote,
    ThreePercentRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProb {
    /// Index in the raw volume.
    pub slice: usize,
    pub p_infected: f64,
    pub selected: bool,
    /// Stage-two probability; present only for slices scored by stage two.
    pub p_covid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientVerdict {
    pub patient_id: String,
    pub label: Label,
    pub slice_probs: Vec<SliceProb>,
    pub infected_fraction: f64,
    /// Voted probability; 0 when stage two is skipped or nothing was selected.
    pub patient_prob: f64,
    pub decision: Decision,
    pub decision_rule: DecisionRule,
    pub cutoff_used: f64,
    pub threshold_used: f64,
}

impl PatientVerdict {
    /// The bookkeeping invariant linking rule, fraction, probability and decision.
    pub fn is_consistent(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.infected_fraction) || !unit(self.patient_prob) {
            return false;
        }
        match self.decision_rule {
            DecisionRule::ThreePercentRule => {
                self.decision == Decision::NonCovid
                    && self.infected_fraction < self.threshold_used
                    && self.slice_probs.iter().all(|s| s.p_covid.is_none())
            }
            DecisionRule::Vote => {
                self.infected_fraction >= self.threshold_used
                    && self.decision == apply_cutoff(self.patient_prob, self.cutoff_used)
            }
        }
    }
}

/// Full two-stage prediction for one raw volume.
pub fn predict_patient(
    raw: &Volume,
    m1: &dyn SliceClassifier,
    m2: &dyn SliceClassifier,
    cfg: &PipelineConfig,
) -> Result<PatientVerdict> {
    cfg.validate()?;
    if m1.input_size() != m2.input_size() {
        return Err(Error::Config(format!(
            "stage input sizes differ: {:?} vs {:?}",
            m1.input_size(),
            m2.input_size()
        )));
    }
    let v = preprocess(raw, m1.input_size())?;
    let s1 = stage1_filter(&v, m1, cfg.selection)?;
    let infected_fraction = match cfg.fraction_base {
        FractionBase::Surviving => s1.infected_fraction,
        FractionBase::AllSlices => s1.selected.len() as f64 / raw.slices.len() as f64,
    };
    let mut slice_probs: Vec<SliceProb> = v
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| SliceProb {
            slice: s.index,
            p_infected: row(&s1.lengths, i)[0],
            selected: false,
            p_covid: None,
        })
        .collect();
    for &i in &s1.selected {
        slice_probs[i].selected = true;
    }
    let mut verdict = PatientVerdict {
        patient_id: raw.patient_id.clone(),
        label: raw.label,
        slice_probs,
        infected_fraction,
        patient_prob: 0.0,
        decision: Decision::NonCovid,
        decision_rule: DecisionRule::ThreePercentRule,
        cutoff_used: cfg.cutoff,
        threshold_used: cfg.infection_threshold,
    };
    if three_percent_rule(infected_fraction, cfg.infection_threshold) {
        return Ok(verdict);
    }
    verdict.decision_rule = DecisionRule::Vote;
    if !s1.selected.is_empty() {
        let batch = stack(s1.selected.iter().map(|&i| &v.slices[i].pixels))?;
        let lengths = m2.class_lengths(&batch)?;
        if lengths.shape() != [s1.selected.len(), 2] {
            return Err(Error::Shape {
                op: "stage two",
                expected: vec![s1.selected.len(), 2],
                got: lengths.shape().to_vec(),
            });
        }
        let mut probs = Vec::with_capacity(s1.selected.len());
        for (k, &i) in s1.selected.iter().enumerate() {
            let p = positive_probability(row(&lengths, k), cfg.probability_mode);
            verdict.slice_probs[i].p_covid = Some(p);
            probs.push(p);
        }
        verdict.patient_prob = vote(&probs)?;
    }
    verdict.decision = apply_cutoff(verdict.patient_prob, cfg.cutoff);
    Ok(verdict)
}

/// Writes one JSON record per line.
pub fn write_verdicts(path: impl AsRef<Path>, verdicts: &[PatientVerdict]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for v in verdicts {
        serde_json::to_writer(&mut out, v).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
