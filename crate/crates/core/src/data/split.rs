use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Label, Volume};
use crate::tensor::SeededRng;

/// Patient-level split fractions. Validation and test sizes are rounded
/// down per stratum and the remainder goes to training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.1,
            test: 0.3,
            seed: 0,
            stratify: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Indices into the volume list, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn stratum(l: Label) -> u8 {
    match l {
        Label::Covid => 0,
        Label::Cap => 1,
        Label::Normal => 2,
        Label::Unknown => 3,
    }
}

pub fn split(volumes: &[Volume], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, v) in volumes.iter().enumerate() {
        let key = if spec.stratify { stratum(v.label) } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    if spec.stratify && !volumes.is_empty() {
        let has = |pred: fn(Label) -> bool| volumes.iter().any(|v| pred(v.label));
        if !has(|l| l == Label::Covid) || !has(|l| l.is_covid() == Some(false)) {
            return Err(Error::Data(
                "stratified split needs at least one COVID and one non-COVID patient".into(),
            ));
        }
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut out = Split::default();
    for (_, mut idx) in groups {
        rng.shuffle(&mut idx);
        let n = idx.len() as f64;
        // the small epsilon keeps exact products such as 10 × 0.3 from flooring to 2
        let n_val = (n * spec.val + 1e-9).floor() as usize;
        let n_test = (n * spec.test + 1e-9).floor() as usize;
        out.val.extend_from_slice(&idx[..n_val]);
        out.test.extend_from_slice(&idx[n_val..n_val + n_test]);
        out.train.extend_from_slice(&idx[n_val + n_test..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
