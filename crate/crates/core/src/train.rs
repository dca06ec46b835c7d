//! Mini-batch training with the class-weighted margin loss and Adam, keeping
//! the parameters of the epoch with the lowest validation loss.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::{weighted_margin_loss, MarginLossParams};
use crate::error::{Error, Result};
use crate::models::{ModelBundle, POSITIVE};
use crate::nn::{adam_step, AdamState, Mode};
use crate::pipeline::{preprocess, stage1_filter, PipelineConfig, SliceClassifier, Volume};
use crate::tensor::{SeededRng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub margin: MarginLossParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            margin: MarginLossParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1 (nothing to select otherwise)".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalisation".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.margin.validate()
    }
}

/// Labelled slices of one size, stored row-major one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    pub size: (usize, usize),
    pub pixels: Vec<f64>,
    pub positive: Vec<bool>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.positive.iter().filter(|&&p| p).count();
        (pos, self.len() - pos)
    }

    fn from_planes(size: (usize, usize), planes: Vec<(&Tensor, bool)>) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * size.0 * size.1);
        let mut positive = Vec::with_capacity(planes.len());
        for (p, y) in planes {
            data.extend_from_slice(p.data());
            positive.push(y);
        }
        Ok(Examples {
            size,
            pixels: data,
            positive,
        })
    }

    pub fn from_images(images: &Tensor, positive: Vec<bool>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[0] != positive.len() {
            return Err(Error::Shape {
                op: "examples",
                expected: vec![positive.len(), 1, 0, 0],
                got: s.to_vec(),
            });
        }
        Ok(Examples {
            size: (s[2], s[3]),
            pixels: images.data().to_vec(),
            positive,
        })
    }

    /// All examples as `[N, 1, H, W]`; errors when empty.
    pub fn images(&self) -> Result<Tensor> {
        Tensor::new(&[self.len(), 1, self.size.0, self.size.1], self.pixels.clone())
    }

    /// Rows `idx` as a batch.
    fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<bool>)> {
        let per = self.size.0 * self.size.1;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        Ok((
            Tensor::new(&[idx.len(), 1, self.size.0, self.size.1], data)?,
            idx.iter().map(|&i| self.positive[i]).collect(),
        ))
    }
}

/// Stage-one examples: every preprocessed slice with an infection label.
pub fn stage1_examples(volumes: &[&Volume], size: (usize, usize)) -> Result<Examples> {
    let pre = volumes
        .iter()
        .map(|v| preprocess(v, size))
        .collect::<Result<Vec<_>>>()?;
    let planes = pre
        .iter()
        .flat_map(|v| v.slices.iter())
        .filter_map(|s| s.infection_label.map(|y| (&s.pixels, y)))
        .collect();
    Examples::from_planes(size, planes)
}

/// Stage-two examples: slices selected by the stage-one model, labelled with
/// the patient's COVID status. Patients with an unknown label are skipped.
pub fn stage2_examples(volumes: &[&Volume], m1: &dyn SliceClassifier, cfg: &PipelineConfig) -> Result<Examples> {
    let size = m1.input_size();
    let mut kept = Vec::new();
    for v in volumes {
        let Some(covid) = v.label.is_covid() else { continue };
        let pre = preprocess(v, size)?;
        let s1 = stage1_filter(&pre, m1, cfg.selection)?;
        kept.push((pre, s1.selected, covid));
    }
    let planes = kept
        .iter()
        .flat_map(|(pre, sel, covid)| sel.iter().map(move |&i| (&pre.slices[i].pixels, *covid)))
        .collect();
    Examples::from_planes(size, planes)
}

fn onehot(positive: &[bool]) -> Tensor {
    let mut t = Tensor::zeros(&[positive.len(), 2]);
    for (i, &p) in positive.iter().enumerate() {
        let class = if p { POSITIVE } else { 1 - POSITIVE };
        t.data_mut()[2 * i + class] = 1.0;
    }
    t
}

/// Splits a shuffled index list into batches; a trailing single sample is
/// merged into the previous batch since batch norm needs two.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when there is no validation data.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub best: ModelBundle,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Weighted loss and argmax accuracy in inference mode.
pub fn evaluate(
    model: &ModelBundle,
    data: &Examples,
    n_pos: usize,
    n_neg: usize,
    margin: &MarginLossParams,
) -> Result<(f64, f64)> {
    let lengths = model.predict(&data.images()?)?;
    let tape = Tape::new();
    let l = tape.constant(lengths.clone());
    let loss = weighted_margin_loss(l, &onehot(&data.positive), &data.positive, n_pos, n_neg, margin)?;
    let correct = data
        .positive
        .iter()
        .enumerate()
        .filter(|&(i, &p)| {
            let row = &lengths.data()[2 * i..2 * i + 2];
            (row[POSITIVE] > row[1 - POSITIVE]) == p
        })
        .count();
    Ok((loss.item(), correct as f64 / data.len() as f64))
}

/// Trains `model` in place for `cfg.epochs` epochs and returns the
/// parameters of the epoch with the lowest validation loss (training loss
/// when `val` is empty; ties keep the earlier epoch).
pub fn train(mut model: ModelBundle, train: &Examples, val: &Examples, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training slices, got {}", train.len())));
    }
    let (n_pos, n_neg) = train.counts();
    let mut rng = SeededRng::new(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelBundle)> = None;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, idx) in make_batches(&order, cfg.batch_size).iter().enumerate() {
            let at = |e: Error| match e {
                Error::NonFinite { op } => Error::Numerical(format!("non-finite {op} at epoch {epoch}, batch {}", b + 1)),
                Error::NonFiniteGradient(p) => {
                    Error::Numerical(format!("non-finite gradient in `{p}` at epoch {epoch}, batch {}", b + 1))
                }
                other => other,
            };
            let (x, positive) = train.gather(idx)?;
            let tape = Tape::new();
            let pass = model.forward(tape.constant(x), Mode::Train, true).map_err(at)?;
            let loss = weighted_margin_loss(pass.lengths, &onehot(&positive), &positive, n_pos, n_neg, &cfg.margin)
                .map_err(at)?;
            let grads = tape.backward(loss).map_err(at)?;
            model.accumulate_grads(&grads, &pass.params);
            adam_step(&mut model.parameters_mut(), &mut adam).map_err(at)?;
            model.commit_batch_stats(&pass.batch_stats);
            total += loss.item() * idx.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&model, val, n_pos, n_neg, &cfg.margin)?;
            (Some(l), Some(a))
        };
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, log })
}

pub fn loss_log_csv(log: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in log {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_accuracy)
        );
    }
    s
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}
