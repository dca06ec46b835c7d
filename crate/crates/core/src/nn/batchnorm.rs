use super::{Mode, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch normalisation over `[N, C, H, W]`.
///
/// Running statistics follow `running = momentum·running + (1−momentum)·batch`,
/// with the unbiased batch variance feeding `running_var`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2D {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Batch statistics from one train-mode forward pass, applied to the running
/// averages with [`BatchNorm2D::commit`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchNorm2D {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2D {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// In train mode also returns the batch statistics so the caller can
    /// fold them into the running averages.
    pub fn forward<'t>(&self, x: Var<'t>, mode: Mode, trainable: bool) -> Result<(Var<'t>, Option<BatchStats>)> {
        let tape = x.tape();
        let gamma = self.gamma.bind(tape, trainable);
        let beta = self.beta.bind(tape, trainable);
        match mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(x, gamma, beta, self.epsilon)?;
                Ok((y, Some(stats)))
            }
            Mode::Infer => {
                let y = batch_norm_infer(x, gamma, beta, &self.running_mean, &self.running_var, self.epsilon)?;
                Ok((y, None))
            }
        }
    }

    pub fn commit(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b * unbias;
        }
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

struct Layout {
    n: usize,
    c: usize,
    hw: usize,
}

impl Layout {
    fn of(op: &'static str, x: &Tensor, channels: usize) -> Result<Self> {
        if x.ndim() != 4 || x.shape()[1] != channels {
            return Err(Error::Shape {
                op,
                expected: vec![0, channels, 0, 0],
                got: x.shape().to_vec(),
            });
        }
        Ok(Layout {
            n: x.shape()[0],
            c: channels,
            hw: x.shape()[2] * x.shape()[3],
        })
    }

    fn channel_iter(&self, ch: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).flat_map(move |i| {
            let start = (i * self.c + ch) * self.hw;
            start..start + self.hw
        })
    }
}

/// Normalises with batch statistics. Requires at least two samples.
pub fn batch_norm_train<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, BatchStats)> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let lay = Layout::of("batch_norm", &xv, gv.len())?;
    if lay.n < 2 {
        return Err(Error::InvalidArgument(
            "batch normalisation in train mode needs a batch of at least 2".into(),
        ));
    }
    let m = (lay.n * lay.hw) as f64;
    let mut mean = vec![0.0; lay.c];
    let mut var = vec![0.0; lay.c];
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for ch in 0..lay.c {
        let mu = lay.channel_iter(ch).map(|i| xv.data()[i]).sum::<f64>() / m;
        let v = lay.channel_iter(ch).map(|i| (xv.data()[i] - mu).powi(2)).sum::<f64>() / m;
        let inv = 1.0 / (v + eps).sqrt();
        for i in lay.channel_iter(ch) {
            xhat[i] = (xv.data()[i] - mu) * inv;
            out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
        }
        mean[ch] = mu;
        var[ch] = v;
    }
    let stats = BatchStats {
        mean,
        var: var.clone(),
        count: m as usize,
    };
    let out = Tensor::new(xv.shape(), out)?;
    let shape = xv.shape().to_vec();
    let y = x.tape().record("batch_norm", out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; lay.c];
        let mut dbeta = vec![0.0; lay.c];
        for ch in 0..lay.c {
            let gam = gv.data()[ch];
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in lay.channel_iter(ch) {
                sum_g += gd[i];
                sum_gx += gd[i] * xhat[i];
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            for i in lay.channel_iter(ch) {
                dx[i] = gam * inv / m * (m * gd[i] - sum_g - xhat[i] * sum_gx);
            }
        }
        vec![
            needs[0].then(|| Tensor::new(&shape, dx).expect("shape")),
            needs[1].then(|| Tensor::from_vec(dgamma)),
            needs[2].then(|| Tensor::from_vec(dbeta)),
        ]
    })?;
    Ok((y, stats))
}

/// Affine normalisation with fixed running statistics.
pub fn batch_norm_infer<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Var<'t>> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let lay = Layout::of("batch_norm", &xv, gv.len())?;
    if running_var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative running variance".into()));
    }
    let inv: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for ch in 0..lay.c {
        for i in lay.channel_iter(ch) {
            xhat[i] = (xv.data()[i] - running_mean.data()[ch]) * inv[ch];
            out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
        }
    }
    let out = Tensor::new(xv.shape(), out)?;
    let shape = xv.shape().to_vec();
    x.tape().record("batch_norm_infer", out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; lay.c];
        let mut dbeta = vec![0.0; lay.c];
        for ch in 0..lay.c {
            for i in lay.channel_iter(ch) {
                dx[i] = gd[i] * gv.data()[ch] * inv[ch];
                dgamma[ch] += gd[i] * xhat[i];
                dbeta[ch] += gd[i];
            }
        }
        vec![
            needs[0].then(|| Tensor::new(&shape, dx).expect("shape")),
            needs[1].then(|| Tensor::from_vec(dgamma)),
            needs[2].then(|| Tensor::from_vec(dbeta)),
        ]
    })
}
