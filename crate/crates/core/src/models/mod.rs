//! Stage-one and stage-two network builders.
//!
//! Both stages share the convolutional front end: conv1→BN→ReLU,
//! conv2→BN→ReLU, conv3→ReLU→max-pool, conv4→ReLU→max-pool. The final
//! feature map is regrouped into primary capsules, followed by the routed
//! capsule layers. Stage one routes through two hidden capsule layers and
//! the class layer (three routed layers); stage two routes straight from the
//! primary capsules to the class layer. Class capsule 0 is the positive
//! class (infected slice in stage one, COVID in stage two).

mod checkpoint;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsule::{self, CapsuleLayer, DEFAULT_ROUTING_ITERS};
use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_infer, batch_norm_train, conv2d, max_pool2d, BatchNorm2D, BatchStats, Conv2D, MaxPool2D, Mode, Padding,
    Parameter,
};
use crate::tensor::{Gradients, SeededRng, Tape, Tensor, Var};

/// Index of the positive class capsule.
pub const POSITIVE: usize = 0;
pub const NEGATIVE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    fn hidden_layers(self) -> usize {
        match self {
            Stage::One => 2,
            Stage::Two => 0,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::One => "one",
            Stage::Two => "two",
        })
    }
}

/// Capsule layer shape: number of capsules and their dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsShape {
    pub count: usize,
    pub dim: usize,
}

impl CapsShape {
    pub const fn new(count: usize, dim: usize) -> Self {
        CapsShape { count, dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// (height, width) of the input slices.
    pub input_size: (usize, usize),
    pub conv_channels: Vec<usize>,
    pub kernel: (usize, usize),
    /// Primary capsules per spatial location of the last feature map.
    pub primary_caps: CapsShape,
    pub hidden_caps: Vec<CapsShape>,
    pub class_caps: CapsShape,
    pub routing_iters: usize,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
    /// Seed for weight initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_bn_momentum() -> f64 {
    crate::nn::BN_DEFAULT_MOMENTUM
}

fn default_bn_epsilon() -> f64 {
    crate::nn::BN_DEFAULT_EPSILON
}

impl NetworkSpec {
    /// 256×256 configuration: channels 64/64/128/128, 3×3 kernels, 8-d
    /// primary capsules, 16×8 hidden capsules, 16-d class capsules.
    pub fn reference(stage: Stage) -> Self {
        NetworkSpec {
            input_size: (256, 256),
            conv_channels: vec![64, 64, 128, 128],
            kernel: (3, 3),
            primary_caps: CapsShape::new(16, 8),
            hidden_caps: vec![CapsShape::new(16, 8); stage.hidden_layers()],
            class_caps: CapsShape::new(2, 16),
            routing_iters: DEFAULT_ROUTING_ITERS,
            bn_momentum: default_bn_momentum(),
            bn_epsilon: default_bn_epsilon(),
            init_seed: 0,
        }
    }

    /// Same topology at 32×32 with narrow layers, trainable on a CPU in minutes.
    pub fn desk(stage: Stage) -> Self {
        NetworkSpec {
            input_size: (32, 32),
            conv_channels: vec![8, 16, 16, 16],
            kernel: (3, 3),
            primary_caps: CapsShape::new(2, 8),
            hidden_caps: vec![CapsShape::new(8, 8); stage.hidden_layers()],
            class_caps: CapsShape::new(2, 16),
            routing_iters: DEFAULT_ROUTING_ITERS,
            bn_momentum: default_bn_momentum(),
            bn_epsilon: default_bn_epsilon(),
            init_seed: 0,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_channels.len() != 4 {
            return bad(format!("expected 4 conv layers, got {}", self.conv_channels.len()));
        }
        if self.conv_channels.contains(&0) || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("conv channels and kernel must be positive".into());
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input size must be positive".into());
        }
        if self.class_caps.count != 2 {
            return bad(format!("class layer must have 2 capsules, got {}", self.class_caps.count));
        }
        let all_caps = std::iter::once(&self.primary_caps)
            .chain(&self.hidden_caps)
            .chain(std::iter::once(&self.class_caps));
        for c in all_caps {
            if c.count == 0 || c.dim == 0 {
                return bad("capsule counts and dimensions must be positive".into());
            }
        }
        if self.primary_caps.count * self.primary_caps.dim != self.conv_channels[3] {
            return bad(format!(
                "primary capsules {}x{} do not tile the {} channels of conv4",
                self.primary_caps.count, self.primary_caps.dim, self.conv_channels[3]
            ));
        }
        if self.hidden_caps.len() != stage.hidden_layers() {
            return bad(format!(
                "stage {stage} expects {} hidden capsule layers, got {}",
                stage.hidden_layers(),
                self.hidden_caps.len()
            ));
        }
        if self.routing_iters < 1 {
            return bad("routing iterations must be >= 1".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_epsilon > 0.0) {
            return bad("batch-norm momentum must be in (0,1) and epsilon > 0".into());
        }
        self.feature_size().map(|_| ())
    }

    fn pool() -> MaxPool2D {
        MaxPool2D::new((2, 2), (2, 2))
    }

    /// Spatial size of the conv4 output after both poolings.
    pub fn feature_size(&self) -> Result<(usize, usize)> {
        let (h, w) = self.input_size;
        let underflow = |_| Error::Config(format!("input {h}x{w} too small for two 2x2 poolings"));
        let (h, w) = Self::pool().output_size(h, w).map_err(underflow)?;
        Self::pool().output_size(h, w).map_err(underflow)
    }

    pub fn num_primary_caps(&self) -> Result<usize> {
        let (h, w) = self.feature_size()?;
        Ok(h * w * self.primary_caps.count)
    }

    /// Trainable element count implied by the spec, by direct arithmetic.
    pub fn expected_parameter_count(&self) -> Result<usize> {
        let (kh, kw) = self.kernel;
        let mut total = 0;
        let mut prev = 1;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            total += c * prev * kh * kw + c;
            if i < 2 {
                total += 2 * c;
            }
            prev = c;
        }
        let mut prev = CapsShape::new(self.num_primary_caps()?, self.primary_caps.dim);
        for next in self.hidden_caps.iter().chain(std::iter::once(&self.class_caps)) {
            total += prev.count * next.count * prev.dim * next.dim;
            prev = *next;
        }
        Ok(total)
    }
}

/// A built network: layers plus an ordered parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub stage: Stage,
    pub spec: NetworkSpec,
    convs: Vec<Conv2D>,
    norms: Vec<BatchNorm2D>,
    caps: Vec<CapsuleLayer>,
}

/// Everything a forward pass exposes.
pub struct ForwardPass<'t> {
    /// Class capsule lengths `[N, 2]`.
    pub lengths: Var<'t>,
    /// Class capsules `[N, 2, d]`.
    pub class_caps: Var<'t>,
    /// Post-activation output of each conv layer, before pooling; when the
    /// pass resumes from a feature map, only that map and later ones.
    pub feature_maps: Vec<Var<'t>>,
    /// Bound parameters, in registry order.
    pub params: Vec<Var<'t>>,
    /// Train-mode batch statistics of the two batch-norm layers.
    pub batch_stats: Vec<BatchStats>,
}

pub fn build_stage1(spec: &NetworkSpec) -> Result<ModelBundle> {
    ModelBundle::build(Stage::One, spec)
}

pub fn build_stage2(spec: &NetworkSpec) -> Result<ModelBundle> {
    ModelBundle::build(Stage::Two, spec)
}

pub fn count_parameters(m: &ModelBundle) -> usize {
    m.parameters().iter().map(|p| p.numel()).sum()
}

impl ModelBundle {
    pub fn build(stage: Stage, spec: &NetworkSpec) -> Result<Self> {
        spec.validate(stage)?;
        let mut rng = SeededRng::new(spec.init_seed);
        let mut convs = Vec::with_capacity(4);
        let mut prev = 1;
        for (i, &c) in spec.conv_channels.iter().enumerate() {
            convs.push(Conv2D::new(
                &format!("conv{}", i + 1),
                prev,
                c,
                spec.kernel,
                (1, 1),
                Padding::Same,
                &mut rng,
            ));
            prev = c;
        }
        let norms = (0..2)
            .map(|i| {
                let mut bn = BatchNorm2D::new(&format!("bn{}", i + 1), spec.conv_channels[i]);
                bn.momentum = spec.bn_momentum;
                bn.epsilon = spec.bn_epsilon;
                bn
            })
            .collect();
        let mut caps = Vec::new();
        let mut prev = CapsShape::new(spec.num_primary_caps()?, spec.primary_caps.dim);
        let routed: Vec<CapsShape> = spec
            .hidden_caps
            .iter()
            .copied()
            .chain(std::iter::once(spec.class_caps))
            .collect();
        for (i, next) in routed.iter().enumerate() {
            caps.push(CapsuleLayer::new(
                &format!("caps{}", i + 1),
                prev.count,
                prev.dim,
                next.count,
                next.dim,
                spec.routing_iters,
                &mut rng,
            )?);
            prev = *next;
        }
        Ok(ModelBundle {
            stage,
            spec: spec.clone(),
            convs,
            norms,
            caps,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.extend(conv.parameters());
            if let Some(bn) = self.norms.get(i) {
                out.extend(bn.parameters());
            }
        }
        out.extend(self.caps.iter().map(|c| &c.weight));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for conv in self.convs.iter_mut() {
            out.extend(conv.parameters_mut());
            if let Some(bn) = norms.next() {
                out.extend(bn.parameters_mut());
            }
        }
        out.extend(self.caps.iter_mut().map(|c| &mut c.weight));
        out
    }

    pub fn batch_norms(&self) -> &[BatchNorm2D] {
        &self.norms
    }

    pub(crate) fn batch_norms_mut(&mut self) -> &mut [BatchNorm2D] {
        &mut self.norms
    }

    pub fn capsule_layers(&self) -> &[CapsuleLayer] {
        &self.caps
    }

    /// Forward pass on `x[N, 1, H, W]`. Parameters are recorded as leaves
    /// when `trainable`, otherwise as constants.
    pub fn forward<'t>(&self, x: Var<'t>, mode: Mode, trainable: bool) -> Result<ForwardPass<'t>> {
        let (h, w) = self.spec.input_size;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != h || xs[3] != w {
            return Err(Error::Shape {
                op: "model input",
                expected: vec![xs.first().copied().unwrap_or(1), 1, h, w],
                got: xs,
            });
        }
        self.run(x, 0, mode, trainable)
    }

    /// Resumes the forward pass from the post-activation output of conv
    /// layer `layer` (1-based), e.g. to differentiate with respect to it.
    pub fn forward_from_feature_map<'t>(
        &self,
        a: Var<'t>,
        layer: usize,
        mode: Mode,
        trainable: bool,
    ) -> Result<ForwardPass<'t>> {
        if !(1..=self.convs.len()).contains(&layer) {
            return Err(Error::InvalidArgument(format!(
                "conv layer {layer} out of range 1..={}",
                self.convs.len()
            )));
        }
        let want = self.convs[layer - 1].out_channels;
        let s = a.shape();
        if s.len() != 4 || s[1] != want {
            return Err(Error::Dimension {
                op: "forward_from_feature_map",
                msg: format!("expected [N, {want}, h, w] feature map, got {s:?}"),
            });
        }
        self.run(a, layer, mode, trainable)
    }

    /// Runs conv layers after `start` (0 = from the input), then the capsules.
    fn run<'t>(&self, x: Var<'t>, start: usize, mode: Mode, trainable: bool) -> Result<ForwardPass<'t>> {
        let tape = x.tape();
        let params: Vec<Var<'t>> = self.parameters().iter().map(|p| p.bind(tape, trainable)).collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter registry order");

        let mut feature_maps = Vec::with_capacity(4);
        let mut batch_stats = Vec::new();
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let (cw, cb) = (take(), take());
            let norm = self.norms.get(i).map(|bn| (bn, take(), take()));
            if i + 1 < start {
                continue;
            }
            if i + 1 > start {
                h = conv2d(h, cw, cb, conv.stride, conv.padding)?;
                if let Some((bn, gamma, beta)) = norm {
                    h = match mode {
                        Mode::Train => {
                            let (y, stats) = batch_norm_train(h, gamma, beta, bn.epsilon)?;
                            batch_stats.push(stats);
                            y
                        }
                        Mode::Infer => {
                            batch_norm_infer(h, gamma, beta, &bn.running_mean, &bn.running_var, bn.epsilon)?
                        }
                    };
                }
                h = h.relu()?;
            }
            feature_maps.push(h);
            if i >= 2 {
                h = max_pool2d(h, NetworkSpec::pool())?;
            }
        }

        let mut u = capsule::primary_capsules(h, self.spec.primary_caps.dim)?;
        for layer in &self.caps {
            let votes = capsule::predict_votes(u, take())?;
            u = capsule::route(votes, layer.routing_iters)?;
        }
        let lengths = capsule::capsule_lengths(u)?;
        Ok(ForwardPass {
            lengths,
            class_caps: u,
            feature_maps,
            params,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            bn.commit(s);
        }
    }

    /// Adds the gradients of a backward sweep into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, grads: &Gradients, params: &[Var<'_>]) {
        for (p, v) in self.parameters_mut().into_iter().zip(params) {
            if let Some(g) = grads.get(*v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Infer-mode class capsule lengths `[N, 2]` for slices `[N, 1, H, W]`,
    /// evaluated in fixed-size chunks.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 32;
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "predict",
                msg: format!("expected [N, 1, H, W], got {s:?}"),
            });
        }
        let per = s[1] * s[2] * s[3];
        if s[0] == 0 || per == 0 {
            return Tensor::new(&[s[0], 2], Vec::new());
        }
        // chunks are independent tapes, so they can be evaluated in parallel
        let chunks: Vec<&[f64]> = images.data().chunks(CHUNK * per).collect();
        let parts = chunks
            .par_iter()
            .map(|chunk| {
                let tape = Tape::new();
                let x = tape.constant(Tensor::new(&[chunk.len() / per, s[1], s[2], s[3]], chunk.to_vec())?);
                let pass = self.forward(x, Mode::Infer, false)?;
                let lengths = pass.lengths.value();
                Ok(lengths.data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let out = parts.concat();
        Tensor::new(&[s[0], 2], out)
    }
}
