//! Gradient-weighted class activation maps over the stage-one conv layers.
//!
//! The target score is the length of the chosen class capsule. Channel
//! weights are the gradient of that score summed over each feature map and
//! divided by `Z`; the map is the ReLU of the weighted channel sum,
//! bilinearly upsampled to the input size.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{to_u8_samples, Pgm};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::nn::Mode;
use crate::tensor::{Tape, Tensor};

/// Normaliser `Z` of the channel weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamNorm {
    /// Number of spatial positions `h·w` (global average pooling).
    #[default]
    Spatial,
    /// Number of feature maps `K`.
    FeatureMaps,
}

/// Channel weights `α[K]` from the gradient `∂y/∂A` of shape `[K, h, w]`.
pub fn grad_weights(grad: &Tensor, norm: CamNorm) -> Result<Tensor> {
    let s = grad.shape();
    if s.len() != 3 {
        return Err(Error::Dimension {
            op: "grad_weights",
            msg: format!("expected [K, h, w] gradient, got {s:?}"),
        });
    }
    let (k, hw) = (s[0], s[1] * s[2]);
    let z = match norm {
        CamNorm::Spatial => hw,
        CamNorm::FeatureMaps => k,
    } as f64;
    Ok(Tensor::from_vec(
        grad.data().chunks(hw).map(|c| c.iter().sum::<f64>() / z).collect(),
    ))
}

/// `Σ_k α_k A^k` before the ReLU, shape `[h, w]`.
pub fn weighted_sum(alpha: &Tensor, a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 3 || alpha.shape() != [s[0]] {
        return Err(Error::Shape {
            op: "cam",
            expected: vec![s.first().copied().unwrap_or(0)],
            got: alpha.shape().to_vec(),
        });
    }
    let hw = s[1] * s[2];
    let mut out = vec![0.0; hw];
    for (w, plane) in alpha.data().iter().zip(a.data().chunks(hw)) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += w * v;
        }
    }
    Tensor::new(&[s[1], s[2]], out)
}

/// Bilinear resize of `[h, w]` with half-pixel centres and edge clamping.
pub fn upsample_bilinear(t: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::InvalidArgument("upsample target must be non-empty".into()));
    }
    if (h, w) == out {
        return Ok(t.clone());
    }
    let d = t.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), src - lo as f64)
    };
    let mut res = Vec::with_capacity(out.0 * out.1);
    for oy in 0..out.0 {
        let (y0, y1, fy) = coord(oy, h, out.0);
        for ox in 0..out.1 {
            let (x0, x1, fx) = coord(ox, w, out.1);
            let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
            let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
            res.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(&[out.0, out.1], res)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// ReLU of the weighted channel sum at feature-map resolution.
    pub map: Tensor,
    /// `map` resized to the input size; non-negative.
    pub upsampled: Tensor,
}

pub fn cam(alpha: &Tensor, a: &Tensor, input_size: (usize, usize)) -> Result<CamMap> {
    let map = weighted_sum(alpha, a)?.map(|v| v.max(0.0));
    // bilinear weights are convex, so the resize stays non-negative
    let upsampled = upsample_bilinear(&map, input_size)?.map(|v| v.max(0.0));
    Ok(CamMap { map, upsampled })
}

/// Scales to `[0, 1]` by the maximum; an all-zero map stays zero.
pub fn normalize_max(t: &Tensor) -> Tensor {
    let m = t.max();
    if m > 0.0 {
        t.map(|v| v / m)
    } else {
        Tensor::zeros(t.shape())
    }
}

/// Input in gray with the normalised CAM added on top, clamped to `[0, 1]`.
pub fn overlay(input: &Tensor, cam_up: &Tensor) -> Result<Tensor> {
    if input.shape() != cam_up.shape() {
        return Err(Error::Shape {
            op: "overlay",
            expected: input.shape().to_vec(),
            got: cam_up.shape().to_vec(),
        });
    }
    Ok(input.zip_map(&normalize_max(cam_up), |x, c| (0.6 * x + 0.6 * c).min(1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub score: f64,
    pub alpha: Tensor,
    pub cam: CamMap,
    pub overlay: Tensor,
}

/// Grad-CAM of class `class` at conv layer `layer` (1-based) for one slice
/// `[H, W]`, with the model in inference mode.
pub fn explain_slice(
    model: &ModelBundle,
    slice: &Tensor,
    layer: usize,
    class: usize,
    norm: CamNorm,
) -> Result<Explanation> {
    if !(1..=4).contains(&layer) {
        return Err(Error::InvalidArgument(format!("CAM layer must be a conv layer 1..=4, got {layer}")));
    }
    if class > 1 {
        return Err(Error::InvalidArgument(format!("class must be 0 or 1, got {class}")));
    }
    let size = model.spec.input_size;
    if slice.shape() != [size.0, size.1] {
        return Err(Error::Shape {
            op: "explain_slice",
            expected: vec![size.0, size.1],
            got: slice.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    // the input is a leaf so that gradients reach the feature maps
    let x = tape.leaf(slice.reshape(&[1, 1, size.0, size.1])?);
    let pass = model.forward(x, Mode::Infer, false)?;
    let mut pick = Tensor::zeros(&[1, 2]);
    pick.data_mut()[class] = 1.0;
    let y = pass.lengths.mul(tape.constant(pick))?.sum()?;
    let grads = tape.backward(y)?;
    let a = pass.feature_maps[layer - 1];
    let g = grads
        .get(a)
        .ok_or_else(|| Error::Numerical(format!("no gradient reaches conv layer {layer}")))?;
    let s = a.shape();
    let fmap = a.value().reshape(&s[1..])?;
    let alpha = grad_weights(&g.reshape(&s[1..])?, norm)?;
    let cam = cam(&alpha, &fmap, size)?;
    let overlay = overlay(slice, &cam.upsampled)?;
    Ok(Explanation {
        score: y.item(),
        alpha,
        cam,
        overlay,
    })
}

/// Writes `<stem>_cam.pgm` (normalised map at input size) and
/// `<stem>_overlay.pgm`, returning both paths.
pub fn write_heatmaps(dir: impl AsRef<Path>, stem: &str, e: &Explanation) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let write = |suffix: &str, t: &Tensor| -> Result<PathBuf> {
        let path = dir.join(format!("{stem}_{suffix}.pgm"));
        let (h, w) = (t.shape()[0], t.shape()[1]);
        Pgm::new(w, h, 255, to_u8_samples(t.data()))?.write(&path)?;
        Ok(path)
    };
    Ok((
        write("cam", &normalize_max(&e.cam.upsampled))?,
        write("overlay", &e.overlay)?,
    ))
}

/// File stem encoding patient, slice, layer and class.
pub fn heatmap_stem(patient: &str, slice: usize, layer: usize, class: usize) -> String {
    format!("{patient}_s{slice:03}_l{layer}_c{class}")
}
