use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor, Var};
use crate::tensor::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)`; zero padding split top/left first.
    Same,
    /// No padding; output size `(in − kernel) / stride + 1`.
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2D {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    /// `[out, in, kh, kw]`
    pub weight: Parameter,
    /// `[out]`
    pub bias: Parameter,
}

impl Conv2D {
    /// He-uniform weights, zero bias.
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::uniform(&[out_channels, in_channels, kernel.0, kernel.1], -bound, bound, rng);
        Conv2D {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = Geometry::new(h, w, self.kernel, self.stride, self.padding)?;
        Ok((g.out_h, g.out_w))
    }

    pub fn forward<'t>(&self, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let tape = x.tape();
        let w = self.weight.bind(tape, trainable);
        let b = self.bias.bind(tape, trainable);
        conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(h: usize, w: usize, kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("conv kernel and stride must be positive".into()));
        }
        let (out_h, pad_top, out_w, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let ph = ((oh - 1) * sh + kh).saturating_sub(h);
                let pw = ((ow - 1) * sw + kw).saturating_sub(w);
                (oh, ph / 2, ow, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Dimension {
                        op: "conv2d",
                        msg: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    });
                }
                ((h - kh) / sh + 1, 0, (w - kw) / sw + 1, 0)
            }
        };
        Ok(Geometry {
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for kernel offset (ki, kj) at output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<usize> {
        let y = (oy * self.sh + ki).checked_sub(self.pad_top)?;
        let x = (ox * self.sw + kj).checked_sub(self.pad_left)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }

    /// `[C·kh·kw, out_h·out_w]` patch matrix of one sample.
    fn im2col(&self, channels: usize, image: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; channels * self.kh * self.kw * p];
        for c in 0..channels {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(oy, ox, ki, kj) {
                                dst[oy * self.out_w + ox] = plane[s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, channels: usize, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..channels {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(oy, ox, ki, kj) {
                                plane[s] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation plus bias: `x[N,C,H,W]`, `weight[O,C,kh,kw]`,
/// `bias[O]` → `[N,O,H',W']`.
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    if xv.ndim() != 4 || wv.ndim() != 4 {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("expected 4-D input and weight, got {:?} and {:?}", xv.shape(), wv.shape()),
        });
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if wc != c {
        return Err(Error::Shape {
            op: "conv2d",
            expected: vec![n, wc, h, w],
            got: xv.shape().to_vec(),
        });
    }
    if bv.shape() != [o] {
        return Err(Error::Shape {
            op: "conv2d bias",
            expected: vec![o],
            got: bv.shape().to_vec(),
        });
    }
    let geo = Geometry::new(h, w, (kh, kw), stride, padding)?;
    let p = geo.positions();
    let ckk = c * kh * kw;
    let in_plane = c * h * w;

    let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| geo.im2col(c, &xd[i * in_plane..(i + 1) * in_plane]))
        .collect();
    let mut out = vec![0.0; n * o * p];
    out.par_chunks_mut(o * p).zip(cols.par_iter()).for_each(|(y, col)| {
        for (oc, row) in y.chunks_mut(p).enumerate() {
            row.fill(bd[oc]);
        }
        gemm(o, ckk, p, wd, (ckk, 1), col, (p, 1), 1.0, y);
    });
    let out = Tensor::new(&[n, o, geo.out_h, geo.out_w], out)?;

    x.tape().record("conv2d", out, &[x, weight, bias], move |g, needs| {
        let gd = g.data();
        let wd = wv.data();
        let gx = needs[0].then(|| {
            let mut dx = vec![0.0; n * in_plane];
            dx.par_chunks_mut(in_plane).enumerate().for_each(|(i, img)| {
                let mut dcols = vec![0.0; ckk * p];
                // Wᵀ[ckk×o] · g_i[o×p]
                gemm(ckk, o, p, wd, (1, ckk), &gd[i * o * p..(i + 1) * o * p], (p, 1), 0.0, &mut dcols);
                geo.col2im(c, &dcols, img);
            });
            Tensor::new(&[n, c, h, w], dx).expect("shape")
        });
        let gw = needs[1].then(|| {
            let partial: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut dw = vec![0.0; o * ckk];
                    // g_i[o×p] · colsᵀ[p×ckk]
                    gemm(o, p, ckk, &gd[i * o * p..(i + 1) * o * p], (p, 1), &cols[i], (1, p), 0.0, &mut dw);
                    dw
                })
                .collect();
            let mut dw = vec![0.0; o * ckk];
            for part in &partial {
                for (a, b) in dw.iter_mut().zip(part) {
                    *a += b;
                }
            }
            Tensor::new(&[o, c, kh, kw], dw).expect("shape")
        });
        let gb = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for i in 0..n {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += gd[(i * o + oc) * p..(i * o + oc + 1) * p].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(db)
        });
        vec![gx, gw, gb]
    })
}
