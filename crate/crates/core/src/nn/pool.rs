use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Windowed max over `[N, C, H, W]`.
///
/// Ties go to the first position of the row-major window scan, and only that
/// position receives gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2D {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl MaxPool2D {
    pub fn new(window: (usize, usize), stride: (usize, usize)) -> Self {
        MaxPool2D { window, stride }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (wh, ww) = self.window;
        let (sh, sw) = self.stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        if wh > h || ww > w {
            return Err(Error::Dimension {
                op: "max_pool2d",
                msg: format!("window {wh}x{ww} exceeds input {h}x{w}"),
            });
        }
        Ok(((h - wh) / sh + 1, (w - ww) / sw + 1))
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        max_pool2d(x, *self)
    }
}

pub fn max_pool2d<'t>(x: Var<'t>, pool: MaxPool2D) -> Result<Var<'t>> {
    let xv = x.value();
    if xv.ndim() != 4 {
        return Err(Error::Dimension {
            op: "max_pool2d",
            msg: format!("expected 4-D input, got {:?}", xv.shape()),
        });
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (oh, ow) = pool.output_size(h, w)?;
    let (wh, ww) = pool.window;
    let (sh, sw) = pool.stride;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * sh * w + ox * sw;
                for ky in 0..wh {
                    for kx in 0..ww {
                        let idx = base + (oy * sh + ky) * w + ox * sw + kx;
                        if xv.data()[idx] > xv.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xv.data()[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    let in_shape = xv.shape().to_vec();
    x.tape().record("max_pool2d", out, &[x], move |g, _| {
        let mut dx = Tensor::zeros(&in_shape);
        let d = dx.data_mut();
        for (&src, &gv) in argmax.iter().zip(g.data()) {
            d[src] += gv;
        }
        vec![Some(dx)]
    })
}
