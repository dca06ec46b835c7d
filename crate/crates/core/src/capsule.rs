//! Capsule layers: vote prediction, routing by agreement, squash, and the
//! margin losses used to train the class capsules.
//!
//! Routing runs in the order: coupling `c = softmax_j(b)`, weighted vote sum
//! `s_j = Σ_i c_ij û_{j|i}`, `v_j = squash(s_j)`, agreement
//! `a_ij = v_j · û_{j|i}`, `b += a`. The log priors `b` start at zero on every
//! call and the agreement update after the last iteration is skipped.
//! Gradients flow through every unrolled iteration, couplings included.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::{SeededRng, Tensor, Var};

/// Floor on the norm in the backward passes of squash and capsule lengths;
/// keeps the gradient of a dead (zero) capsule finite.
pub const NORM_EPS: f64 = 1e-9;

pub const DEFAULT_ROUTING_ITERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 <= m_minus < m_plus <= 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Fully connected capsule layer with weights `W[I, J, d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleLayer {
    pub num_in: usize,
    pub dim_in: usize,
    pub num_out: usize,
    pub dim_out: usize,
    pub routing_iters: usize,
    pub weight: Parameter,
}

impl CapsuleLayer {
    /// Uniform init with standard deviation `2J / sqrt(I·d_out)`. Under the
    /// uniform couplings `1/J` of the first routing pass this gives
    /// `E‖s_j‖² ≈ 4·mean‖u_i‖²`, so squashed lengths neither vanish nor
    /// saturate as capsule layers are stacked.
    pub fn new(
        name: &str,
        num_in: usize,
        dim_in: usize,
        num_out: usize,
        dim_out: usize,
        routing_iters: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if routing_iters < 1 {
            return Err(Error::Config("routing iterations must be >= 1".into()));
        }
        if [num_in, dim_in, num_out, dim_out].contains(&0) {
            return Err(Error::Config("capsule counts and dimensions must be positive".into()));
        }
        let std = 2.0 * num_out as f64 / ((num_in * dim_out) as f64).sqrt();
        let bound = 3f64.sqrt() * std;
        let w = Tensor::uniform(&[num_in, num_out, dim_in, dim_out], -bound, bound, rng);
        Ok(CapsuleLayer {
            num_in,
            dim_in,
            num_out,
            dim_out,
            routing_iters,
            weight: Parameter::new(format!("{name}.weight"), w),
        })
    }

    /// `u[N, I, d_in]` → `v[N, J, d_out]`.
    pub fn forward<'t>(&self, u: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let w = self.weight.bind(u.tape(), trainable);
        let votes = predict_votes(u, w)?;
        route(votes, self.routing_iters)
    }
}

/// `v = s·‖s‖/(1+‖s‖²)` along the last axis, which equals
/// `(‖s‖²/(1+‖s‖²))·(s/‖s‖)` and is 0 at `s = 0`.
pub fn squash(s: Var<'_>) -> Result<Var<'_>> {
    let sv = s.value();
    let d = *sv.shape().last().expect("non-empty shape");
    let groups = sv.len() / d;
    let mut norms = Vec::with_capacity(groups);
    let mut out = vec![0.0; sv.len()];
    for gi in 0..groups {
        let x = &sv.data()[gi * d..(gi + 1) * d];
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let n = sq.sqrt();
        let f = n / (1.0 + sq);
        for (o, v) in out[gi * d..(gi + 1) * d].iter_mut().zip(x) {
            *o = v * f;
        }
        norms.push(sq);
    }
    let out = Tensor::new(sv.shape(), out)?;
    s.tape().record("squash", out, &[s], move |g, _| {
        let mut gx = vec![0.0; sv.len()];
        for gi in 0..groups {
            let x = &sv.data()[gi * d..(gi + 1) * d];
            let gg = &g.data()[gi * d..(gi + 1) * d];
            let sq = norms[gi];
            let n = sq.sqrt();
            let f = n / (1.0 + sq);
            let df = (1.0 - sq) / (1.0 + sq).powi(2);
            let smooth = n.max(NORM_EPS);
            let dot: f64 = x.iter().zip(gg).map(|(a, b)| a * b).sum();
            let k = dot * df / smooth;
            for ((o, &xi), &up) in gx[gi * d..(gi + 1) * d].iter_mut().zip(x).zip(gg) {
                *o = f * up + k * xi;
            }
        }
        vec![Some(Tensor::new(sv.shape(), gx).expect("shape"))]
    })
}

/// `û[n,i,j,:] = u[n,i,:] · W[i,j,:,:]` for `u[N,I,d_in]`, `W[I,J,d_in,d_out]`.
pub fn predict_votes<'t>(u: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let uv = u.value();
    let wv = w.value();
    if uv.ndim() != 3 || wv.ndim() != 4 || uv.shape()[1] != wv.shape()[0] || uv.shape()[2] != wv.shape()[2] {
        return Err(Error::Shape {
            op: "predict_votes",
            expected: vec![0, wv.shape()[0], wv.shape().get(2).copied().unwrap_or(0)],
            got: uv.shape().to_vec(),
        });
    }
    let (n, ni, di) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
    let (nj, dj) = (wv.shape()[1], wv.shape()[3]);
    let mut out = vec![0.0; n * ni * nj * dj];
    for b in 0..n {
        for i in 0..ni {
            let ui = &uv.data()[(b * ni + i) * di..(b * ni + i + 1) * di];
            for j in 0..nj {
                let wij = &wv.data()[(i * nj + j) * di * dj..(i * nj + j + 1) * di * dj];
                let o = &mut out[((b * ni + i) * nj + j) * dj..((b * ni + i) * nj + j + 1) * dj];
                for (d, &ud) in ui.iter().enumerate() {
                    for (e, oe) in o.iter_mut().enumerate() {
                        *oe += ud * wij[d * dj + e];
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[n, ni, nj, dj], out)?;
    u.tape().record("predict_votes", out, &[u, w], move |g, needs| {
        let gd = g.data();
        let gu = needs[0].then(|| {
            let mut du = vec![0.0; uv.len()];
            for b in 0..n {
                for i in 0..ni {
                    for j in 0..nj {
                        let wij = &wv.data()[(i * nj + j) * di * dj..(i * nj + j + 1) * di * dj];
                        let gv = &gd[((b * ni + i) * nj + j) * dj..((b * ni + i) * nj + j + 1) * dj];
                        for d in 0..di {
                            du[(b * ni + i) * di + d] +=
                                gv.iter().zip(&wij[d * dj..(d + 1) * dj]).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                }
            }
            Tensor::new(uv.shape(), du).expect("shape")
        });
        let gw = needs[1].then(|| {
            let mut dw = vec![0.0; wv.len()];
            for b in 0..n {
                for i in 0..ni {
                    let ui = &uv.data()[(b * ni + i) * di..(b * ni + i + 1) * di];
                    for j in 0..nj {
                        let gv = &gd[((b * ni + i) * nj + j) * dj..((b * ni + i) * nj + j + 1) * dj];
                        let dwij = &mut dw[(i * nj + j) * di * dj..(i * nj + j + 1) * di * dj];
                        for (d, &ud) in ui.iter().enumerate() {
                            for (e, &ge) in gv.iter().enumerate() {
                                dwij[d * dj + e] += ud * ge;
                            }
                        }
                    }
                }
            }
            Tensor::new(wv.shape(), dw).expect("shape")
        });
        vec![gu, gw]
    })
}

/// `s[n,j,:] = Σ_i c[n,i,j] · votes[n,i,j,:]`.
fn weighted_votes<'t>(c: Var<'t>, votes: Var<'t>) -> Result<Var<'t>> {
    let cv = c.value();
    let vv = votes.value();
    let (n, ni, nj, d) = dims4(&vv);
    if cv.shape() != [n, ni, nj] {
        return Err(Error::Shape {
            op: "weighted_votes",
            expected: vec![n, ni, nj],
            got: cv.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * nj * d];
    for b in 0..n {
        for i in 0..ni {
            for j in 0..nj {
                let cij = cv.data()[(b * ni + i) * nj + j];
                let v = &vv.data()[((b * ni + i) * nj + j) * d..((b * ni + i) * nj + j + 1) * d];
                for (o, x) in out[(b * nj + j) * d..(b * nj + j + 1) * d].iter_mut().zip(v) {
                    *o += cij * x;
                }
            }
        }
    }
    let out = Tensor::new(&[n, nj, d], out)?;
    c.tape().record("weighted_votes", out, &[c, votes], move |g, needs| {
        let gd = g.data();
        let mut dc = vec![0.0; cv.len()];
        let mut dv = vec![0.0; vv.len()];
        for b in 0..n {
            for i in 0..ni {
                for j in 0..nj {
                    let base = ((b * ni + i) * nj + j) * d;
                    let gs = &gd[(b * nj + j) * d..(b * nj + j + 1) * d];
                    let cij = cv.data()[(b * ni + i) * nj + j];
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += gs[e] * vv.data()[base + e];
                        dv[base + e] = cij * gs[e];
                    }
                    dc[(b * ni + i) * nj + j] = dot;
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(cv.shape(), dc).expect("shape")),
            needs[1].then(|| Tensor::new(vv.shape(), dv).expect("shape")),
        ]
    })
}

/// `a[n,i,j] = votes[n,i,j,:] · v[n,j,:]`.
fn agreement<'t>(votes: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let vv = votes.value();
    let ov = v.value();
    let (n, ni, nj, d) = dims4(&vv);
    if ov.shape() != [n, nj, d] {
        return Err(Error::Shape {
            op: "agreement",
            expected: vec![n, nj, d],
            got: ov.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * ni * nj];
    for b in 0..n {
        for i in 0..ni {
            for j in 0..nj {
                let base = ((b * ni + i) * nj + j) * d;
                let vj = &ov.data()[(b * nj + j) * d..(b * nj + j + 1) * d];
                out[(b * ni + i) * nj + j] = vv.data()[base..base + d].iter().zip(vj).map(|(x, y)| x * y).sum();
            }
        }
    }
    let out = Tensor::new(&[n, ni, nj], out)?;
    votes.tape().record("agreement", out, &[votes, v], move |g, needs| {
        let gd = g.data();
        let mut dvotes = vec![0.0; vv.len()];
        let mut dv = vec![0.0; ov.len()];
        for b in 0..n {
            for i in 0..ni {
                for j in 0..nj {
                    let ga = gd[(b * ni + i) * nj + j];
                    let base = ((b * ni + i) * nj + j) * d;
                    for e in 0..d {
                        dvotes[base + e] = ga * ov.data()[(b * nj + j) * d + e];
                        dv[(b * nj + j) * d + e] += ga * vv.data()[base + e];
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(vv.shape(), dvotes).expect("shape")),
            needs[1].then(|| Tensor::new(ov.shape(), dv).expect("shape")),
        ]
    })
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Snapshot of one routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    /// Log priors `[N, I, J]` the couplings were computed from.
    pub b: Tensor,
    /// Couplings `[N, I, J]`; each row over `j` sums to one.
    pub c: Tensor,
    /// Agreements `[N, I, J]`; `None` on the final iteration.
    pub a: Option<Tensor>,
}

/// Routing by agreement over `votes[N, I, J, d]` → `v[N, J, d]`.
pub fn route(votes: Var<'_>, iters: usize) -> Result<Var<'_>> {
    route_traced(votes, iters).map(|(v, _)| v)
}

/// [`route`] that also returns every iteration's `b`, `c`, `a`.
pub fn route_traced(votes: Var<'_>, iters: usize) -> Result<(Var<'_>, Vec<RoutingState>)> {
    if iters < 1 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let vs = votes.shape();
    if vs.len() != 4 {
        return Err(Error::Dimension {
            op: "route",
            msg: format!("votes must be [N, I, J, d], got {vs:?}"),
        });
    }
    let tape = votes.tape();
    let mut b = tape.constant(Tensor::zeros(&vs[..3]));
    let mut trace = Vec::with_capacity(iters);
    let mut v = None;
    for it in 0..iters {
        let c = b.softmax(2)?;
        let s = weighted_votes(c, votes)?;
        let out = squash(s)?;
        let a = if it + 1 < iters {
            let a = agreement(votes, out)?;
            Some(a)
        } else {
            None
        };
        trace.push(RoutingState {
            b: b.value().as_ref().clone(),
            c: c.value().as_ref().clone(),
            a: a.map(|a| a.value().as_ref().clone()),
        });
        if let Some(a) = a {
            b = b.add(a)?;
        }
        v = Some(out);
    }
    Ok((v.expect("iters >= 1"), trace))
}

/// Euclidean length of each capsule, `v[N, J, d]` → `[N, J]`.
pub fn capsule_lengths(v: Var<'_>) -> Result<Var<'_>> {
    let nd = v.shape().len();
    v.length(nd - 1, NORM_EPS)
}

/// Reshapes a feature map `[N, C, h, w]` into `h·w·(C/dim)` capsules of size
/// `dim` and squashes them. Capsule `(y·w + x)·G + g` takes channels
/// `g·dim .. (g+1)·dim` at location `(y, x)`.
pub fn primary_capsules(feat: Var<'_>, dim: usize) -> Result<Var<'_>> {
    let fv = feat.value();
    if fv.ndim() != 4 || dim == 0 || fv.shape()[1] % dim != 0 {
        return Err(Error::Dimension {
            op: "primary_capsules",
            msg: format!("cannot group {:?} into capsules of dim {dim}", fv.shape()),
        });
    }
    let (n, c, h, w) = dims4(&fv);
    let groups = c / dim;
    let caps = h * w * groups;
    let index = move |b: usize, ch: usize, y: usize, x: usize| -> usize {
        let (g, d) = (ch / dim, ch % dim);
        ((b * caps) + (y * w + x) * groups + g) * dim + d
    };
    let mut out = vec![0.0; fv.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[index(b, ch, y, x)] = fv.data()[((b * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    let out = Tensor::new(&[n, caps, dim], out)?;
    let in_shape = fv.shape().to_vec();
    let u = feat.tape().record("primary_capsules", out, &[feat], move |g, _| {
        let mut dx = vec![0.0; g.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        dx[((b * c + ch) * h + y) * w + x] = g.data()[index(b, ch, y, x)];
                    }
                }
            }
        }
        vec![Some(Tensor::new(&in_shape, dx).expect("shape"))]
    })?;
    squash(u)
}

fn check_onehot(onehot: &Tensor, n: usize, k: usize) -> Result<()> {
    if onehot.shape() != [n, k] {
        return Err(Error::Shape {
            op: "margin_loss",
            expected: vec![n, k],
            got: onehot.shape().to_vec(),
        });
    }
    for row in onehot.data().chunks(k) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::InvalidArgument(format!("target row {row:?} is not one-hot")));
        }
    }
    Ok(())
}

/// Margin loss per sample, summed over capsules: `lengths[N, K]` → `[N]`.
pub fn margin_loss_per_sample<'t>(lengths: Var<'t>, onehot: &Tensor, p: &MarginLossParams) -> Result<Var<'t>> {
    let shape = lengths.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "margin_loss",
            msg: format!("lengths must be [N, K], got {shape:?}"),
        });
    }
    check_onehot(onehot, shape[0], shape[1])?;
    let tape = lengths.tape();
    let present = tape.constant(onehot.clone());
    let absent = tape.constant(onehot.map(|t| p.lambda * (1.0 - t)));
    let pos = lengths.scale(-1.0)?.add_scalar(p.m_plus)?.relu()?.square()?.mul(present)?;
    let neg = lengths.add_scalar(-p.m_minus)?.relu()?.square()?.mul(absent)?;
    pos.add(neg)?.sum_axis(1)
}

/// Margin loss summed over capsules and averaged over the batch.
pub fn margin_loss<'t>(lengths: Var<'t>, onehot: &Tensor, p: &MarginLossParams) -> Result<Var<'t>> {
    margin_loss_per_sample(lengths, onehot, p)?.mean()
}

/// Class-imbalance weighting: `N⁺/(N⁺+N⁻)·loss⁻ + N⁻/(N⁺+N⁻)·loss⁺`.
pub fn weighted_loss(loss_pos: f64, loss_neg: f64, n_pos: usize, n_neg: usize) -> Result<f64> {
    let (wp, wn) = class_weights(n_pos, n_neg)?;
    Ok(wn * loss_neg + wp * loss_pos)
}

/// Coefficients `(on loss⁺, on loss⁻) = (N⁻/N, N⁺/N)`.
pub fn class_weights(n_pos: usize, n_neg: usize) -> Result<(f64, f64)> {
    let total = n_pos + n_neg;
    if total == 0 {
        return Err(Error::InvalidArgument("class counts are both zero".into()));
    }
    let total = total as f64;
    Ok((n_neg as f64 / total, n_pos as f64 / total))
}

/// Weighted margin loss over a batch. `loss⁺` and `loss⁻` are the per-sample
/// margin losses of positive and negative samples summed and divided by the
/// batch size; `n_pos`/`n_neg` are the class counts used for weighting.
pub fn weighted_margin_loss<'t>(
    lengths: Var<'t>,
    onehot: &Tensor,
    positive: &[bool],
    n_pos: usize,
    n_neg: usize,
    p: &MarginLossParams,
) -> Result<Var<'t>> {
    let per = margin_loss_per_sample(lengths, onehot, p)?;
    if positive.len() != per.shape()[0] {
        return Err(Error::Shape {
            op: "weighted_margin_loss",
            expected: per.shape(),
            got: vec![positive.len()],
        });
    }
    let (wp, wn) = class_weights(n_pos, n_neg)?;
    let batch = positive.len() as f64;
    let weights: Vec<f64> = positive.iter().map(|&pos| if pos { wp } else { wn } / batch).collect();
    per.mul(lengths.tape().constant(Tensor::from_vec(weights)))?.sum()
}
