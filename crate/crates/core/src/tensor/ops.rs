//! Differentiable primitives recorded on a [`Tape`].

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for row-major `a[m×k]`, `b[k×n]` given by explicit
/// (row, column) strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape()
            .record("add", out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape().record("sub", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape().record("mul", out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |u, y| u * y)),
                needs[1].then(|| g.zip_map(&a, |u, x| u * x)),
            ]
        })
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * k);
        self.tape()
            .record("scale", out, &[self], move |g, _| vec![Some(g.map(|u| u * k))])
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + k);
        self.tape()
            .record("add_scalar", out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape().record("square", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |u, v| 2.0 * u * v))]
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape().record("relu", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |u, v| if v > 0.0 { u } else { 0.0 }))]
        })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        self.tape().record("sum", out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over one axis; the axis is dropped from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = x.axis_split(axis)?;
        let in_shape = x.shape().to_vec();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + a) * inner + i];
                }
            }
        }
        let out = Tensor::new(&reduced_shape(&in_shape, axis), out)?;
        self.tape().record("sum_axis", out, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        gx[(o * len + a) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape).map_err(|_| Error::Shape {
            op: "reshape",
            expected: shape.to_vec(),
            got: x.shape().to_vec(),
        })?;
        let in_shape = x.shape().to_vec();
        self.tape().record("reshape", out, &[self], move |g, _| {
            vec![Some(g.reshape(&in_shape).expect("shape"))]
        })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Dimension {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::Shape {
                    op: "concat",
                    expected: base.clone(),
                    got: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        first.tape().record("concat", out, parts, move |g, _| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g.data()[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s, d).expect("shape")))
                .collect()
        })
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                expected: vec![a.shape().get(1).copied().unwrap_or(0), 0],
                got: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
        let out = Tensor::new(&[m, n], out)?;
        self.tape().record("matmul", out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                // g[m×n] · bᵀ[n×k]
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), 0.0, &mut d);
                Tensor::new(&[m, k], d).expect("shape")
            });
            let gb = needs[1].then(|| {
                // aᵀ[k×m] · g[m×n]
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), 0.0, &mut d);
                Tensor::new(&[k, n], d).expect("shape")
            });
            vec![ga, gb]
        })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = x.axis_split(axis)?;
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x.data()[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (x.data()[idx(a)] - max).exp();
                    y[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    y[idx(a)] /= total;
                }
            }
        }
        let y = Tensor::new(x.shape(), y)?;
        let saved = y.clone();
        self.tape().record("softmax", y, &[self], move |g, _| {
            let mut gx = vec![0.0; saved.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g.data()[idx(a)] * saved.data()[idx(a)]).sum();
                    for a in 0..len {
                        gx[idx(a)] = saved.data()[idx(a)] * (g.data()[idx(a)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(saved.shape(), gx).expect("shape"))]
        })
    }

    /// Euclidean norm along `axis`, `sqrt(Σx² + epsilon)`, with the axis
    /// removed from the shape.
    pub fn vector_norm(self, axis: usize, epsilon: f64) -> Result<Var<'t>> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("norm epsilon {epsilon} < 0")));
        }
        self.norm_impl("vector_norm", axis, epsilon, epsilon)
    }

    /// Exact Euclidean norm in the forward pass; the backward pass divides by
    /// `max(‖x‖, norm_floor)`, which is exact for any norm above the floor
    /// and gives a zero gradient at the zero vector.
    pub fn length(self, axis: usize, norm_floor: f64) -> Result<Var<'t>> {
        self.norm_impl("length", axis, 0.0, norm_floor)
    }

    fn norm_impl(self, op: &'static str, axis: usize, fwd_eps: f64, bwd_floor: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = x.axis_split(axis)?;
        let mut sq = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = x.data()[(o * len + a) * inner + i];
                    sq[o * inner + i] += v * v;
                }
            }
        }
        let out: Vec<f64> = sq.iter().map(|s| (s + fwd_eps).sqrt()).collect();
        let out = Tensor::new(&reduced_shape(x.shape(), axis), out)?;
        self.tape().record(op, out, &[self], move |g, _| {
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let denom = if fwd_eps > 0.0 {
                        (sq[o * inner + i] + fwd_eps).sqrt()
                    } else {
                        sq[o * inner + i].sqrt().max(bwd_floor)
                    };
                    if denom == 0.0 {
                        continue;
                    }
                    let scale = g.data()[o * inner + i] / denom;
                    for a in 0..len {
                        let idx = (o * len + a) * inner + i;
                        gx[idx] = scale * x.data()[idx];
                    }
                }
            }
            vec![Some(Tensor::new(x.shape(), gx).expect("shape"))]
        })
    }
}

impl Tape {
    /// Convenience: record a constant filled with `value`.
    pub fn full(&self, shape: &[usize], value: f64) -> Var<'_> {
        self.constant(Tensor::full(shape, value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_difference_grad, relative_error};
    use crate::tensor::SeededRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(p.matmul(q).unwrap().value().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(7);
        let a0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b0 = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let y = a.matmul(b).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();

        let fa = |x: &Tensor| {
            let tape = Tape::new();
            let y = tape.constant(x.clone()).matmul(tape.constant(b0.clone())).unwrap();
            y.sum().unwrap().item()
        };
        let fb = |x: &Tensor| {
            let tape = Tape::new();
            let y = tape.constant(a0.clone()).matmul(tape.constant(x.clone())).unwrap();
            y.sum().unwrap().item()
        };
        let na = finite_difference_grad(fa, &a0, 1e-5).unwrap();
        let nb = finite_difference_grad(fb, &b0, 1e-5).unwrap();
        assert!(relative_error(g.get(a).unwrap(), &na) < 1e-6);
        assert!(relative_error(g.get(b).unwrap(), &nb) < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::from_vec(vec![0.0; 3])).softmax(0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape
            .constant(Tensor::from_vec(vec![1000.0, 0.0, 0.0]))
            .softmax(0)
            .unwrap()
            .value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);
        let y = tape
            .constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]))
            .softmax(0)
            .unwrap()
            .value();
        // exp(k)/Σexp, evaluated by hand
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (got, want) in y.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-8);
        }
        for (got, ei) in y.data().iter().zip(&e) {
            assert!((got - ei / s).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one_on_middle_axis() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::uniform(&[2, 5, 3], -20.0, 20.0, &mut rng);
        let tape = Tape::new();
        let y = tape.constant(x).softmax(1).unwrap().value();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|a| y.data()[(o * 5 + a) * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vector_norm_cases() {
        let tape = Tape::new();
        let n = tape.constant(Tensor::from_vec(vec![3.0, 4.0])).vector_norm(0, 0.0).unwrap();
        assert_eq!(n.item(), 5.0);

        let z = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let n = z.vector_norm(0, 1e-12).unwrap();
        assert!((n.item() - 1e-6).abs() < 1e-12);
        let g = tape.backward(n).unwrap();
        assert!(g.get(z).unwrap().is_finite());
    }

    #[test]
    fn vector_norm_gradient() {
        let mut rng = SeededRng::new(11);
        let x0 = Tensor::uniform(&[5], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = x.vector_norm(0, 0.0).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        let num = finite_difference_grad(
            |t| {
                let tape = Tape::new();
                tape.constant(t.clone()).vector_norm(0, 0.0).unwrap().item()
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(g.get(x).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn elementwise_suite() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);

        let x = tape.leaf(Tensor::new(&[2, 3], (1..=6).map(f64::from).collect()).unwrap());
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        let s = y.sum().unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn concat_and_sum_axis_gradients() {
        let mut rng = SeededRng::new(5);
        let a0 = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let b0 = Tensor::uniform(&[2, 1], -1.0, 1.0, &mut rng);
        let w0 = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let f = |a: &Tensor, b: &Tensor| {
            let tape = Tape::new();
            let c = Var::concat(&[tape.constant(a.clone()), tape.constant(b.clone())], 1).unwrap();
            c.mul(tape.constant(w0.clone()))
                .unwrap()
                .square()
                .unwrap()
                .sum_axis(1)
                .unwrap()
                .sum()
                .unwrap()
                .item()
        };
        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        let y = c
            .mul(tape.constant(w0.clone()))
            .unwrap()
            .square()
            .unwrap()
            .sum_axis(1)
            .unwrap()
            .sum()
            .unwrap();
        let g = tape.backward(y).unwrap();
        let na = finite_difference_grad(|t| f(t, &b0), &a0, 1e-5).unwrap();
        let nb = finite_difference_grad(|t| f(&a0, t), &b0, 1e-5).unwrap();
        assert!(relative_error(g.get(a).unwrap(), &na) < 1e-6);
        assert!(relative_error(g.get(b).unwrap(), &nb) < 1e-6);
    }

    #[test]
    fn nan_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![f64::MAX]));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
    }
}
