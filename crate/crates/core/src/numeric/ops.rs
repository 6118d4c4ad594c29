//! Elementwise, reduction, shape and matrix operations on [`Var`].
//!
//! Shapes must match exactly; the only implicit mixing is a Rust scalar with a
//! tensor (`scale`, `add_scalar`). Row and channel biases are explicit ops.

use std::sync::Arc;

use super::kernels;
use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(op, format!("expected a matrix, got {s:?}")),
    }
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(Real) -> Real,
        // derivative from (input, output)
        df: impl Fn(Real, Real) -> Real + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        let y_data = Arc::new(y.data().to_vec());
        self.tape().push(op, y, &[self], move |g, _| {
            let dx = g
                .iter()
                .zip(x.data())
                .zip(y_data.iter())
                .map(|((g, &xv), &yv)| g * df(xv, yv))
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("add", &a, &b)?;
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())?;
        self.tape()
            .push("add", y, &[self, rhs], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("sub", &a, &b)?;
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())?;
        self.tape().push("sub", y, &[self, rhs], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("mul", &a, &b)?;
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())?;
        self.tape().push("mul", y, &[self, rhs], move |g, needs| {
            let da = needs[0].then(|| g.iter().zip(b.data()).map(|(g, v)| g * v).collect());
            let db = needs[1].then(|| g.iter().zip(a.data()).map(|(g, v)| g * v).collect());
            vec![da, db]
        })
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("div", &a, &b)?;
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect())?;
        self.tape().push("div", y, &[self, rhs], move |g, needs| {
            let da = needs[0].then(|| g.iter().zip(b.data()).map(|(g, v)| g / v).collect());
            let db = needs[1].then(|| {
                g.iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect()
            });
            vec![da, db]
        })
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.select_by(rhs, "minimum", |a, b| a <= b)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.select_by(rhs, "maximum", |a, b| a >= b)
    }

    fn select_by(self, rhs: Var<'t>, op: &'static str, take_lhs: fn(Real, Real) -> bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(op, &a, &b)?;
        let pick: Vec<bool> = a.data().iter().zip(b.data()).map(|(&x, &y)| take_lhs(x, y)).collect();
        let y = Tensor::new(
            a.shape(),
            a.data()
                .iter()
                .zip(b.data())
                .zip(&pick)
                .map(|((&x, &y), &l)| if l { x } else { y })
                .collect(),
        )?;
        self.tape().push(op, y, &[self, rhs], move |g, _| {
            let da = g.iter().zip(&pick).map(|(g, &l)| if l { *g } else { 0.0 }).collect();
            let db = g.iter().zip(&pick).map(|(g, &l)| if l { 0.0 } else { *g }).collect();
            vec![Some(da), Some(db)]
        })
    }

    pub fn scale(self, s: Real) -> Result<Var<'t>> {
        self.unary("scale", |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: Real) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Real::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Real::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", Real::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |v| v * v, |x, _| 2.0 * x)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.len();
        let y = Tensor::scalar(x.data().iter().sum());
        self.tape()
            .push("sum", y, &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        self.sum()?.scale(1.0 / n as Real)
    }

    /// Sums a `[rows, cols]` matrix over its rows, giving `[cols]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = matrix_dims("sum_rows", &x)?;
        let mut out = vec![0.0; c];
        for row in x.data().chunks_exact(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.tape()
            .push("sum_rows", Tensor::new([c], out)?, &[self], move |g, _| {
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend_from_slice(g);
                }
                vec![Some(dx)]
            })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let y = Tensor::new(shape, x.data().to_vec())?;
        self.tape().push("reshape", y, &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// Matrix transpose.
    pub fn t(self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = matrix_dims("transpose", &x)?;
        let y = Tensor::new([c, r], kernels::transpose(x.data(), r, c))?;
        self.tape().push("transpose", y, &[self], move |g, _| {
            vec![Some(kernels::transpose(g, c, r))]
        })
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = matrix_dims("matmul", &a)?;
        let (k2, n) = matrix_dims("matmul", &b)?;
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2}"));
        }
        let y = Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.tape().push("matmul", y, &[self, rhs], move |g, needs| {
            let da = needs[0].then(|| kernels::matmul_nt(g, b.data(), m, n, k));
            let db = needs[1].then(|| kernels::matmul_tn(a.data(), g, m, k, n));
            vec![da, db]
        })
    }

    /// `x[n,in] @ w[out,in]^T + b[out]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let (n, din) = matrix_dims("linear", &x)?;
        let (dout, din2) = matrix_dims("linear", &wv)?;
        if din != din2 {
            return shape_err("linear", format!("input width {din} vs weight {:?}", wv.shape()));
        }
        let mut y = kernels::matmul_nt(x.data(), wv.data(), n, din, dout);
        let mut parents = vec![self, w];
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [dout] {
                return shape_err("linear", format!("bias {:?} for {dout} outputs", bv.shape()));
            }
            for row in y.chunks_exact_mut(dout.max(1)) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
            parents.push(b);
        }
        let has_bias = parents.len() == 3;
        self.tape()
            .push("linear", Tensor::new([n, dout], y)?, &parents, move |g, needs| {
                let dx = needs[0].then(|| kernels::matmul(g, wv.data(), n, dout, din));
                let dw = needs[1].then(|| kernels::matmul_tn(g, x.data(), n, dout, din));
                let mut out = vec![dx, dw];
                if has_bias {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks_exact(dout.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push(Some(db));
                }
                out
            })
    }

    /// Adds `b[k]` to every row of `self[n,k]`.
    pub fn add_row(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let (n, k) = matrix_dims("add_row", &x)?;
        if bv.shape() != [k] {
            return shape_err("add_row", format!("row bias {:?} for width {k}", bv.shape()));
        }
        let mut y = x.data().to_vec();
        for row in y.chunks_exact_mut(k.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        self.tape()
            .push("add_row", Tensor::new([n, k], y)?, &[self, b], move |g, _| {
                let mut db = vec![0.0; k];
                for row in g.chunks_exact(k.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![Some(g.to_vec()), Some(db)]
            })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            );
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape()
            .push("narrow", Tensor::new(out_shape, out)?, &[self], move |g, _| {
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        if axis >= base_shape.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base_shape.len()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base_shape:?} on axis {axis}"));
            }
            dims.push(s[axis]);
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        first
            .tape()
            .push("concat", Tensor::new(out_shape, out)?, parts, move |g, needs| {
                let mut grads: Vec<Option<Vec<Real>>> = dims
                    .iter()
                    .zip(needs)
                    .map(|(&d, &n)| n.then(|| Vec::with_capacity(outer * d * inner)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &d) in grads.iter_mut().zip(&dims) {
                        if let Some(gr) = gr {
                            gr.extend_from_slice(&g[pos..pos + d * inner]);
                        }
                        pos += d * inner;
                    }
                }
                grads
            })
    }

    /// Picks rows of a matrix (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = matrix_dims("gather_rows", &x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return shape_err("gather_rows", format!("row {bad} of {n}"));
        }
        let rows = rows.to_vec();
        let mut out = Vec::with_capacity(rows.len() * k);
        for &r in &rows {
            out.extend_from_slice(&x.data()[r * k..(r + 1) * k]);
        }
        self.tape().push(
            "gather_rows",
            Tensor::new([rows.len(), k], out)?,
            &[self],
            move |g, _| {
                let mut dx = vec![0.0; n * k];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * k..(r + 1) * k]
                        .iter_mut()
                        .zip(&g[i * k..(i + 1) * k])
                        .for_each(|(d, v)| *d += v);
                }
                vec![Some(dx)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::scalar(0.0)).sigmoid().unwrap();
        assert_eq!(y.value().item(), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.constant(Tensor::eye(3)).matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(*y.value(), a);
    }

    #[test]
    fn relu_negative_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(-2.0));
        let y = x.relu().unwrap();
        assert_eq!(y.value().item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(a.add(b).is_err());
        let m = tape.constant(Tensor::zeros([2, 3]));
        assert!(m.matmul(m).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(x.log(), Err(crate::Error::NonFinite { op: "log" })));
    }

    #[test]
    fn narrow_concat_inverse() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 5], |i| i as Real));
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(a.value().data(), &[0.0, 1.0, 5.0, 6.0]);
        let back = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(*back.value(), *x.value());
    }
}
