//! Fused neural-network operations with hand-written backward rules.

use super::kernels::{self, sigmoid, softplus};
use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

impl<'t> Var<'t> {
    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return shape_err("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        let dim = shape[axis];
        if dim == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| xd[at(d)]).fold(Real::NEG_INFINITY, Real::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (xd[at(d)] - max).exp();
                    y[at(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    y[at(d)] /= total;
                }
            }
        }
        let y = Tensor::new(shape, y)?;
        let yv = y.data().to_vec();
        self.tape().push("softmax", y, &[self], move |g, _| {
            let mut dx = vec![0.0; yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let dot: Real = (0..dim).map(|d| g[at(d)] * yv[at(d)]).sum();
                    for d in 0..dim {
                        dx[at(d)] = yv[at(d)] * (g[at(d)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last dimension (biased variance).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: Real) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let shape = x.shape().to_vec();
        let Some(&k) = shape.last() else {
            return shape_err("layer_norm", "scalar input");
        };
        if k == 0 {
            return Err(Error::Invalid("layer_norm over a zero-length axis".into()));
        }
        if gv.shape() != [k] || bv.shape() != [k] {
            return shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for width {k}", gv.shape(), bv.shape()),
            );
        }
        let rows = x.len() / k;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * k..(r + 1) * k];
            let mean = row.iter().sum::<Real>() / k as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / k as Real;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..k {
                let h = (row[j] - mean) * s;
                xhat[r * k + j] = h;
                y[r * k + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape().push(
            "layer_norm",
            Tensor::new(shape, y)?,
            &[self, gamma, beta],
            move |g, needs| {
                let gd = gv.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * k..(r + 1) * k];
                        let hr = &xhat[r * k..(r + 1) * k];
                        let dh: Vec<Real> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<Real>() / k as Real;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<Real>() / k as Real;
                        for j in 0..k {
                            dx[r * k + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    dx
                });
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                for r in 0..rows {
                    for j in 0..k {
                        dgamma[j] += g[r * k + j] * xhat[r * k + j];
                        dbeta[j] += g[r * k + j];
                    }
                }
                vec![dx, Some(dgamma), Some(dbeta)]
            },
        )
    }

    /// 2-D convolution of `self[C_in,H,W]` with `kernels[C_out,C_in,kh,kw]`.
    pub fn conv2d(self, kernels: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernels.value());
        let [cin, h, w] = *x.shape() else {
            return shape_err("conv2d", format!("input {:?} is not [C,H,W]", x.shape()));
        };
        let [cout, cin2, kh, kw] = *k.shape() else {
            return shape_err("conv2d", format!("kernels {:?} are not [C_out,C_in,kh,kw]", k.shape()));
        };
        if cin != cin2 {
            return shape_err("conv2d", format!("input has {cin} channels, kernels expect {cin2}"));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(
                "conv2d",
                format!("degenerate output for {h}x{w} input, {kh}x{kw} kernel"),
            );
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let cols = geom.im2col(x.data());
        let r = cin * kh * kw;
        let p = ho * wo;
        let mut y = kernels::matmul(k.data(), &cols, cout, r, p);
        let mut parents = vec![self, kernels];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [cout] {
                return shape_err("conv2d", format!("bias {:?} for {cout} channels", bv.shape()));
            }
            for (row, bias) in y.chunks_exact_mut(p).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
            parents.push(b);
        }
        let has_bias = parents.len() == 3;
        self.tape()
            .push("conv2d", Tensor::new([cout, ho, wo], y)?, &parents, move |g, needs| {
                let dx = needs[0].then(|| {
                    let dcols = kernels::matmul_tn(k.data(), g, cout, r, p);
                    geom.col2im(&dcols)
                });
                let dk = needs[1].then(|| kernels::matmul_nt(g, &cols, cout, p, r));
                let mut out = vec![dx, dk];
                if has_bias {
                    out.push(Some(g.chunks_exact(p).map(|row| row.iter().sum()).collect()));
                }
                out
            })
    }

    /// Sum over all entries of the sigmoid focal loss against binary targets.
    pub fn sigmoid_focal_loss(self, targets: &Tensor, alpha: Real, gamma: Real) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != targets.shape() {
            return shape_err("focal_loss", format!("{:?} vs {:?}", x.shape(), targets.shape()));
        }
        let t = targets.data().to_vec();
        let mut total = 0.0;
        for (&xv, &tv) in x.data().iter().zip(&t) {
            let p = sigmoid(xv);
            total += if tv > 0.5 {
                alpha * (1.0 - p).powf(gamma) * softplus(-xv)
            } else {
                (1.0 - alpha) * p.powf(gamma) * softplus(xv)
            };
        }
        self.tape()
            .push("focal_loss", Tensor::scalar(total), &[self], move |g, _| {
                let dx = x
                    .data()
                    .iter()
                    .zip(&t)
                    .map(|(&xv, &tv)| {
                        let p = sigmoid(xv);
                        let d = if tv > 0.5 {
                            // log p = -softplus(-x)
                            alpha * (1.0 - p).powf(gamma) * (-gamma * p * softplus(-xv) - (1.0 - p))
                        } else {
                            // log(1-p) = -softplus(x)
                            (1.0 - alpha) * p.powf(gamma) * (gamma * (1.0 - p) * softplus(xv) + p)
                        };
                        g[0] * d
                    })
                    .collect();
                vec![Some(dx)]
            })
    }

    /// Mean binary cross-entropy of logits against targets in [0, 1].
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != targets.shape() || x.is_empty() {
            return shape_err("bce", format!("{:?} vs {:?}", x.shape(), targets.shape()));
        }
        let t = targets.data().to_vec();
        let n = x.len() as Real;
        let total: Real = x.data().iter().zip(&t).map(|(&xv, &tv)| softplus(xv) - tv * xv).sum();
        self.tape()
            .push("bce", Tensor::scalar(total / n), &[self], move |g, _| {
                let dx = x
                    .data()
                    .iter()
                    .zip(&t)
                    .map(|(&xv, &tv)| g[0] * (sigmoid(xv) - tv) / n)
                    .collect();
                vec![Some(dx)]
            })
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn source(&self, oi: usize, di: usize, oj: usize, dj: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + di).checked_sub(self.padding)?;
        let j = (oj * self.stride + dj).checked_sub(self.padding)?;
        (i < self.h && j < self.w).then_some((i, j))
    }

    fn im2col(&self, x: &[Real]) -> Vec<Real> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * p];
        for c in 0..self.cin {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (c * self.kh + di) * self.kw + dj;
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            if let Some((i, j)) = self.source(oi, di, oj, dj) {
                                cols[row * p + oi * self.wo + oj] = x[(c * self.h + i) * self.w + j];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[Real]) -> Vec<Real> {
        let p = self.ho * self.wo;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (c * self.kh + di) * self.kw + dj;
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            if let Some((i, j)) = self.source(oi, di, oj, dj) {
                                x[(c * self.h + i) * self.w + j] += cols[row * p + oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;

    fn vec_t(data: &[Real]) -> Tensor {
        Tensor::new([data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(vec_t(&[0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(vec_t(&[1000.0, 1000.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(vec_t(&[0.0, (3.0 as Real).ln()])).softmax(0).unwrap();
        assert!((s.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((s.value().data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_axis_is_an_error() {
        let tape = Tape::new();
        assert!(tape.constant(Tensor::zeros([2, 0])).softmax(1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::ones([3]));
        let zeros = tape.constant(Tensor::zeros([3]));
        let y = tape
            .constant(vec_t(&[1.0, 1.0, 1.0]))
            .layer_norm(ones, zeros, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

        let ones2 = tape.constant(Tensor::ones([2]));
        let zeros2 = tape.constant(Tensor::zeros([2]));
        let y = tape
            .constant(vec_t(&[-1.0, 1.0]))
            .layer_norm(ones2, zeros2, 1e-5)
            .unwrap();
        let expect = 1.0 / (1.0 + 1e-5 as Real).sqrt();
        assert!((y.value().data()[0] + expect).abs() < 1e-12);
        assert!((y.value().data()[1] - expect).abs() < 1e-12);

        let g0 = tape.constant(Tensor::zeros([3]));
        let b5 = tape.constant(Tensor::full([3], 5.0));
        let y = tape
            .constant(vec_t(&[3.0, -1.0, 8.0]))
            .layer_norm(g0, b5, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([4, 6], |i| ((i * 7 % 11) as Real) - 3.0));
        let y = x
            .layer_norm(
                tape.constant(Tensor::ones([6])),
                tape.constant(Tensor::zeros([6])),
                1e-5,
            )
            .unwrap();
        for row in y.value().data().chunks(6) {
            let mean: Real = row.iter().sum::<Real>() / 6.0;
            let var: Real = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / 6.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_output_extents() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 8, 8]));
        let k1 = tape.constant(Tensor::ones([3, 2, 1, 1]));
        assert_eq!(x.conv2d(k1, None, 1, 0).unwrap().shape(), vec![3, 8, 8]);
        let k3 = tape.constant(Tensor::zeros([4, 2, 3, 3]));
        let y = x.conv2d(k3, None, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![4, 4, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let big = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(tape.constant(Tensor::ones([2, 2, 2])).conv2d(big, None, 1, 0).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let tape = Tape::new();
        let xv = Tensor::from_fn([2, 5, 5], |i| ((i * 13 % 7) as Real) - 3.0);
        let kv = Tensor::from_fn([3, 2, 3, 3], |i| ((i * 5 % 9) as Real) * 0.1 - 0.4);
        let y = tape
            .constant(xv.clone())
            .conv2d(tape.constant(kv.clone()), None, 2, 1)
            .unwrap();
        let y = y.value();
        for co in 0..3 {
            for oi in 0..3 {
                for oj in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let i = (oi * 2 + di) as isize - 1;
                                let j = (oj * 2 + dj) as isize - 1;
                                if (0..5).contains(&i) && (0..5).contains(&j) {
                                    s += xv.get(&[c, i as usize, j as usize]) * kv.get(&[co, c, di, dj]);
                                }
                            }
                        }
                    }
                    assert!((y.get(&[co, oi, oj]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn focal_loss_reductions() {
        let tape = Tape::new();
        let logits = Tensor::new([4], vec![-1.5, 0.3, 2.0, -0.2]).unwrap();
        let targets = Tensor::new([4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        // gamma 0, alpha 0.5: half the summed BCE
        let focal = tape
            .constant(logits.clone())
            .sigmoid_focal_loss(&targets, 0.5, 0.0)
            .unwrap()
            .value()
            .item();
        let bce = tape.constant(logits).bce_with_logits(&targets).unwrap().value().item() * 4.0;
        assert!((focal - 0.5 * bce).abs() < 1e-12);

        // zero logits, positive target: alpha * 0.5^gamma * ln 2
        let l = tape
            .constant(Tensor::zeros([1]))
            .sigmoid_focal_loss(&Tensor::ones([1]), 0.25, 2.0)
            .unwrap()
            .value()
            .item();
        assert!((l - 0.25 * 0.25 * (2.0 as Real).ln()).abs() < 1e-15);

        let confident = tape
            .constant(Tensor::new([2], vec![40.0, -40.0]).unwrap())
            .sigmoid_focal_loss(&Tensor::new([2], vec![1.0, 0.0]).unwrap(), 0.25, 2.0)
            .unwrap()
            .value()
            .item();
        assert!(confident < 1e-30);
    }
}
