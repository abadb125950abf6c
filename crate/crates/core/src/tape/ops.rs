//! Primitive differentiable operations on [`Var`].

use super::{kernels, Var};
use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::rc::Rc;

fn same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>) {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
}

impl<'t> Var<'t> {
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(&a, &b);
        let out = &*a + &*b;
        self.tape
            .custom(out, &[self, rhs], move |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(&a, &b);
        let out = &*a - &*b;
        self.tape
            .custom(out, &[self, rhs], move |g| vec![g.clone(), -g])
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(&a, &b);
        let out = &*a * &*b;
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.tape
            .custom(out, &[self, rhs], move |g| vec![g * &*bc, g * &*ac])
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(&a, &b);
        let out = &*a / &*b;
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.custom(out, &[self, rhs], move |g| {
            let gb = -(g * &*ac) / (&*bc * &*bc);
            vec![g / &*bc, gb]
        })
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = &*self.value() + s;
        self.tape.custom(out, &[self], move |g| vec![g.clone()])
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let out = &*self.value() * s;
        self.tape.custom(out, &[self], move |g| vec![g * s])
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// Multiply an arbitrary tensor by a 0-d scalar variable.
    pub fn mul_svar(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1);
        let sval = *sv.iter().next().unwrap();
        let out = &*a * sval;
        let ac = Rc::clone(&a);
        self.tape.custom(out, &[self, s], move |g| {
            let gs = (g * &*ac).sum();
            vec![g * sval, ArrayD::from_elem(IxDyn(&[]), gs)]
        })
    }

    /// Add a 0-d scalar variable to every element.
    pub fn add_svar(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1);
        let sval = *sv.iter().next().unwrap();
        let out = &*a + sval;
        self.tape.custom(out, &[self, s], move |g| {
            vec![g.clone(), ArrayD::from_elem(IxDyn(&[]), g.sum())]
        })
    }

    pub fn square(self) -> Var<'t> {
        let a = self.value();
        let out = &*a * &*a;
        let ac = Rc::clone(&a);
        self.tape
            .custom(out, &[self], move |g| vec![g * &(&*ac * 2.0)])
    }

    pub fn sqrt(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(f64::sqrt);
        let oc = out.clone();
        self.tape
            .custom(out, &[self], move |g| vec![g / &(&oc * 2.0)])
    }

    pub fn recip(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(f64::recip);
        let oc = out.clone();
        self.tape
            .custom(out, &[self], move |g| vec![-(g * &(&oc * &oc))])
    }

    pub fn exp(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(f64::exp);
        let oc = out.clone();
        self.tape.custom(out, &[self], move |g| vec![g * &oc])
    }

    pub fn tanh(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(f64::tanh);
        let oc = out.clone();
        self.tape
            .custom(out, &[self], move |g| vec![g * &(1.0 - &oc * &oc)])
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        let a = self.value();
        let sig = a.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = &*a * &sig;
        let ac = Rc::clone(&a);
        self.tape.custom(out, &[self], move |g| {
            let d = &sig * &(1.0 + &*ac * &(1.0 - &sig));
            vec![g * &d]
        })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(|x| x.clamp(lo, hi));
        let mask = a.mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        self.tape.custom(out, &[self], move |g| vec![g * &mask])
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let out = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let shape = a.raw_dim();
        self.tape.custom(out, &[self], move |g| {
            let gv = *g.iter().next().unwrap();
            vec![ArrayD::from_elem(shape.clone(), gv)]
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Row sums of a 2-d tensor: `(R, C) -> (R,)`.
    pub fn sum_cols(self) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 2);
        let out = a.sum_axis(Axis(1));
        let cols = a.shape()[1];
        self.tape.custom(out.into_dyn(), &[self], move |g| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let rows = g1.len();
            let mut gx = ArrayD::zeros(IxDyn(&[rows, cols]));
            for (r, gr) in g1.iter().enumerate() {
                gx.slice_mut(ndarray::s![r, ..]).fill(*gr);
            }
            vec![gx]
        })
    }

    /// Dense matrix product `(M, K) x (K, N)` with batch-size-independent
    /// row summation order.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.ndim(), 2, "lhs 2-d");
        assert_eq!(b.ndim(), 2, "rhs 2-d");
        let out = kernels::matmul_nn(&a, &b);
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.custom(out, &[self, rhs], move |g| {
            vec![kernels::matmul_nt(g, &bc), kernels::matmul_tn(&ac, g)]
        })
    }

    /// Broadcast-add a row vector: `(M, N) + (N,)`.
    pub fn add_row_vec(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        assert_eq!(a.ndim(), 2);
        assert_eq!(b.ndim(), 1);
        assert_eq!(a.shape()[1], b.shape()[0]);
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        let out = &a.view().into_dimensionality::<Ix2>().unwrap() + &b1;
        self.tape.custom(out.into_dyn(), &[self, bias], move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
        })
    }

    /// Reshape a contiguous tensor; element count must match.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let out = a
            .to_shape(IxDyn(shape))
            .expect("reshape element count mismatch")
            .to_owned();
        let orig = a.shape().to_vec();
        self.tape.custom(out, &[self], move |g| {
            vec![g.to_shape(IxDyn(&orig)).unwrap().to_owned()]
        })
    }

    /// Select rows by index: `(R, C)[idx] -> (K, C)`.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 2);
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[idx.len(), cols]));
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < rows, "gather index out of range");
            out.slice_mut(ndarray::s![k, ..])
                .assign(&a.slice(ndarray::s![i, ..]));
        }
        self.tape.custom(out, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[rows, cols]));
            for (k, &i) in idx.iter().enumerate() {
                let mut row = gx.slice_mut(ndarray::s![i, ..]);
                row += &g.slice(ndarray::s![k, ..]);
            }
            vec![gx]
        })
    }

    /// Scatter-add rows into a fresh `(nrows, C)` tensor: `out[idx[k]] += self[k]`.
    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, nrows: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 2);
        assert_eq!(a.shape()[0], idx.len());
        let cols = a.shape()[1];
        let mut out = ArrayD::zeros(IxDyn(&[nrows, cols]));
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < nrows, "scatter index out of range");
            let mut row = out.slice_mut(ndarray::s![i, ..]);
            row += &a.slice(ndarray::s![k, ..]);
        }
        self.tape.custom(out, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[idx.len(), cols]));
            for (k, &i) in idx.iter().enumerate() {
                gx.slice_mut(ndarray::s![k, ..])
                    .assign(&g.slice(ndarray::s![i, ..]));
            }
            vec![gx]
        })
    }

    /// Row-wise cross product of two `(K, 3)` tensors.
    pub fn cross3(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(&a, &b);
        assert_eq!(a.shape()[1], 3);
        let k = a.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[k, 3]));
        for i in 0..k {
            let (ax, ay, az) = (a[[i, 0]], a[[i, 1]], a[[i, 2]]);
            let (bx, by, bz) = (b[[i, 0]], b[[i, 1]], b[[i, 2]]);
            out[[i, 0]] = ay * bz - az * by;
            out[[i, 1]] = az * bx - ax * bz;
            out[[i, 2]] = ax * by - ay * bx;
        }
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        // d(a x b) adjoints: ga = b x g, gb = g x a.
        self.tape.custom(out, &[self, rhs], move |g| {
            let mut ga = ArrayD::zeros(IxDyn(&[k, 3]));
            let mut gb = ArrayD::zeros(IxDyn(&[k, 3]));
            for i in 0..k {
                let (gx, gy, gz) = (g[[i, 0]], g[[i, 1]], g[[i, 2]]);
                let (ax, ay, az) = (ac[[i, 0]], ac[[i, 1]], ac[[i, 2]]);
                let (bx, by, bz) = (bc[[i, 0]], bc[[i, 1]], bc[[i, 2]]);
                ga[[i, 0]] = by * gz - bz * gy;
                ga[[i, 1]] = bz * gx - bx * gz;
                ga[[i, 2]] = bx * gy - by * gx;
                gb[[i, 0]] = gy * az - gz * ay;
                gb[[i, 1]] = gz * ax - gx * az;
                gb[[i, 2]] = gx * ay - gy * ax;
            }
            vec![ga, gb]
        })
    }

    /// Multiply each row of `(K, C)` by the matching element of `(K,)`.
    pub fn scale_rows(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value());
        assert_eq!(a.ndim(), 2);
        assert_eq!(sv.ndim(), 1);
        assert_eq!(a.shape()[0], sv.shape()[0]);
        let (k, c) = (a.shape()[0], a.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[k, c]));
        for i in 0..k {
            for j in 0..c {
                out[[i, j]] = a[[i, j]] * sv[[i]];
            }
        }
        let (ac, sc) = (Rc::clone(&a), Rc::clone(&sv));
        self.tape.custom(out, &[self, s], move |g| {
            let mut ga = ArrayD::zeros(IxDyn(&[k, c]));
            let mut gs = ArrayD::zeros(IxDyn(&[k]));
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..c {
                    ga[[i, j]] = g[[i, j]] * sc[[i]];
                    acc += g[[i, j]] * ac[[i, j]];
                }
                gs[[i]] = acc;
            }
            vec![ga, gs]
        })
    }

    /// Concatenate along the channel axis (axis 1) of two rank-5 tensors.
    pub fn concat_channels(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.ndim(), 5);
        assert_eq!(b.ndim(), 5);
        let c1 = a.shape()[1];
        let out = concatenate(Axis(1), &[a.view(), b.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        self.tape.custom(out, &[self, rhs], move |g| {
            let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..c1)).to_owned();
            let gb = g.slice_axis(Axis(1), ndarray::Slice::from(c1..)).to_owned();
            vec![ga, gb]
        })
    }

    /// 3x3x3 same-padding convolution on `(B, Cin, D, H, W)`.
    pub fn conv3d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let out = kernels::conv3d_forward(&x, &w, &b);
        let (xc, wc) = (Rc::clone(&x), Rc::clone(&w));
        self.tape.custom(out, &[self, weight, bias], move |g| {
            let gx = kernels::conv3d_backward_input(g, &wc);
            let (gw, gb) = kernels::conv3d_backward_weights(&xc, g);
            vec![gx, gw, gb]
        })
    }

    /// Per-(batch, channel) instance normalization over the spatial axes of
    /// a rank-5 tensor, epsilon-stabilized.
    pub fn instance_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 5);
        let s = x.shape().to_vec();
        let (b, c) = (s[0], s[1]);
        let n = s[2] * s[3] * s[4];
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; b * c];
        for bc in 0..b * c {
            let xb = &xs[bc * n..(bc + 1) * n];
            let mean = xb.iter().sum::<f64>() / n as f64;
            let var = xb.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[bc] = is;
            for (o, v) in out[bc * n..(bc + 1) * n].iter_mut().zip(xb) {
                *o = (v - mean) * is;
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&s), out).unwrap();
        let yc = y.clone();
        self.tape.custom(y, &[self], move |g| {
            let gs = g.as_slice().unwrap();
            let ys = yc.as_slice().unwrap();
            let mut gx = vec![0.0; gs.len()];
            for bc in 0..b * c {
                let gb = &gs[bc * n..(bc + 1) * n];
                let yb = &ys[bc * n..(bc + 1) * n];
                let gmean = gb.iter().sum::<f64>() / n as f64;
                let gymean = gb.iter().zip(yb).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let is = inv_std[bc];
                for ((o, &gv), &yv) in gx[bc * n..(bc + 1) * n].iter_mut().zip(gb).zip(yb) {
                    *o = is * (gv - gmean - yv * gymean);
                }
            }
            vec![ArrayD::from_shape_vec(IxDyn(&g.shape().to_vec()), gx).unwrap()]
        })
    }

    /// Per-channel affine modulation: `y[b,c,..] = x[b,c,..] * scale[b,c] + shift[b,c]`.
    pub fn modulate_channels(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let (x, sc, sh) = (self.value(), scale.value(), shift.value());
        assert_eq!(x.ndim(), 5);
        let s = x.shape().to_vec();
        let (b, c) = (s[0], s[1]);
        let n = s[2] * s[3] * s[4];
        assert_eq!(sc.shape(), &[b, c]);
        assert_eq!(sh.shape(), &[b, c]);
        let xs = x.as_slice().unwrap();
        let scs = sc.as_slice().unwrap();
        let shs = sh.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        for bc in 0..b * c {
            let (a, o) = (scs[bc], shs[bc]);
            for (dst, v) in out[bc * n..(bc + 1) * n].iter_mut().zip(&xs[bc * n..(bc + 1) * n]) {
                *dst = v * a + o;
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&s), out).unwrap();
        let xc = Rc::clone(&x);
        let scc = Rc::clone(&sc);
        self.tape.custom(y, &[self, scale, shift], move |g| {
            let gs = g.as_slice().unwrap();
            let xs = xc.as_slice().unwrap();
            let scs = scc.as_slice().unwrap();
            let mut gx = vec![0.0; gs.len()];
            let mut gscale = vec![0.0; b * c];
            let mut gshift = vec![0.0; b * c];
            for bc in 0..b * c {
                let a = scs[bc];
                let mut accs = 0.0;
                let mut acco = 0.0;
                for ((dst, &gv), &xv) in gx[bc * n..(bc + 1) * n]
                    .iter_mut()
                    .zip(&gs[bc * n..(bc + 1) * n])
                    .zip(&xs[bc * n..(bc + 1) * n])
                {
                    *dst = gv * a;
                    accs += gv * xv;
                    acco += gv;
                }
                gscale[bc] = accs;
                gshift[bc] = acco;
            }
            vec![
                ArrayD::from_shape_vec(IxDyn(&g.shape().to_vec()), gx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[b, c]), gscale).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[b, c]), gshift).unwrap(),
            ]
        })
    }

    /// Trilinear align-corners resize of the spatial axes of a rank-5 tensor.
    pub fn resize3d(self, out_dims: (usize, usize, usize)) -> Var<'t> {
        let x = self.value();
        let in_dims = (x.shape()[2], x.shape()[3], x.shape()[4]);
        let out = kernels::resize3d_forward(&x, out_dims);
        self.tape.custom(out, &[self], move |g| {
            vec![kernels::resize3d_backward(g, in_dims)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::{fd_gradient, rel_err_norm};
    use super::super::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use std::rc::Rc;

    fn randn(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// FD-checks a scalar-valued builder against the tape gradient for one
    /// input slot.
    fn check_op(
        shape: &[usize],
        seed: u64,
        f: impl Fn(&Tape, ndarray::ArrayD<f64>) -> f64 + Copy,
        build: impl for<'a> Fn(&'a Tape, super::Var<'a>) -> super::Var<'a>,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x0 = randn(&mut rng, shape);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y);
        let analytic = grads.wrt(x);
        let fd = fd_gradient(|v| f(&Tape::new(), v.clone()), &x0, 1e-5);
        let err = rel_err_norm(analytic.as_slice().unwrap(), fd.as_slice().unwrap());
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn elementwise_adjoints_match_fd() {
        for seed in 0..3u64 {
            check_op(
                &[4, 3],
                seed,
                |t, v| {
                    let x = t.leaf(v);
                    x.silu().square().mean_all().scalar_value()
                },
                |_, x| x.silu().square().mean_all(),
            );
            check_op(
                &[5],
                seed + 10,
                |t, v| {
                    let x = t.leaf(v);
                    x.tanh().exp().sum_all().scalar_value()
                },
                |_, x| x.tanh().exp().sum_all(),
            );
        }
    }

    #[test]
    fn matmul_adjoint_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a0 = randn(&mut rng, &[3, 4]);
        let b0 = randn(&mut rng, &[4, 2]);
        let f = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let t = Tape::new();
            let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
            av.matmul(bv).square().sum_all().scalar_value()
        };
        let tape = Tape::new();
        let (av, bv) = (tape.leaf(a0.clone()), tape.leaf(b0.clone()));
        let y = av.matmul(bv).square().sum_all();
        let g = tape.backward(y);
        let fd_a = fd_gradient(|v| f(v, &b0), &a0, 1e-5);
        let fd_b = fd_gradient(|v| f(&a0, v), &b0, 1e-5);
        assert!(rel_err_norm(g.wrt(av).as_slice().unwrap(), fd_a.as_slice().unwrap()) < 1e-7);
        assert!(rel_err_norm(g.wrt(bv).as_slice().unwrap(), fd_b.as_slice().unwrap()) < 1e-7);
    }

    #[test]
    fn gather_scatter_cross_adjoints_match_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, &[6, 3]);
        let idx = Rc::new(vec![0usize, 2, 2, 5, 1]);
        let loss = |v: &ArrayD<f64>| {
            let t = Tape::new();
            let x = t.leaf(v.clone());
            let gathered = x.gather_rows(Rc::clone(&idx));
            let crossed = gathered.cross3(gathered.mul_scalar(0.5).add_scalar(0.3));
            crossed
                .scatter_add_rows(Rc::clone(&idx), 6)
                .square()
                .sum_all()
                .scalar_value()
        };
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let gathered = x.gather_rows(Rc::clone(&idx));
        let crossed = gathered.cross3(gathered.mul_scalar(0.5).add_scalar(0.3));
        let y = crossed
            .scatter_add_rows(Rc::clone(&idx), 6)
            .square()
            .sum_all();
        let g = tape.backward(y);
        let fd = fd_gradient(loss, &x0, 1e-5);
        assert!(rel_err_norm(g.wrt(x).as_slice().unwrap(), fd.as_slice().unwrap()) < 1e-7);
    }

    #[test]
    fn conv3d_adjoints_match_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[2, 2, 3, 4, 3]);
        let w0 = randn(&mut rng, &[3, 2, 3, 3, 3]) * 0.3;
        let b0 = randn(&mut rng, &[3]);
        let f = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            let t = Tape::new();
            let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            xv.conv3d(wv, bv).square().sum_all().scalar_value()
        };
        let tape = Tape::new();
        let (xv, wv, bv) = (
            tape.leaf(x0.clone()),
            tape.leaf(w0.clone()),
            tape.leaf(b0.clone()),
        );
        let y = xv.conv3d(wv, bv).square().sum_all();
        let g = tape.backward(y);
        for (var, arr, which) in [(xv, &x0, 0), (wv, &w0, 1), (bv, &b0, 2)] {
            let fd = fd_gradient(
                |v| match which {
                    0 => f(v, &w0, &b0),
                    1 => f(&x0, v, &b0),
                    _ => f(&x0, &w0, v),
                },
                arr,
                1e-5,
            );
            let err = rel_err_norm(g.wrt(var).as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < 1e-6, "conv3d slot {which} rel err {err}");
        }
    }

    #[test]
    fn norm_modulate_resize_adjoints_match_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, &[2, 3, 3, 3, 3]);
        let s0 = randn(&mut rng, &[2, 3]);
        let o0 = randn(&mut rng, &[2, 3]);
        let f = |x: &ArrayD<f64>, s: &ArrayD<f64>, o: &ArrayD<f64>| {
            let t = Tape::new();
            let (xv, sv, ov) = (t.leaf(x.clone()), t.leaf(s.clone()), t.leaf(o.clone()));
            xv.instance_norm(1e-5)
                .modulate_channels(sv, ov)
                .resize3d((4, 5, 4))
                .square()
                .sum_all()
                .scalar_value()
        };
        let tape = Tape::new();
        let (xv, sv, ov) = (
            tape.leaf(x0.clone()),
            tape.leaf(s0.clone()),
            tape.leaf(o0.clone()),
        );
        let y = xv
            .instance_norm(1e-5)
            .modulate_channels(sv, ov)
            .resize3d((4, 5, 4))
            .square()
            .sum_all();
        let g = tape.backward(y);
        for (var, arr, which) in [(xv, &x0, 0), (sv, &s0, 1), (ov, &o0, 2)] {
            let fd = fd_gradient(
                |v| match which {
                    0 => f(v, &s0, &o0),
                    1 => f(&x0, v, &o0),
                    _ => f(&x0, &s0, v),
                },
                arr,
                1e-5,
            );
            let err = rel_err_norm(g.wrt(var).as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < 1e-5, "slot {which} rel err {err}");
        }
    }

    #[test]
    fn concat_and_rowvec_adjoints_match_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a0 = randn(&mut rng, &[1, 2, 2, 2, 2]);
        let b0 = randn(&mut rng, &[1, 3, 2, 2, 2]);
        let f = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let t = Tape::new();
            let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
            av.concat_channels(bv).square().sum_all().scalar_value()
        };
        let tape = Tape::new();
        let (av, bv) = (tape.leaf(a0.clone()), tape.leaf(b0.clone()));
        let y = av.concat_channels(bv).square().sum_all();
        let g = tape.backward(y);
        let fd_a = fd_gradient(|v| f(v, &b0), &a0, 1e-5);
        let fd_b = fd_gradient(|v| f(&a0, v), &b0, 1e-5);
        assert!(rel_err_norm(g.wrt(av).as_slice().unwrap(), fd_a.as_slice().unwrap()) < 1e-7);
        assert!(rel_err_norm(g.wrt(bv).as_slice().unwrap(), fd_b.as_slice().unwrap()) < 1e-7);

        let x0 = randn(&mut rng, &[4, 3]);
        let c0 = randn(&mut rng, &[3]);
        let f2 = |x: &ArrayD<f64>, c: &ArrayD<f64>| {
            let t = Tape::new();
            let (xv, cv) = (t.leaf(x.clone()), t.leaf(c.clone()));
            xv.add_row_vec(cv).silu().sum_all().scalar_value()
        };
        let tape2 = Tape::new();
        let (xv, cv) = (tape2.leaf(x0.clone()), tape2.leaf(c0.clone()));
        let y2 = xv.add_row_vec(cv).silu().sum_all();
        let g2 = tape2.backward(y2);
        let fd_x = fd_gradient(|v| f2(v, &c0), &x0, 1e-5);
        let fd_c = fd_gradient(|v| f2(&x0, v), &c0, 1e-5);
        assert!(rel_err_norm(g2.wrt(xv).as_slice().unwrap(), fd_x.as_slice().unwrap()) < 1e-7);
        assert!(rel_err_norm(g2.wrt(cv).as_slice().unwrap(), fd_c.as_slice().unwrap()) < 1e-7);
    }

    #[test]
    fn scale_rows_and_scalar_var_ops_match_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x0 = randn(&mut rng, &[5, 3]);
        let s0 = randn(&mut rng, &[5]);
        let f = |x: &ArrayD<f64>, s: &ArrayD<f64>| {
            let t = Tape::new();
            let (xv, sv) = (t.leaf(x.clone()), t.leaf(s.clone()));
            let m = xv.scale_rows(sv).sum_cols().square().sum_all().mul_scalar(0.5);
            let denom = xv.square().sum_all().add_scalar(1.0);
            m.div(denom).scalar_value()
        };
        let tape = Tape::new();
        let (xv, sv) = (tape.leaf(x0.clone()), tape.leaf(s0.clone()));
        let m = xv.scale_rows(sv).sum_cols().square().sum_all().mul_scalar(0.5);
        let denom = xv.square().sum_all().add_scalar(1.0);
        let y = m.div(denom);
        let g = tape.backward(y);
        let fd_x = fd_gradient(|v| f(v, &s0), &x0, 1e-5);
        let fd_s = fd_gradient(|v| f(&x0, v), &s0, 1e-5);
        assert!(rel_err_norm(g.wrt(xv).as_slice().unwrap(), fd_x.as_slice().unwrap()) < 1e-6);
        assert!(rel_err_norm(g.wrt(sv).as_slice().unwrap(), fd_s.as_slice().unwrap()) < 1e-6);
    }
}
