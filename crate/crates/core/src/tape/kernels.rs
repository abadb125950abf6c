//! Dense numeric kernels behind the network tape ops.
//!
//! All kernels take channels-first layouts: activations `(B, C, D, H, W)`,
//! convolution weights `(Cout, Cin, 3, 3, 3)`. Convolutions are 3x3x3 with
//! same padding. Parallelism is over batch elements only; within one
//! element every summation order is fixed, so results do not depend on the
//! thread count.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

fn dims5(x: &ArrayD<f64>) -> (usize, usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 5, "expected rank-5 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3], s[4])
}

/// Plain `(M, K) x (K, N)` product with a fixed per-row summation order, so
/// each output row is bitwise independent of the batch size.
pub fn matmul_nn(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dim");
    let av = a.as_slice().expect("contiguous lhs");
    let bv = b.as_slice().expect("contiguous rhs");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bv[kk * n..(kk + 1) * n];
            for (o, &bkn) in orow.iter_mut().zip(brow) {
                *o += aik * bkn;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

/// `(M, K) x (N, K)^T` with the same ordering guarantees as [`matmul_nn`].
pub fn matmul_nt(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dim");
    let av = a.as_slice().expect("contiguous lhs");
    let bv = b.as_slice().expect("contiguous rhs");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &bv[j * k..(j + 1) * k];
            orow[j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

/// `(M, K)^T x (M, N)` with the same ordering guarantees as [`matmul_nn`].
pub fn matmul_tn(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (m2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(m, m2, "matmul outer dim");
    let av = a.as_slice().expect("contiguous lhs");
    let bv = b.as_slice().expect("contiguous rhs");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let brow = &bv[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bin) in orow.iter_mut().zip(brow) {
                *o += aik * bin;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[k, n]), out).unwrap()
}

/// 3x3x3 convolution with same padding: `(B,Cin,D,H,W) -> (B,Cout,D,H,W)`.
pub fn conv3d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, bias: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, cin, d, h, wd) = dims5(x);
    let co = w.shape()[0];
    assert_eq!(w.shape(), &[co, cin, 3, 3, 3]);
    assert_eq!(bias.shape(), &[co]);

    let xs = x.as_slice().expect("contiguous input");
    let ws = w.as_slice().expect("contiguous weights");
    let bs = bias.as_slice().expect("contiguous bias");

    let vol = d * h * wd;
    let mut out = vec![0.0; b * co * vol];
    let in_stride = cin * vol;

    out.par_chunks_mut(co * vol)
        .enumerate()
        .for_each(|(bi, ob)| {
            let xb = &xs[bi * in_stride..(bi + 1) * in_stride];
            for c_out in 0..co {
                let wc = &ws[c_out * cin * 27..(c_out + 1) * cin * 27];
                let ob_c = &mut ob[c_out * vol..(c_out + 1) * vol];
                for z in 0..d {
                    for y in 0..h {
                        for x_ in 0..wd {
                            let mut acc = bs[c_out];
                            for c_in in 0..cin {
                                let xc = &xb[c_in * vol..(c_in + 1) * vol];
                                let wk = &wc[c_in * 27..(c_in + 1) * 27];
                                for kz in 0..3usize {
                                    let zz = z as isize + kz as isize - 1;
                                    if zz < 0 || zz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..3usize {
                                        let yy = y as isize + ky as isize - 1;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        let row = (zz as usize * h + yy as usize) * wd;
                                        let wrow = kz * 9 + ky * 3;
                                        for kx in 0..3usize {
                                            let xx = x_ as isize + kx as isize - 1;
                                            if xx < 0 || xx >= wd as isize {
                                                continue;
                                            }
                                            acc += xc[row + xx as usize] * wk[wrow + kx];
                                        }
                                    }
                                }
                            }
                            ob_c[(z * h + y) * wd + x_] = acc;
                        }
                    }
                }
            }
        });

    ArrayD::from_shape_vec(IxDyn(&[b, co, d, h, wd]), out).unwrap()
}

/// Input cotangent of [`conv3d_forward`]: correlation of `gy` with the
/// flipped kernel.
pub fn conv3d_backward_input(gy: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, co, d, h, wd) = dims5(gy);
    let cin = w.shape()[1];
    let gys = gy.as_slice().unwrap();
    let ws = w.as_slice().unwrap();

    let vol = d * h * wd;
    let mut out = vec![0.0; b * cin * vol];

    out.par_chunks_mut(cin * vol)
        .enumerate()
        .for_each(|(bi, gxb)| {
            let gb = &gys[bi * co * vol..(bi + 1) * co * vol];
            for c_in in 0..cin {
                let gx_c = &mut gxb[c_in * vol..(c_in + 1) * vol];
                for z in 0..d {
                    for y in 0..h {
                        for x_ in 0..wd {
                            let mut acc = 0.0;
                            for c_out in 0..co {
                                let gc = &gb[c_out * vol..(c_out + 1) * vol];
                                let wk = &ws[(c_out * cin + c_in) * 27..];
                                for kz in 0..3usize {
                                    let zz = z as isize + 1 - kz as isize;
                                    if zz < 0 || zz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..3usize {
                                        let yy = y as isize + 1 - ky as isize;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        let row = (zz as usize * h + yy as usize) * wd;
                                        let wrow = kz * 9 + ky * 3;
                                        for kx in 0..3usize {
                                            let xx = x_ as isize + 1 - kx as isize;
                                            if xx < 0 || xx >= wd as isize {
                                                continue;
                                            }
                                            acc += gc[row + xx as usize] * wk[wrow + kx];
                                        }
                                    }
                                }
                            }
                            gx_c[(z * h + y) * wd + x_] = acc;
                        }
                    }
                }
            }
        });

    ArrayD::from_shape_vec(IxDyn(&[b, cin, d, h, wd]), out).unwrap()
}

/// Weight and bias cotangents of [`conv3d_forward`].
pub fn conv3d_backward_weights(
    x: &ArrayD<f64>,
    gy: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (b, cin, d, h, wd) = dims5(x);
    let co = gy.shape()[1];
    let xs = x.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    let vol = d * h * wd;

    // Per-batch partials, reduced in batch order.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xb = &xs[bi * cin * vol..(bi + 1) * cin * vol];
            let gb = &gys[bi * co * vol..(bi + 1) * co * vol];
            let mut gw = vec![0.0; co * cin * 27];
            let mut gbias = vec![0.0; co];
            for c_out in 0..co {
                let gc = &gb[c_out * vol..(c_out + 1) * vol];
                gbias[c_out] += gc.iter().sum::<f64>();
                for c_in in 0..cin {
                    let xc = &xb[c_in * vol..(c_in + 1) * vol];
                    let gw_k = &mut gw[(c_out * cin + c_in) * 27..(c_out * cin + c_in + 1) * 27];
                    for z in 0..d {
                        for y in 0..h {
                            for x_ in 0..wd {
                                let g = gc[(z * h + y) * wd + x_];
                                if g == 0.0 {
                                    continue;
                                }
                                for kz in 0..3usize {
                                    let zz = z as isize + kz as isize - 1;
                                    if zz < 0 || zz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..3usize {
                                        let yy = y as isize + ky as isize - 1;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        let row = (zz as usize * h + yy as usize) * wd;
                                        for kx in 0..3usize {
                                            let xx = x_ as isize + kx as isize - 1;
                                            if xx < 0 || xx >= wd as isize {
                                                continue;
                                            }
                                            gw_k[kz * 9 + ky * 3 + kx] += g * xc[row + xx as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (gw, gbias)
        })
        .collect();

    let mut gw = vec![0.0; co * cin * 27];
    let mut gbias = vec![0.0; co];
    for (pw, pb) in partials {
        for (a, v) in gw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in gbias.iter_mut().zip(pb) {
            *a += v;
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[co, cin, 3, 3, 3]), gw).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[co]), gbias).unwrap(),
    )
}

/// Per-axis source indices and interpolation weights for an align-corners
/// trilinear resize from `n_in` to `n_out` samples.
pub fn resize3d_tables(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 2);
            (i0, i0 + 1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear align-corners resize `(B,C,D1,H1,W1) -> (B,C,D2,H2,W2)`.
pub fn resize3d_forward(x: &ArrayD<f64>, out_dims: (usize, usize, usize)) -> ArrayD<f64> {
    let (b, c, d1, h1, w1) = dims5(x);
    let (d2, h2, w2) = out_dims;
    let tz = resize3d_tables(d1, d2);
    let ty = resize3d_tables(h1, h2);
    let tx = resize3d_tables(w1, w2);
    let xs = x.as_slice().unwrap();
    let vol_in = d1 * h1 * w1;
    let vol_out = d2 * h2 * w2;
    let mut out = vec![0.0; b * c * vol_out];
    for bc in 0..b * c {
        let xc = &xs[bc * vol_in..(bc + 1) * vol_in];
        let oc = &mut out[bc * vol_out..(bc + 1) * vol_out];
        for (zi, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (yi, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xi, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fetch = |z: usize, y: usize, x_: usize| xc[(z * h1 + y) * w1 + x_];
                    let c00 = fetch(z0, y0, x0) * (1.0 - fx) + fetch(z0, y0, x1) * fx;
                    let c01 = fetch(z0, y1, x0) * (1.0 - fx) + fetch(z0, y1, x1) * fx;
                    let c10 = fetch(z1, y0, x0) * (1.0 - fx) + fetch(z1, y0, x1) * fx;
                    let c11 = fetch(z1, y1, x0) * (1.0 - fx) + fetch(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    oc[(zi * h2 + yi) * w2 + xi] = c0 * (1.0 - fz) + c1 * fz;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, d2, h2, w2]), out).unwrap()
}

/// Adjoint of [`resize3d_forward`]: scatters cotangents with the same
/// interpolation weights.
pub fn resize3d_backward(gy: &ArrayD<f64>, in_dims: (usize, usize, usize)) -> ArrayD<f64> {
    let (b, c, d2, h2, w2) = dims5(gy);
    let (d1, h1, w1) = in_dims;
    let tz = resize3d_tables(d1, d2);
    let ty = resize3d_tables(h1, h2);
    let tx = resize3d_tables(w1, w2);
    let gs = gy.as_slice().unwrap();
    let vol_in = d1 * h1 * w1;
    let vol_out = d2 * h2 * w2;
    let mut out = vec![0.0; b * c * vol_in];
    for bc in 0..b * c {
        let gc = &gs[bc * vol_out..(bc + 1) * vol_out];
        let oc = &mut out[bc * vol_in..(bc + 1) * vol_in];
        for (zi, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (yi, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xi, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = gc[(zi * h2 + yi) * w2 + xi];
                    let mut put = |z: usize, y: usize, x_: usize, w: f64| {
                        oc[(z * h1 + y) * w1 + x_] += g * w;
                    };
                    put(z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                    put(z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx);
                    put(z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx));
                    put(z0, y1, x1, (1.0 - fz) * fy * fx);
                    put(z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx));
                    put(z1, y0, x1, fz * (1.0 - fy) * fx);
                    put(z1, y1, x0, fz * fy * (1.0 - fx));
                    put(z1, y1, x1, fz * fy * fx);
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, d1, h1, w1]), out).unwrap()
}
