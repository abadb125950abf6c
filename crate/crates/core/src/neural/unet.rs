//! Multi-scale flow U-Net.
//!
//! Each scale's field runs through two 3-D convolution blocks; features are
//! fused coarse-to-fine (upsample the coarser scale, concatenate with the
//! finer, convolve); a linear head per scale emits that scale's velocity
//! field. Every convolution is followed by AdaIN whose per-channel scale
//! and shift come from a style head on the sinusoidal features of the
//! integration time and the optional condition vector.

use super::{adain, randn_init, t_features, ParamSet};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct UNetConfig {
    /// Lattice dims per scale, coarse to fine.
    pub scales: Vec<[usize; 3]>,
    pub channels: usize,
    /// 0 disables conditioning.
    pub condition_dim: usize,
    pub t_freqs: usize,
    pub style_hidden: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            scales: vec![[4, 4, 4], [6, 6, 6], [8, 8, 8]],
            channels: 16,
            condition_dim: 0,
            t_freqs: 8,
            style_hidden: 64,
        }
    }
}

/// Parameter indices for one AdaIN style projection.
#[derive(Debug, Clone, Copy)]
struct StyleProj {
    w_scale: usize,
    b_scale: usize,
    w_shift: usize,
    b_shift: usize,
}

/// Convolution followed by AdaIN: no bias parameter, the instance
/// normalization would cancel it.
#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    style: StyleProj,
}

#[derive(Debug, Clone)]
pub struct FlowUNet {
    pub cfg: UNetConfig,
    pub params: ParamSet,
    style_w_t: usize,
    style_w_c: Option<usize>,
    style_b: usize,
    enc1: Vec<ConvIdx>,
    enc2: Vec<ConvIdx>,
    fuse: Vec<ConvIdx>, // scales 2..L
    head_w: Vec<usize>,
    head_b: Vec<usize>,
}

impl FlowUNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> FlowUNet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let c = cfg.channels;
        let sh = cfg.style_hidden;

        let conv_std = |rng: &mut ChaCha20Rng, cin: usize, cout: usize| {
            // He-style fan-in scaling over the 27-tap kernel.
            randn_init(rng, &[cout, cin, 3, 3, 3], (2.0 / (cin as f64 * 27.0)).sqrt())
        };

        let style_w_t = params.add(
            "unet.style.w_t",
            super::xavier_init(&mut rng, 2 * cfg.t_freqs, sh, 1.0),
        );
        let style_w_c = if cfg.condition_dim > 0 {
            Some(params.add(
                "unet.style.w_c",
                super::xavier_init(&mut rng, cfg.condition_dim, sh, 1.0),
            ))
        } else {
            None
        };
        let style_b = params.add("unet.style.b", ArrayD::zeros(IxDyn(&[sh])));

        // AdaIN projections start at (scale = 1, shift = 0): zero weights
        // plus the additive 1 applied in `apply_adain`.
        let add_conv = |params: &mut ParamSet, name: &str, cin: usize, cout: usize,
                        rng: &mut ChaCha20Rng| {
            let w = params.add(format!("unet.{name}.w"), conv_std(rng, cin, cout));
            let style = StyleProj {
                w_scale: params.add(
                    format!("unet.{name}.style_scale.w"),
                    ArrayD::zeros(IxDyn(&[sh, cout])),
                ),
                b_scale: params.add(
                    format!("unet.{name}.style_scale.b"),
                    ArrayD::zeros(IxDyn(&[cout])),
                ),
                w_shift: params.add(
                    format!("unet.{name}.style_shift.w"),
                    ArrayD::zeros(IxDyn(&[sh, cout])),
                ),
                b_shift: params.add(
                    format!("unet.{name}.style_shift.b"),
                    ArrayD::zeros(IxDyn(&[cout])),
                ),
            };
            ConvIdx { w, style }
        };

        let nscales = cfg.scales.len();
        let mut enc1 = Vec::new();
        let mut enc2 = Vec::new();
        let mut fuse = Vec::new();
        for l in 1..=nscales {
            enc1.push(add_conv(&mut params, &format!("s{l}.enc1"), 3, c, &mut rng));
            enc2.push(add_conv(&mut params, &format!("s{l}.enc2"), c, c, &mut rng));
            if l >= 2 {
                fuse.push(add_conv(&mut params, &format!("s{l}.fuse"), 2 * c, c, &mut rng));
            }
        }
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for l in 1..=nscales {
            head_w.push(params.add(
                format!("unet.s{l}.head.w"),
                conv_std(&mut rng, c, 3),
            ));
            head_b.push(params.add(format!("unet.s{l}.head.b"), ArrayD::zeros(IxDyn(&[3]))));
        }

        FlowUNet {
            cfg,
            params,
            style_w_t,
            style_w_c,
            style_b,
            enc1,
            enc2,
            fuse,
            head_w,
            head_b,
        }
    }

    /// Velocity fields for a batch.
    ///
    /// `zs` holds one `(B, 3, D_l, H_l, W_l)` variable per scale, `ts` one
    /// integration time per batch element in `[0, 1]`, `c` an optional
    /// `(B, condition_dim)` variable. Returns per-scale outputs shaped like
    /// the inputs plus the bound parameter variables.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        zs: &[Var<'t>],
        ts: &[f64],
        c: Option<Var<'t>>,
    ) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        let nscales = self.cfg.scales.len();
        assert_eq!(zs.len(), nscales, "scale count mismatch");
        let b = zs[0].shape()[0];
        assert_eq!(ts.len(), b);
        assert!(
            ts.iter().all(|t| (0.0..=1.0).contains(t)),
            "integration time outside [0, 1]"
        );
        for (z, dims) in zs.iter().zip(&self.cfg.scales) {
            assert_eq!(z.shape(), &[b, 3, dims[0], dims[1], dims[2]]);
        }
        match (self.cfg.condition_dim, &c) {
            (0, None) => {}
            (d, Some(cv)) if d > 0 => {
                assert_eq!(cv.shape(), &[b, d], "condition dim mismatch");
            }
            _ => panic!("condition presence does not match condition_dim"),
        }

        let p = self.params.bind(tape);

        // Style trunk on (t features, condition).
        let tf = tape.leaf(t_features(ts, self.cfg.t_freqs));
        let mut style = tf.matmul(p[self.style_w_t]);
        if let (Some(wc), Some(cv)) = (self.style_w_c, c) {
            style = style.add(cv.matmul(p[wc]));
        }
        let style = style.add_row_vec(p[self.style_b]).silu();

        let zero_bias = tape.leaf(ArrayD::zeros(IxDyn(&[self.cfg.channels])));
        let apply_adain = |x: Var<'t>, idx: &ConvIdx| {
            let scale = style
                .matmul(p[idx.style.w_scale])
                .add_row_vec(p[idx.style.b_scale])
                .add_scalar(1.0);
            let shift = style
                .matmul(p[idx.style.w_shift])
                .add_row_vec(p[idx.style.b_shift]);
            adain(x, scale, shift)
        };

        // Per-scale encoders.
        let feats: Vec<Var<'t>> = (0..nscales)
            .map(|l| {
                let e1 = apply_adain(zs[l].conv3d(p[self.enc1[l].w], zero_bias), &self.enc1[l])
                    .silu();
                apply_adain(e1.conv3d(p[self.enc2[l].w], zero_bias), &self.enc2[l]).silu()
            })
            .collect();

        // Coarse-to-fine lateral fusion.
        let mut fused: Vec<Var<'t>> = Vec::with_capacity(nscales);
        fused.push(feats[0]);
        for l in 1..nscales {
            let dims = self.cfg.scales[l];
            let up = fused[l - 1].resize3d((dims[0], dims[1], dims[2]));
            let cat = feats[l].concat_channels(up);
            let idx = &self.fuse[l - 1];
            let g = apply_adain(cat.conv3d(p[idx.w], zero_bias), idx).silu();
            fused.push(g);
        }

        let outs = (0..nscales)
            .map(|l| fused[l].conv3d(p[self.head_w[l]], p[self.head_b[l]]))
            .collect();
        (outs, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::check::{fd_gradient, rel_err_norm};

    fn tiny(cond: usize) -> FlowUNet {
        FlowUNet::new(
            UNetConfig {
                scales: vec![[4, 4, 4], [5, 5, 5]],
                channels: 4,
                condition_dim: cond,
                t_freqs: 2,
                style_hidden: 6,
            },
            11,
        )
    }

    fn rand_fields(seed: u64, b: usize, scales: &[[usize; 3]]) -> Vec<ArrayD<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        scales
            .iter()
            .map(|d| randn_init(&mut rng, &[b, 3, d[0], d[1], d[2]], 0.5))
            .collect()
    }

    /// The style projections are zero at init (unmodulated start); give them
    /// random values so the AdaIN pathway is live for these checks.
    fn randomize_styles(net: &mut FlowUNet, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for p in net.params.tensors.iter_mut() {
            if p.name.contains("style_scale") || p.name.contains("style_shift") {
                p.value = randn_init(&mut rng, &p.value.shape().to_vec(), 0.3);
            }
        }
    }

    #[test]
    fn output_shapes_match_inputs() {
        let net = tiny(0);
        let z0 = rand_fields(1, 2, &net.cfg.scales);
        let tape = Tape::new();
        let zs: Vec<_> = z0.iter().map(|z| tape.leaf(z.clone())).collect();
        let (outs, _) = net.forward(&tape, &zs, &[0.3, 0.9], None);
        for (o, z) in outs.iter().zip(&z0) {
            assert_eq!(o.shape(), z.shape());
        }
    }

    #[test]
    fn integration_time_changes_the_output() {
        let mut net = tiny(0);
        randomize_styles(&mut net, 21);
        let z0 = rand_fields(2, 1, &net.cfg.scales);
        let eval = |t: f64| {
            let tape = Tape::new();
            let zs: Vec<_> = z0.iter().map(|z| tape.leaf(z.clone())).collect();
            let (outs, _) = net.forward(&tape, &zs, &[t], None);
            outs[1].value().as_ref().clone()
        };
        let a = eval(0.0);
        let b = eval(1.0);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-8, "AdaIN must be sensitive to t");
    }

    #[test]
    fn gradients_wrt_z_and_c_match_fd() {
        let mut net = tiny(3);
        randomize_styles(&mut net, 22);
        let z0 = rand_fields(3, 2, &net.cfg.scales);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c0 = randn_init(&mut rng, &[2, 3], 1.0);
        let ts = [0.25, 0.75];

        let loss = |z_first: &ArrayD<f64>, c: &ArrayD<f64>| {
            let tape = Tape::new();
            let zs = vec![tape.leaf(z_first.clone()), tape.leaf(z0[1].clone())];
            let cv = tape.leaf(c.clone());
            let (outs, _) = net.forward(&tape, &zs, &ts, Some(cv));
            outs[0]
                .square()
                .mean_all()
                .add(outs[1].square().mean_all())
                .scalar_value()
        };

        let tape = Tape::new();
        let z_first = tape.leaf(z0[0].clone());
        let zs = vec![z_first, tape.leaf(z0[1].clone())];
        let cv = tape.leaf(c0.clone());
        let (outs, _) = net.forward(&tape, &zs, &ts, Some(cv));
        let y = outs[0].square().mean_all().add(outs[1].square().mean_all());
        let g = tape.backward(y);

        let fd_z = fd_gradient(|v| loss(v, &c0), &z0[0], 1e-5);
        let ez = rel_err_norm(g.wrt(z_first).as_slice().unwrap(), fd_z.as_slice().unwrap());
        assert!(ez < 1e-4, "z rel err {ez}");

        let fd_c = fd_gradient(|v| loss(&z0[0], v), &c0, 1e-5);
        let ec = rel_err_norm(g.wrt(cv).as_slice().unwrap(), fd_c.as_slice().unwrap());
        assert!(ec < 1e-4, "c rel err {ec}");
    }

    #[test]
    fn gradients_wrt_parameters_match_fd() {
        let mut net = tiny(2);
        randomize_styles(&mut net, 23);
        let z0 = rand_fields(5, 1, &net.cfg.scales);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let c0 = randn_init(&mut rng, &[1, 2], 1.0);
        let ts = [0.4];

        let tape = Tape::new();
        let zs: Vec<_> = z0.iter().map(|z| tape.leaf(z.clone())).collect();
        let (outs, bound) = net.forward(&tape, &zs, &ts, Some(tape.leaf(c0.clone())));
        let y = outs[0].square().mean_all().add(outs[1].square().mean_all());
        let grads = tape.backward(y);

        // Style trunk weight, first conv weight, a style projection, a
        // fusion conv, and a head weight.
        let check: Vec<usize> = vec![
            net.style_w_t,
            net.enc1[0].w,
            net.enc1[0].style.w_scale,
            net.fuse[0].w,
            net.head_w[1],
        ];
        for pi in check {
            let analytic = grads.wrt(bound[pi]);
            let mut net2 = net.clone();
            let x0 = net2.params.tensors[pi].value.clone();
            let fd = fd_gradient(
                |v| {
                    net2.params.tensors[pi].value = v.clone();
                    let tape = Tape::new();
                    let zs: Vec<_> = z0.iter().map(|z| tape.leaf(z.clone())).collect();
                    let (outs, _) = net2.forward(&tape, &zs, &ts, Some(tape.leaf(c0.clone())));
                    outs[0]
                        .square()
                        .mean_all()
                        .add(outs[1].square().mean_all())
                        .scalar_value()
                },
                &x0,
                1e-5,
            );
            let err = rel_err_norm(analytic.as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < 1e-4, "param {pi} rel err {err}");
        }
    }

    #[test]
    #[should_panic(expected = "integration time")]
    fn t_outside_unit_interval_is_rejected() {
        let net = tiny(0);
        let z0 = rand_fields(7, 1, &net.cfg.scales);
        let tape = Tape::new();
        let zs: Vec<_> = z0.iter().map(|z| tape.leaf(z.clone())).collect();
        let _ = net.forward(&tape, &zs, &[1.5], None);
    }

    #[test]
    #[should_panic(expected = "condition")]
    fn condition_mismatch_is_rejected() {
        let net = tiny(0);
        let z0 = rand_fields(8, 1, &net.cfg.scales);
        let tape = Tape::new();
        let zs: Vec<_> = z0.iter().map(|z| tape.leaf(z.clone())).collect();
        let c = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2])));
        let _ = net.forward(&tape, &zs, &[0.5], Some(c));
    }
}
