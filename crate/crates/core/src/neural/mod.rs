//! Parameter containers, the Adam optimizer, and the two parameterized
//! networks of the generative flow: the multi-scale fusion network that
//! predicts learnable initial values and the multi-scale flow U-Net with
//! AdaIN conditioning on integration time and an optional condition vector.
//!
//! Differentiation runs on the [`crate::tape`] engine; every forward here
//! is a pure function of (inputs, parameters) and passes randomized central
//! finite-difference checks.

mod checkpoint;
mod fusion;
mod stats;
mod unet;

pub use checkpoint::{read_tensors, write_tensors, NamedTensor};
pub use fusion::{FusionConfig, FusionNet};
pub use stats::{empirical_embedding_stats, EmbeddingTable, GaussianStats};
pub use unet::{FlowUNet, UNetConfig};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// One named learnable tensor with its Adam moments.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> ParamTensor {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        ParamTensor {
            name: name.into(),
            value,
            m,
            v,
        }
    }
}

/// Ordered collection of parameters belonging to one module.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        self.tensors.push(ParamTensor::new(name, value));
        self.tensors.len() - 1
    }

    /// Registers every tensor on the tape, in order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|p| p.value.len()).sum()
    }

    /// Loads values by name, rejecting unknown names and shape mismatches.
    pub fn load_values(&mut self, named: &[(String, ArrayD<f64>)]) -> Result<()> {
        for (name, value) in named {
            let p = self
                .tensors
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Data(format!("unknown parameter `{name}` in checkpoint")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` shape mismatch: model {:?}, checkpoint {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}

/// Adam with bias correction. The step counter is part of the state;
/// non-finite gradients reject the whole step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        assert!(lr > 0.0, "learning rate must be positive");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Applies one update to every tensor of the set. `grads` aligns with
    /// `set.tensors`.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[ArrayD<f64>]) -> Result<()> {
        assert_eq!(grads.len(), set.tensors.len());
        for (p, g) in set.tensors.iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{}`: step rejected",
                    p.name
                )));
            }
            assert_eq!(g.shape(), p.value.shape(), "gradient shape for {}", p.name);
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (p, g) in set.tensors.iter_mut().zip(grads) {
            p.m.zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            p.v.zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|x, &m, &v| {
                    *x -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Adaptive instance normalization: per-channel instance norm over the
/// spatial axes followed by the affine modulation `scale * xhat + shift`.
pub fn adain<'t>(x: Var<'t>, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
    x.instance_norm(1e-5).modulate_channels(scale, shift)
}

/// Sinusoidal features of integration times: `[sin(2^j pi t), cos(2^j pi t)]`
/// for `j < freqs`, shape `(B, 2 * freqs)`.
pub fn t_features(ts: &[f64], freqs: usize) -> ArrayD<f64> {
    let mut data = Vec::with_capacity(ts.len() * 2 * freqs);
    for &t in ts {
        for j in 0..freqs {
            let w = (1u64 << j) as f64 * std::f64::consts::PI * t;
            data.push(w.sin());
            data.push(w.cos());
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[ts.len(), 2 * freqs]), data).unwrap()
}

/// Normal(0, std) tensor from the given rng.
pub fn randn_init(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Xavier-normal initialization for a dense `(fan_in, fan_out)` weight.
pub fn xavier_init(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize, gain: f64) -> ArrayD<f64> {
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    randn_init(rng, &[fan_in, fan_out], std)
}
