//! Multi-scale fusion network: fuses a sample embedding with the temporal
//! encoding of a frame and predicts one initial-value field per scale.

use super::{xavier_init, ParamSet};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub embed_dim: usize,
    /// Length of the temporal encoding (the cycle frame count).
    pub encoding_dim: usize,
    pub hidden: usize,
    /// Lattice dims per scale; each head emits `3 * D * H * W` values.
    pub scales: Vec<[usize; 3]>,
}

/// `f(e, k)`: shared two-layer trunk on the concatenated inputs, then one
/// linear head per scale reshaped to `(B, 3, D, H, W)`.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub cfg: FusionConfig,
    pub params: ParamSet,
}

// Parameter layout indices (fixed construction order).
const W_E: usize = 0;
const W_K: usize = 1;
const B_1: usize = 2;
const W_2: usize = 3;
const B_2: usize = 4;
const HEADS: usize = 5; // then (w, b) per scale

impl FusionNet {
    pub fn new(cfg: FusionConfig, seed: u64) -> FusionNet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let h = cfg.hidden;
        params.add("fusion.w_e", xavier_init(&mut rng, cfg.embed_dim, h, 1.0));
        params.add("fusion.w_k", xavier_init(&mut rng, cfg.encoding_dim, h, 1.0));
        params.add("fusion.b1", ArrayD::zeros(IxDyn(&[h])));
        params.add("fusion.w2", xavier_init(&mut rng, h, h, 1.0));
        params.add("fusion.b2", ArrayD::zeros(IxDyn(&[h])));
        for (l, dims) in cfg.scales.iter().enumerate() {
            let out = 3 * dims[0] * dims[1] * dims[2];
            params.add(
                format!("fusion.head{}.w", l + 1),
                xavier_init(&mut rng, h, out, 0.5),
            );
            params.add(format!("fusion.head{}.b", l + 1), ArrayD::zeros(IxDyn(&[out])));
        }
        FusionNet { cfg, params }
    }

    /// Forward pass for a batch: `e (B, embed_dim)`, `k (B, encoding_dim)`.
    /// Returns per-scale outputs `(B, 3, D, H, W)` plus the bound parameter
    /// variables aligned with `self.params.tensors`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        e: Var<'t>,
        k: Var<'t>,
    ) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        assert_eq!(e.shape()[1], self.cfg.embed_dim, "embedding dim mismatch");
        assert_eq!(k.shape()[1], self.cfg.encoding_dim, "encoding dim mismatch");
        let b = e.shape()[0];
        assert_eq!(k.shape()[0], b);
        let p = self.params.bind(tape);

        // Two matmuls add like a single matmul on the concatenated input.
        let h1 = e
            .matmul(p[W_E])
            .add(k.matmul(p[W_K]))
            .add_row_vec(p[B_1])
            .silu();
        let h2 = h1.matmul(p[W_2]).add_row_vec(p[B_2]).silu();

        let outs = self
            .cfg
            .scales
            .iter()
            .enumerate()
            .map(|(l, dims)| {
                let w = p[HEADS + 2 * l];
                let bias = p[HEADS + 2 * l + 1];
                h2.matmul(w)
                    .add_row_vec(bias)
                    .reshape(&[b, 3, dims[0], dims[1], dims[2]])
            })
            .collect();
        (outs, p)
    }
}
