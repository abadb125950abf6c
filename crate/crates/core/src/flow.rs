//! The flow-matching engine: Beta time sampling, linear-path interpolation,
//! the multi-scale flow loss, forward-Euler integration, and the training
//! and generation loops for the unconditional, conditional, and
//! noise-input variants.
//!
//! One sequence-level latent draw feeds every frame of a generated
//! sequence; frames are then mutually independent, so a whole sequence is
//! produced in a single batched forward pass (bitwise equal to a
//! frame-by-frame loop).

use crate::encoding::{EncodingMode, EncodingTable};
use crate::error::{Error, Result};
use crate::ffd::{cascade_warp, ControlLattice, FFDField, MultiScaleFFD, WarpReport};
use crate::mesh::{Mesh, TemplateMesh};
use crate::neural::{
    empirical_embedding_stats, Adam, EmbeddingTable, FlowUNet, FusionNet, GaussianStats,
};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Gamma, StandardNormal};

/// How integration times are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    Beta,
    Uniform,
}

/// What feeds the flow's initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Learnable per-sample embedding through the fusion network.
    Embedding,
    /// Fresh `N(0, I)` embedding through the fusion network each step.
    FusionNoise,
    /// Fresh `N(0, I)` fields directly, bypassing the fusion network.
    FieldNoise,
}

/// Draws `t ~ Beta(a, b)` via two Gamma draws `x / (x + y)`.
pub fn beta_sample(a: f64, b: f64, rng: &mut ChaCha20Rng) -> Result<f64> {
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Config(format!("invalid Beta shapes ({a}, {b})")));
    }
    let ga = Gamma::new(a, 1.0).map_err(|e| Error::Config(format!("gamma: {e}")))?;
    let gb = Gamma::new(b, 1.0).map_err(|e| Error::Config(format!("gamma: {e}")))?;
    let x: f64 = rng.sample(ga);
    let y: f64 = rng.sample(gb);
    if x + y == 0.0 {
        return Ok(0.0);
    }
    Ok((x / (x + y)).clamp(0.0, 1.0))
}

/// Linear path `z^l = (1 - t) eps^l + t phi^l` on plain per-scale tensors.
pub fn interpolate(eps: &[ArrayD<f64>], phi: &[ArrayD<f64>], t: f64) -> Result<Vec<ArrayD<f64>>> {
    if eps.len() != phi.len() {
        return Err(Error::Data("scale count mismatch in interpolation".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("t = {t} outside [0, 1]")));
    }
    eps.iter()
        .zip(phi)
        .map(|(e, p)| {
            if e.shape() != p.shape() {
                return Err(Error::Data("field shape mismatch in interpolation".into()));
            }
            Ok(e * (1.0 - t) + p * t)
        })
        .collect()
}

/// Multi-scale flow-matching loss: per scale the mean over tensor entries
/// of `(u - (phi - eps))^2`, summed over scales.
pub fn fm_loss(u_pred: &[ArrayD<f64>], phi: &[ArrayD<f64>], eps: &[ArrayD<f64>]) -> Result<f64> {
    if u_pred.len() != phi.len() || phi.len() != eps.len() {
        return Err(Error::Data("scale count mismatch in flow loss".into()));
    }
    let mut total = 0.0;
    for ((u, p), e) in u_pred.iter().zip(phi).zip(eps) {
        if u.shape() != p.shape() || p.shape() != e.shape() {
            return Err(Error::Data("field shape mismatch in flow loss".into()));
        }
        let n = u.len() as f64;
        let mut acc = 0.0;
        for ((uv, pv), ev) in u.iter().zip(p.iter()).zip(e.iter()) {
            let d = uv - (pv - ev);
            acc += d * d;
        }
        total += acc / n;
    }
    Ok(total)
}

/// Forward-Euler integration of a per-scale velocity map with `K` steps of
/// size `1/K`. Aborts with the step index on a non-finite intermediate.
pub fn euler_integrate<F>(mut velocity: F, z0: Vec<ArrayD<f64>>, k_steps: usize) -> Result<Vec<ArrayD<f64>>>
where
    F: FnMut(&[ArrayD<f64>], f64) -> Result<Vec<ArrayD<f64>>>,
{
    if k_steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let h = 1.0 / k_steps as f64;
    let mut z = z0;
    for k in 0..k_steps {
        let t = k as f64 * h;
        let u = velocity(&z, t)?;
        for (zl, ul) in z.iter_mut().zip(&u) {
            *zl = &*zl + &(ul * h);
        }
        if z.iter().any(|zl| zl.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite state after Euler step {k}"
            )));
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Field layout conversions
// ---------------------------------------------------------------------------

/// `(D, H, W, 3)` field to channels-first `(3, D, H, W)`.
pub fn field_to_cf(f: &ArrayD<f64>) -> ArrayD<f64> {
    f.view()
        .permuted_axes(vec![3, 0, 1, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}

/// Channels-first `(3, D, H, W)` back to `(D, H, W, 3)`.
pub fn cf_to_field(f: &ArrayD<f64>) -> ArrayD<f64> {
    f.view()
        .permuted_axes(vec![1, 2, 3, 0])
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}

/// Stacks per-sample `(3, D, H, W)` tensors into `(B, 3, D, H, W)`.
fn stack_batch(items: &[&ArrayD<f64>]) -> ArrayD<f64> {
    let inner = items[0].shape().to_vec();
    let mut shape = vec![items.len()];
    shape.extend(&inner);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (i, it) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(it);
    }
    out
}

/// Extracts sample `i` of a `(B, ...)` tensor.
fn unstack(batch: &ArrayD<f64>, i: usize) -> ArrayD<f64> {
    batch
        .index_axis(ndarray::Axis(0), i)
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// Fitted fields for training, held channels-first per (sample, frame).
pub struct TrainSet {
    /// `fields[sample][frame][scale]` with shape `(3, D_l, H_l, W_l)`.
    pub fields: Vec<Vec<Vec<ArrayD<f64>>>>,
    /// Raw (unstandardized) condition vectors per sample.
    pub conditions: Option<Vec<Vec<f64>>>,
    pub n_frames: usize,
}

impl TrainSet {
    pub fn from_msfs(samples: Vec<Vec<MultiScaleFFD>>, conditions: Option<Vec<Vec<f64>>>) -> Result<TrainSet> {
        if samples.is_empty() || samples[0].is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let n_frames = samples[0].len();
        if samples.iter().any(|s| s.len() != n_frames) {
            return Err(Error::Data("inconsistent frame counts across samples".into()));
        }
        if let Some(c) = &conditions {
            if c.len() != samples.len() {
                return Err(Error::Data("condition count does not match samples".into()));
            }
        }
        let fields = samples
            .iter()
            .map(|frames| {
                frames
                    .iter()
                    .map(|msf| msf.fields.iter().map(|f| field_to_cf(&f.displacements)).collect())
                    .collect()
            })
            .collect();
        Ok(TrainSet {
            fields,
            conditions,
            n_frames,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.fields.len()
    }

    pub fn n_scales(&self) -> usize {
        self.fields[0][0].len()
    }
}

/// Per-component standardization statistics for condition vectors.
#[derive(Debug, Clone)]
pub struct CondStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CondStats {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<CondStats> {
        if rows.is_empty() {
            return Err(Error::Data("no condition vectors".into()));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt().max(1e-12);
        }
        Ok(CondStats { mean, std })
    }

    pub fn standardize(&self, c: &[f64]) -> Vec<f64> {
        c.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub time_sampling: TimeSampling,
    pub input_mode: InputMode,
    pub conditional: bool,
    pub seed: u64,
    pub sigma: f64,
    pub enc_mode: EncodingMode,
}

/// The generative model: fusion network, flow U-Net, and lattice geometry.
pub struct FlowModel {
    pub fusion: FusionNet,
    pub unet: FlowUNet,
    pub lattices: Vec<ControlLattice>,
}

impl FlowModel {
    pub fn scale_dims(&self) -> Vec<[usize; 3]> {
        self.lattices.iter().map(|l| l.dims).collect()
    }
}

pub struct Trainer {
    pub model: FlowModel,
    pub embeddings: Option<EmbeddingTable>,
    pub cond_stats: Option<CondStats>,
    pub cfg: TrainConfig,
    pub encoding: EncodingTable,
    adam_fusion: Adam,
    adam_unet: Adam,
    adam_embed: Option<Adam>,
    pub rng: ChaCha20Rng,
    pub steps_done: u64,
}

impl Trainer {
    /// Builds a trainer. An embedding table is created only in
    /// [`InputMode::Embedding`]; condition statistics only when conditional.
    pub fn new(model: FlowModel, cfg: TrainConfig, data: &TrainSet, n_frames: usize) -> Result<Trainer> {
        if cfg.conditional && data.conditions.is_none() {
            return Err(Error::Data(
                "conditional training requires condition labels".into(),
            ));
        }
        if cfg.conditional && cfg.input_mode == InputMode::Embedding {
            return Err(Error::Config(
                "conditional training replaces the embedding with fresh noise".into(),
            ));
        }
        let embeddings = if cfg.input_mode == InputMode::Embedding {
            Some(EmbeddingTable::new(
                data.n_samples(),
                model.fusion.cfg.embed_dim,
                cfg.seed ^ 0x9e3779b97f4a7c15,
            ))
        } else {
            None
        };
        let cond_stats = if cfg.conditional {
            Some(CondStats::from_rows(data.conditions.as_ref().unwrap())?)
        } else {
            None
        };
        let adam_embed = embeddings.as_ref().map(|_| Adam::new(cfg.lr));
        Ok(Trainer {
            encoding: EncodingTable::new(n_frames, cfg.sigma, cfg.enc_mode),
            adam_fusion: Adam::new(cfg.lr),
            adam_unet: Adam::new(cfg.lr),
            adam_embed,
            rng: ChaCha20Rng::seed_from_u64(cfg.seed),
            embeddings,
            cond_stats,
            model,
            cfg,
            steps_done: 0,
        })
    }

    fn draw_time(&mut self) -> Result<f64> {
        match self.cfg.time_sampling {
            TimeSampling::Beta => beta_sample(self.cfg.beta_a, self.cfg.beta_b, &mut self.rng),
            TimeSampling::Uniform => Ok(self.rng.gen::<f64>()),
        }
    }

    /// One optimization step over a freshly drawn batch. Returns the loss.
    pub fn step(&mut self, data: &TrainSet) -> Result<f64> {
        let b = self.cfg.batch_size;
        let n_scales = data.n_scales();
        let de = self.model.fusion.cfg.embed_dim;

        // Fixed draw order keeps runs reproducible: ids, frames, times,
        // then any noise embeddings.
        let ids: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..data.n_samples())).collect();
        let taus: Vec<usize> = (0..b).map(|_| self.rng.gen_range(1..=data.n_frames)).collect();
        let ts: Vec<f64> = (0..b).map(|_| self.draw_time()).collect::<Result<_>>()?;

        // Batched targets per scale.
        let phi_b: Vec<ArrayD<f64>> = (0..n_scales)
            .map(|l| {
                let items: Vec<&ArrayD<f64>> = ids
                    .iter()
                    .zip(&taus)
                    .map(|(&id, &tau)| &data.fields[id][tau - 1][l])
                    .collect();
                stack_batch(&items)
            })
            .collect();

        // Temporal encodings.
        let mut kdata = Vec::with_capacity(b * data.n_frames);
        for &tau in &taus {
            kdata.extend(self.encoding.row(tau)?);
        }
        let k_arr = ArrayD::from_shape_vec(IxDyn(&[b, data.n_frames]), kdata).unwrap();

        // Condition rows (standardized).
        let cond_arr = if self.cfg.conditional {
            let stats = self.cond_stats.as_ref().unwrap();
            let conds = data.conditions.as_ref().unwrap();
            let dim = stats.mean.len();
            let mut cdata = Vec::with_capacity(b * dim);
            for &id in &ids {
                cdata.extend(stats.standardize(&conds[id]));
            }
            Some(ArrayD::from_shape_vec(IxDyn(&[b, dim]), cdata).unwrap())
        } else {
            None
        };

        let tape = Tape::new();

        // Initial values per input mode.
        let (eps_vars, fusion_bound, embed_var): (Vec<Var>, Option<Vec<Var>>, Option<Var>) =
            match self.cfg.input_mode {
                InputMode::Embedding => {
                    let table = self.embeddings.as_ref().unwrap();
                    let table_var = table.params.bind(&tape)[0];
                    let idx = std::rc::Rc::new(ids.clone());
                    let e = table_var.gather_rows(idx);
                    let (eps, bound) = self.model.fusion.forward(&tape, e, tape.leaf(k_arr));
                    (eps, Some(bound), Some(table_var))
                }
                InputMode::FusionNoise => {
                    let mut edata = Vec::with_capacity(b * de);
                    for _ in 0..b * de {
                        edata.push(self.rng.sample::<f64, _>(StandardNormal));
                    }
                    let e = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[b, de]), edata).unwrap());
                    let (eps, bound) = self.model.fusion.forward(&tape, e, tape.leaf(k_arr));
                    (eps, Some(bound), None)
                }
                InputMode::FieldNoise => {
                    let eps = phi_b
                        .iter()
                        .map(|p| {
                            let n: usize = p.len();
                            let data: Vec<f64> =
                                (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
                            tape.leaf(
                                ArrayD::from_shape_vec(IxDyn(&p.shape().to_vec()), data).unwrap(),
                            )
                        })
                        .collect();
                    (eps, None, None)
                }
            };

        // z = (1 - t) eps + t phi, per batch element.
        let phi_vars: Vec<Var> = phi_b.iter().map(|p| tape.leaf(p.clone())).collect();
        let tcol = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[b]), ts.clone()).unwrap());
        let one_minus_t = tcol.mul_scalar(-1.0).add_scalar(1.0);
        let zs: Vec<Var> = eps_vars
            .iter()
            .zip(&phi_vars)
            .map(|(e, p)| {
                let shape = e.shape();
                let flat: usize = shape[1..].iter().product();
                let e2 = e.reshape(&[b, flat]).scale_rows(one_minus_t);
                let p2 = p.reshape(&[b, flat]).scale_rows(tcol);
                e2.add(p2).reshape(&shape)
            })
            .collect();

        let cond_var = cond_arr.map(|c| tape.leaf(c));
        let (us, unet_bound) = self.model.unet.forward(&tape, &zs, &ts, cond_var);

        // Loss: sum over scales of mean squared (u - (phi - eps)).
        let mut loss = tape.scalar(0.0);
        for ((u, p), e) in us.iter().zip(&phi_vars).zip(&eps_vars) {
            let target = p.sub(*e);
            loss = loss.add(u.sub(target).square().mean_all());
        }

        let loss_value = loss.scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss at step {}",
                self.steps_done
            )));
        }

        let grads = tape.backward(loss);

        if let Some(bound) = &fusion_bound {
            let g: Vec<ArrayD<f64>> = bound.iter().map(|v| grads.wrt(*v)).collect();
            self.adam_fusion.step(&mut self.model.fusion.params, &g)?;
        }
        let gu: Vec<ArrayD<f64>> = unet_bound.iter().map(|v| grads.wrt(*v)).collect();
        self.adam_unet.step(&mut self.model.unet.params, &gu)?;
        if let (Some(table), Some(evar), Some(adam)) =
            (self.embeddings.as_mut(), embed_var, self.adam_embed.as_mut())
        {
            adam.step(&mut table.params, &[grads.wrt(evar)])?;
        }

        self.steps_done += 1;
        Ok(loss_value)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Record of the latent draw behind one generated sequence.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenRecord {
    pub embedding: Vec<f64>,
    pub condition: Option<Vec<f64>>,
}

/// Velocity evaluation shared by generation paths: runs the U-Net on plain
/// per-scale states.
fn velocity(
    model: &FlowModel,
    zs: &[ArrayD<f64>],
    t: f64,
    cond: Option<&ArrayD<f64>>,
) -> Result<Vec<ArrayD<f64>>> {
    let tape = Tape::new();
    let zvars: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
    let b = zs[0].shape()[0];
    let ts = vec![t; b];
    let cvar = cond.map(|c| tape.leaf(c.clone()));
    let (us, _) = model.unet.forward(&tape, &zvars, &ts, cvar);
    Ok(us.iter().map(|u| u.value().as_ref().clone()).collect())
}

/// Generates one sequence of `n_frames` meshes from a fixed latent vector.
/// All frames run as one batch; `k_steps` Euler steps integrate the flow.
fn generate_sequence(
    model: &FlowModel,
    template: &TemplateMesh,
    encoding: &EncodingTable,
    e: &[f64],
    cond_std: Option<&[f64]>,
    k_steps: usize,
    n_frames: usize,
) -> Result<(Vec<Mesh>, WarpReport)> {
    let de = model.fusion.cfg.embed_dim;
    assert_eq!(e.len(), de);

    // Batch of N frames sharing the sequence latent.
    let mut edata = Vec::with_capacity(n_frames * de);
    let mut kdata = Vec::with_capacity(n_frames * encoding.n_frames);
    for tau in 1..=n_frames {
        edata.extend_from_slice(e);
        kdata.extend(encoding.row(tau)?);
    }
    let cond_arr = cond_std.map(|c| {
        let mut data = Vec::with_capacity(n_frames * c.len());
        for _ in 0..n_frames {
            data.extend_from_slice(c);
        }
        ArrayD::from_shape_vec(IxDyn(&[n_frames, c.len()]), data).unwrap()
    });

    let eps: Vec<ArrayD<f64>> = {
        let tape = Tape::new();
        let ev = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[n_frames, de]), edata).unwrap());
        let kv = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[n_frames, encoding.n_frames]), kdata).unwrap(),
        );
        let (outs, _) = model.fusion.forward(&tape, ev, kv);
        outs.iter().map(|o| o.value().as_ref().clone()).collect()
    };

    let phi = euler_integrate(
        |zs, t| velocity(model, zs, t, cond_arr.as_ref()),
        eps,
        k_steps,
    )?;

    let mut meshes = Vec::with_capacity(n_frames);
    let mut report = WarpReport::default();
    for f in 0..n_frames {
        let fields: Vec<FFDField> = phi
            .iter()
            .enumerate()
            .map(|(l, p)| FFDField {
                scale: l + 1,
                displacements: cf_to_field(&unstack(p, f)),
            })
            .collect();
        let msf = MultiScaleFFD {
            fields,
            frame: Some(f + 1),
        };
        let (mesh, r) = cascade_warp(template, &msf, &model.lattices)?;
        meshes.push(mesh);
        report = report.merge(r);
    }
    Ok((meshes, report))
}

/// Unconditional generation: one draw from the empirical embedding Gaussian
/// per sequence, then a batched one-step (or `k_steps`) flow.
pub fn generate_uncond(
    model: &FlowModel,
    stats: &GaussianStats,
    template: &TemplateMesh,
    encoding: &EncodingTable,
    rng: &mut ChaCha20Rng,
    k_steps: usize,
    n_frames: usize,
) -> Result<(Vec<Mesh>, GenRecord, WarpReport)> {
    let e = stats.sample(rng)?;
    let (meshes, report) =
        generate_sequence(model, template, encoding, &e, None, k_steps, n_frames)?;
    Ok((
        meshes,
        GenRecord {
            embedding: e,
            condition: None,
        },
        report,
    ))
}

/// Conditional generation: `e ~ N(0, I)` per sequence, raw condition
/// standardized against the training statistics.
pub fn generate_cond(
    model: &FlowModel,
    cond_raw: &[f64],
    cond_stats: &CondStats,
    template: &TemplateMesh,
    encoding: &EncodingTable,
    rng: &mut ChaCha20Rng,
    k_steps: usize,
    n_frames: usize,
) -> Result<(Vec<Mesh>, GenRecord, WarpReport)> {
    if cond_raw.len() != cond_stats.mean.len() {
        return Err(Error::Config(format!(
            "condition has {} components, expected {}",
            cond_raw.len(),
            cond_stats.mean.len()
        )));
    }
    if model.unet.cfg.condition_dim != cond_raw.len() {
        return Err(Error::Config(
            "checkpoint was not trained with this condition dimension".into(),
        ));
    }
    let de = model.fusion.cfg.embed_dim;
    let e: Vec<f64> = (0..de).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let c_std = cond_stats.standardize(cond_raw);
    let (meshes, report) =
        generate_sequence(model, template, encoding, &e, Some(&c_std), k_steps, n_frames)?;
    Ok((
        meshes,
        GenRecord {
            embedding: e,
            condition: Some(cond_raw.to_vec()),
        },
        report,
    ))
}

/// Empirical embedding prior of a trained unconditional model.
pub fn embedding_prior(trainer: &Trainer) -> Result<GaussianStats> {
    let table = trainer
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Data("no embedding table (not an unconditional run)".into()))?;
    empirical_embedding_stats(table)
}
