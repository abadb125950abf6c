//! Direct FFD fitting: produces ground-truth multi-scale fields by
//! optimizing control-point displacements against per-frame target point
//! clouds under a structure-wise sum of Chamfer distance, edge-length
//! standard deviation, and a curvature-correlation penalty.
//!
//! Scales are fitted coarse to fine: each scale is optimized alone while
//! the previous scales stay frozen, then the warped points become the next
//! scale's input.

use crate::error::{Error, Result};
use crate::ffd::{bspline_warp, warp_var, ControlLattice, FFDField, MultiScaleFFD};
use crate::mesh::{curvature_var, scalar_stats, MeshTopology, PointCloud, TemplateMesh};
use crate::neural::{Adam, ParamSet};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

// ---------------------------------------------------------------------------
// Exact nearest neighbors on a uniform grid
// ---------------------------------------------------------------------------

/// Uniform spatial hash over a point set. Queries are exact: rings of cells
/// are scanned outward until no closer point can exist.
pub struct PointGrid {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl PointGrid {
    pub fn build(points: &[[f64; 3]]) -> PointGrid {
        assert!(!points.is_empty());
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(0.0)).collect();
        let diag = extent.iter().map(|e| e * e).sum::<f64>().sqrt();
        // Diagonal-based sizing stays sane for flat or degenerate clouds.
        let cell = (diag / (points.len() as f64).cbrt()).max(1e-9);
        let dims = [
            ((extent[0] / cell).ceil() as usize).clamp(1, 256),
            ((extent[1] / cell).ceil() as usize).clamp(1, 256),
            ((extent[2] / cell).ceil() as usize).clamp(1, 256),
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let index_of = |p: &[f64; 3]| -> usize {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1);
            }
            (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
        };
        for (i, p) in points.iter().enumerate() {
            buckets[index_of(p)].push(i as u32);
        }
        PointGrid {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            buckets,
        }
    }

    /// Index and squared distance of the exact nearest point.
    ///
    /// Rings of cells around the query's (grid-clamped) cell are scanned
    /// outward. A cell at Chebyshev ring r holds no point closer than
    /// `(r - 1) * cell`; clamping the start cell only moves it toward the
    /// query, so the bound stays valid for off-grid queries.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let mut c = [0isize; 3];
        let mut span = 0isize;
        for a in 0..3 {
            let raw = ((q[a] - self.origin[a]) / self.cell).floor() as isize;
            c[a] = raw.clamp(0, self.dims[a] as isize - 1);
            span = span.max(c[a]).max(self.dims[a] as isize - 1 - c[a]);
        }
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=span {
            if ring > 1 {
                let bound = (ring - 1) as f64 * self.cell;
                if bound * bound > best.1 {
                    break;
                }
            }
            for dz in -ring..=ring {
                let z = c[2] + dz;
                if z < 0 || z >= self.dims[2] as isize {
                    continue;
                }
                for dy in -ring..=ring {
                    let y = c[1] + dy;
                    if y < 0 || y >= self.dims[1] as isize {
                        continue;
                    }
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let x = c[0] + dx;
                        if x < 0 || x >= self.dims[0] as isize {
                            continue;
                        }
                        let bucket = &self.buckets
                            [(x as usize * self.dims[1] + y as usize) * self.dims[2] + z as usize];
                        for &pi in bucket {
                            let p = &self.points[pi as usize];
                            let d = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d < best.1 {
                                best = (pi as usize, d);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Symmetric sum-of-squared-nearest-neighbor Chamfer distance.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("chamfer on empty point set".into()));
    }
    let (fwd, bwd) = chamfer_directed(a, b);
    Ok(fwd + bwd)
}

/// Mean-per-point Chamfer: each directed sum normalized by its point count.
pub fn chamfer_mean(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("chamfer on empty point set".into()));
    }
    let (fwd, bwd) = chamfer_directed(a, b);
    Ok(fwd / a.len() as f64 + bwd / b.len() as f64)
}

fn chamfer_directed(a: &[[f64; 3]], b: &[[f64; 3]]) -> (f64, f64) {
    let ga = PointGrid::build(a);
    let gb = PointGrid::build(b);
    let fwd: f64 = a.iter().map(|p| gb.nearest(p).1).sum();
    let bwd: f64 = b.iter().map(|q| ga.nearest(q).1).sum();
    (fwd, bwd)
}

/// Differentiable Chamfer against a fixed target cloud. Nearest-neighbor
/// correspondences are frozen at the forward pass, which is the exact
/// gradient almost everywhere.
pub fn chamfer_var<'t>(tape: &'t Tape, points: Var<'t>, target: Rc<Vec<[f64; 3]>>) -> Var<'t> {
    let pv = points.value();
    assert_eq!(pv.ndim(), 2);
    assert_eq!(pv.shape()[1], 3);
    let n = pv.shape()[0];
    let pts: Vec<[f64; 3]> = pv
        .as_slice()
        .unwrap()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    let grid_t = PointGrid::build(&target);
    let grid_p = PointGrid::build(&pts);

    let mut loss = 0.0;
    // point -> target assignments
    let fwd_nn: Vec<usize> = pts
        .iter()
        .map(|p| {
            let (i, d) = grid_t.nearest(p);
            loss += d;
            i
        })
        .collect();
    // target -> point assignments
    let bwd_nn: Vec<usize> = target
        .iter()
        .map(|q| {
            let (i, d) = grid_p.nearest(q);
            loss += d;
            i
        })
        .collect();

    let out = ArrayD::from_elem(IxDyn(&[]), loss);
    let target_c = Rc::clone(&target);
    tape.custom(out, &[points], move |g| {
        let gv = *g.iter().next().unwrap();
        let mut gp = vec![0.0; n * 3];
        for (pi, &ti) in fwd_nn.iter().enumerate() {
            let (p, q) = (&pts[pi], &target_c[ti]);
            for a in 0..3 {
                gp[pi * 3 + a] += gv * 2.0 * (p[a] - q[a]);
            }
        }
        for (qi, &pi) in bwd_nn.iter().enumerate() {
            let (p, q) = (&pts[pi], &target_c[qi]);
            for a in 0..3 {
                gp[pi * 3 + a] += gv * 2.0 * (p[a] - q[a]);
            }
        }
        vec![ArrayD::from_shape_vec(IxDyn(&[n, 3]), gp).unwrap()]
    })
}

// ---------------------------------------------------------------------------
// Regularization losses
// ---------------------------------------------------------------------------

/// Pearson correlation between a variable and a constant vector. Returns
/// `None` when either side has (numerically) zero variance.
fn pearson_var<'t>(tape: &'t Tape, x: Var<'t>, y: &[f64]) -> Option<Var<'t>> {
    let n = y.len() as f64;
    let (ymean, ystd) = scalar_stats(y);
    let xv = x.value();
    let (_, xstd) = {
        let vals: Vec<f64> = xv.iter().copied().collect();
        scalar_stats(&vals)
    };
    if ystd < 1e-12 || xstd < 1e-12 {
        return None;
    }
    let yc: Vec<f64> = y.iter().map(|v| v - ymean).collect();
    let ynorm = (yc.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let ycv = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[y.len()]), yc).unwrap());

    let xm = x.mean_all();
    let xc = x.add_svar(xm.mul_scalar(-1.0));
    let num = xc.mul(ycv).sum_all();
    let den = xc.square().sum_all().add_scalar(1e-300).sqrt().mul_scalar(ynorm);
    let _ = n;
    Some(num.div(den))
}

/// Curvature loss per structure: `1 - r(H, H0)`, with `r` treated as zero
/// (loss 1) when a curvature vector is constant. Returns the loss variable
/// and the names of degenerate structures.
pub fn curvature_loss_var<'t>(
    tape: &'t Tape,
    verts: Var<'t>,
    template: &TemplateMesh,
    topo: &MeshTopology,
) -> (Var<'t>, Vec<String>) {
    let h = curvature_var(tape, verts, topo).reshape(&[topo.nv, 1]);
    let mut total = tape.scalar(0.0);
    let mut degenerate = Vec::new();
    for s in &template.mesh.structures {
        let range = s.vertex_range.clone();
        let idx: Rc<Vec<usize>> = Rc::new(range.clone().collect());
        let hs = h.gather_rows(idx).reshape(&[range.len()]);
        let h0 = &template.reference_curvature[range];
        match pearson_var(tape, hs, h0) {
            Some(r) => {
                total = total.add(r.mul_scalar(-1.0).add_scalar(1.0));
            }
            None => {
                total = total.add_scalar(1.0);
                degenerate.push(s.name.clone());
            }
        }
    }
    (total, degenerate)
}

/// Scalar curvature loss of a warped mesh against the template.
pub fn curvature_loss(mesh: &crate::mesh::Mesh, template: &TemplateMesh) -> Result<f64> {
    if mesh.vertex_count() != template.mesh.vertex_count() {
        return Err(Error::Data("vertex counts differ (no correspondence)".into()));
    }
    let tape = Tape::new();
    let verts = tape.leaf(mesh.vertex_array());
    let topo = MeshTopology::of(mesh);
    let (loss, _) = curvature_loss_var(&tape, verts, template, &topo);
    Ok(loss.scalar_value())
}

/// Edge-length standard deviation per structure, summed, on the tape.
fn edge_loss_var<'t>(tape: &'t Tape, verts: Var<'t>, template: &TemplateMesh) -> Var<'t> {
    let mut total = tape.scalar(0.0);
    for s in &template.mesh.structures {
        let edges = &template.mesh.edges[s.edge_range.clone()];
        let ia: Rc<Vec<usize>> = Rc::new(edges.iter().map(|e| e[0]).collect());
        let ib: Rc<Vec<usize>> = Rc::new(edges.iter().map(|e| e[1]).collect());
        let d = verts.gather_rows(ia).sub(verts.gather_rows(ib));
        let len = d.square().sum_cols().add_scalar(1e-300).sqrt();
        let m1 = len.mean_all();
        let m2 = len.square().mean_all();
        let var = m2.sub(m1.square());
        total = total.add(var.clamp(0.0, f64::INFINITY).add_scalar(1e-30).sqrt());
    }
    total
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

/// Fitting weights and optimizer schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub w_edge: f64,
    pub w_curv: f64,
    /// Iteration cap per scale.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Mean-per-point Chamfer acceptance threshold as a fraction of the
    /// squared target bounding-box diagonal.
    pub chamfer_threshold_frac: f64,
    /// Stop a scale early when the accepted loss improved by less than this
    /// relative amount over `patience` iterations.
    pub early_stop_rel: f64,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            w_edge: 0.5,
            w_curv: 1.0,
            iterations: 300,
            learning_rate: 1e-2,
            chamfer_threshold_frac: 0.02,
            early_stop_rel: 1e-4,
            patience: 30,
        }
    }
}

/// Per-term loss breakdown, each term already summed over structures.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub chamfer: f64,
    pub edge: f64,
    pub curvature: f64,
    pub total: f64,
}

/// Structure-wise total loss of a warped mesh against a labeled target
/// cloud: `L_cd + w_edge L_edge + w_curv L_curv` summed over structures.
pub fn total_loss(
    mesh: &crate::mesh::Mesh,
    template: &TemplateMesh,
    target: &PointCloud,
    cfg: &FitConfig,
) -> Result<LossBreakdown> {
    let mut cd = 0.0;
    let mut edge = 0.0;
    for s in &mesh.structures {
        let verts = &mesh.vertices[s.vertex_range.clone()];
        let tpts = target.structure_points(&s.name)?;
        cd += chamfer(verts, tpts)?;
        let (_, std) = crate::mesh::edge_stats(mesh, &s.name)?;
        edge += std;
    }
    let curv = curvature_loss(mesh, template)?;
    Ok(LossBreakdown {
        chamfer: cd,
        edge,
        curvature: curv,
        total: cd + cfg.w_edge * edge + cfg.w_curv * curv,
    })
}

/// Tape version of [`total_loss`] on warped vertices.
fn total_loss_var<'t>(
    tape: &'t Tape,
    verts: Var<'t>,
    template: &TemplateMesh,
    topo: &MeshTopology,
    targets: &[Rc<Vec<[f64; 3]>>],
    cfg: &FitConfig,
) -> Var<'t> {
    let mut cd = tape.scalar(0.0);
    for (s, t) in template.mesh.structures.iter().zip(targets) {
        let idx: Rc<Vec<usize>> = Rc::new(s.vertex_range.clone().collect());
        let sv = verts.gather_rows(idx);
        cd = cd.add(chamfer_var(tape, sv, Rc::clone(t)));
    }
    let edge = edge_loss_var(tape, verts, template);
    let (curv, _) = curvature_loss_var(tape, verts, template, topo);
    cd.add(edge.mul_scalar(cfg.w_edge)).add(curv.mul_scalar(cfg.w_curv))
}

// ---------------------------------------------------------------------------
// Per-frame coarse-to-fine fitting
// ---------------------------------------------------------------------------

/// Outcome of fitting one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameFit {
    pub frame: usize,
    pub breakdown: LossBreakdown,
    /// Mean-per-point Chamfer per structure.
    pub chamfer_mean: Vec<(String, f64)>,
    /// Squared-diagonal thresholds per structure.
    pub thresholds: Vec<f64>,
    pub converged: bool,
    pub accepted_losses: Vec<f64>,
}

/// Fits one frame's multi-scale fields to its target cloud.
pub fn fit_frame(
    template: &TemplateMesh,
    lattices: &[ControlLattice],
    target: &PointCloud,
    cfg: &FitConfig,
    frame: usize,
) -> Result<(MultiScaleFFD, FrameFit)> {
    let topo = MeshTopology::of(&template.mesh);
    let target_rcs: Vec<Rc<Vec<[f64; 3]>>> = template
        .mesh
        .structures
        .iter()
        .map(|s| Ok(Rc::new(target.structure_points(&s.name)?.to_vec())))
        .collect::<Result<_>>()?;

    let mut fields: Vec<FFDField> = Vec::with_capacity(lattices.len());
    let mut points_in = template.mesh.vertices.clone();
    let mut accepted_losses = Vec::new();

    for (l, lattice) in lattices.iter().enumerate() {
        let mut params = ParamSet::default();
        let [d, h, w] = lattice.dims;
        params.add(format!("field{}", l + 1), ArrayD::zeros(IxDyn(&[d, h, w, 3])));
        let mut adam = Adam::new(cfg.learning_rate);

        let pts_arr = {
            let flat: Vec<f64> = points_in.iter().flatten().copied().collect();
            ArrayD::from_shape_vec(IxDyn(&[points_in.len(), 3]), flat).unwrap()
        };

        let mut prev_loss = f64::INFINITY;
        let mut snapshot: Option<(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)> = None;
        let mut scale_losses: Vec<f64> = Vec::new();

        for _iter in 0..cfg.iterations {
            let tape = Tape::new();
            let pv = tape.leaf(pts_arr.clone());
            let fv = tape.leaf(params.tensors[0].value.clone());
            let warped = warp_var(&tape, pv, fv, lattice);
            let loss = total_loss_var(&tape, warped, template, &topo, &target_rcs, cfg);
            let loss_val = loss.scalar_value();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite fit loss at frame {frame}, scale {}",
                    l + 1
                )));
            }

            if loss_val > prev_loss {
                // Backtrack: restore the last accepted state, halve the rate.
                let (v, m, mv) = snapshot.clone().unwrap();
                params.tensors[0].value = v;
                params.tensors[0].m = m;
                params.tensors[0].v = mv;
                adam.lr *= 0.5;
                if adam.lr < 1e-7 {
                    break;
                }
                continue;
            }

            prev_loss = loss_val;
            scale_losses.push(loss_val);
            snapshot = Some((
                params.tensors[0].value.clone(),
                params.tensors[0].m.clone(),
                params.tensors[0].v.clone(),
            ));

            if scale_losses.len() > cfg.patience {
                let old = scale_losses[scale_losses.len() - 1 - cfg.patience];
                if (old - loss_val).abs() <= cfg.early_stop_rel * old.abs().max(1e-12) {
                    break;
                }
            }

            let grads = tape.backward(loss);
            adam.step(&mut params, &[grads.wrt(fv)])?;
        }
        // The last accepted state is the fitted field.
        if let Some((v, _, _)) = snapshot {
            params.tensors[0].value = v;
        }
        accepted_losses.extend(scale_losses);

        let field = FFDField {
            scale: l + 1,
            displacements: params.tensors[0].value.clone(),
        };
        let (next, _) = bspline_warp(&points_in, lattice, &field)?;
        points_in = next;
        fields.push(field);
    }

    // Final acceptance measurements.
    let fitted = template.mesh.with_vertices(points_in);
    let breakdown = total_loss(&fitted, template, target, cfg)?;
    let mut chamfer_mean_rows = Vec::new();
    let mut thresholds = Vec::new();
    let mut converged = true;
    for s in &fitted.structures {
        let verts = &fitted.vertices[s.vertex_range.clone()];
        let tpts = target.structure_points(&s.name)?;
        let cm = chamfer_mean(verts, tpts)?;
        let diag2 = bbox_diag_sq(tpts);
        let thr = cfg.chamfer_threshold_frac * diag2;
        if cm > thr {
            converged = false;
        }
        chamfer_mean_rows.push((s.name.clone(), cm));
        thresholds.push(thr);
    }

    Ok((
        MultiScaleFFD {
            fields,
            frame: Some(frame),
        },
        FrameFit {
            frame,
            breakdown,
            chamfer_mean: chamfer_mean_rows,
            thresholds,
            converged,
            accepted_losses,
        },
    ))
}

/// Squared bounding-box diagonal of a point set.
pub fn bbox_diag_sq(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum()
}

/// Fits every frame independently (in parallel), in frame order.
pub fn fit_ffd(
    template: &TemplateMesh,
    lattices: &[ControlLattice],
    targets: &[PointCloud],
    cfg: &FitConfig,
) -> Result<(Vec<MultiScaleFFD>, Vec<FrameFit>)> {
    if targets.is_empty() {
        return Err(Error::Data("no target frames to fit".into()));
    }
    let results: Vec<Result<(MultiScaleFFD, FrameFit)>> = targets
        .par_iter()
        .enumerate()
        .map(|(i, t)| fit_frame(template, lattices, t, cfg, i + 1))
        .collect();
    let mut fields = Vec::with_capacity(targets.len());
    let mut reports = Vec::with_capacity(targets.len());
    for r in results {
        let (f, rep) = r?;
        fields.push(f);
        reports.push(rep);
    }
    Ok((fields, reports))
}
