//! Multi-scale cubic B-spline free-form deformation.
//!
//! A scale's deformation is defined by displacement vectors on a regular
//! control lattice over the unit domain; points are warped by the cubic
//! tensor-product interpolation of the 4x4x4 support cell. Scales are
//! applied in sequence (coarse to fine), each over the static unit domain.
//!
//! Lattice geometry: `dims[a]` control points along axis `a` span
//! `dims[a] - 3` cells over `[0, 1]`, leaving one margin control point on
//! each side so the cubic support never leaves the grid. This is why
//! `dims >= 4` is required.

use crate::error::{Error, Result};
use crate::mesh::{Mesh, TemplateMesh};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

/// Regular control lattice for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLattice {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

impl ControlLattice {
    /// Lattice over the unit domain with one margin control point per side.
    pub fn for_unit_domain(dims: [usize; 3]) -> Result<ControlLattice> {
        for &d in &dims {
            if d < 4 {
                return Err(Error::Config(format!(
                    "lattice dims must be >= 4 per axis, got {dims:?}"
                )));
            }
        }
        let spacing = [
            1.0 / (dims[0] - 3) as f64,
            1.0 / (dims[1] - 3) as f64,
            1.0 / (dims[2] - 3) as f64,
        ];
        Ok(ControlLattice {
            dims,
            origin: [-spacing[0], -spacing[1], -spacing[2]],
            spacing,
        })
    }

    pub fn control_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Validated nested lattices for all scales: dims strictly increase per axis.
pub fn lattices_from_dims(dims: &[[usize; 3]]) -> Result<Vec<ControlLattice>> {
    if dims.is_empty() {
        return Err(Error::Config("at least one lattice scale required".into()));
    }
    for w in dims.windows(2) {
        for a in 0..3 {
            if w[1][a] <= w[0][a] {
                return Err(Error::Config(format!(
                    "lattice dims must strictly increase with scale: {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
    }
    dims.iter().map(|&d| ControlLattice::for_unit_domain(d)).collect()
}

/// Control-point displacements at one scale, shape `(D, H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FFDField {
    pub scale: usize,
    pub displacements: ArrayD<f64>,
}

impl FFDField {
    pub fn zeros(scale: usize, lattice: &ControlLattice) -> FFDField {
        let [d, h, w] = lattice.dims;
        FFDField {
            scale,
            displacements: ArrayD::zeros(IxDyn(&[d, h, w, 3])),
        }
    }

    pub fn matches(&self, lattice: &ControlLattice) -> bool {
        let [d, h, w] = lattice.dims;
        self.displacements.shape() == [d, h, w, 3]
    }
}

/// Ordered stack of per-scale fields, optionally tagged with its frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFFD {
    pub fields: Vec<FFDField>,
    pub frame: Option<usize>,
}

impl MultiScaleFFD {
    pub fn zeros(lattices: &[ControlLattice]) -> MultiScaleFFD {
        MultiScaleFFD {
            fields: lattices
                .iter()
                .enumerate()
                .map(|(i, l)| FFDField::zeros(i + 1, l))
                .collect(),
            frame: None,
        }
    }

    pub fn validate(&self, lattices: &[ControlLattice]) -> Result<()> {
        if self.fields.len() != lattices.len() {
            return Err(Error::Data(format!(
                "expected {} scales, got {}",
                lattices.len(),
                self.fields.len()
            )));
        }
        for (i, (f, l)) in self.fields.iter().zip(lattices).enumerate() {
            if f.scale != i + 1 {
                return Err(Error::Data(format!("scale {} out of order", f.scale)));
            }
            if !f.matches(l) {
                return Err(Error::Data(format!(
                    "field shape {:?} does not match lattice {:?} at scale {}",
                    f.displacements.shape(),
                    l.dims,
                    i + 1
                )));
            }
            if f.displacements.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite displacement at scale {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Out-of-domain points encountered (and clamped) during a warp.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WarpReport {
    pub clamped: usize,
}

impl WarpReport {
    pub fn merge(self, other: WarpReport) -> WarpReport {
        WarpReport {
            clamped: self.clamped + other.clamped,
        }
    }
}

/// Cubic uniform B-spline basis at local coordinate `u` in `[0, 1]`.
#[inline]
pub fn cubic_basis(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
        (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
        u * u * u / 6.0,
    ]
}

/// Derivative of [`cubic_basis`] with respect to `u`.
#[inline]
fn cubic_basis_deriv(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -v * v / 2.0,
        (3.0 * u * u - 4.0 * u) / 2.0,
        (-3.0 * u * u + 2.0 * u + 1.0) / 2.0,
        u * u / 2.0,
    ]
}

/// Per-point support-cell lookup: cell index, local coordinate, clamped flag.
#[inline]
fn locate(x: f64, dim: usize, spacing: f64) -> (usize, f64, bool) {
    let clamped = !(0.0..=1.0).contains(&x);
    let xc = x.clamp(0.0, 1.0);
    let max_cell = dim - 4;
    let c = ((xc / spacing).floor() as usize).min(max_cell);
    (c, xc / spacing - c as f64, clamped)
}

/// Warps points by one field: `p' = p + sum B_i(u) B_j(v) B_k(w) d_ijk`.
/// Out-of-domain points are clamped for the lattice lookup and counted in
/// the report.
pub fn bspline_warp(
    points: &[[f64; 3]],
    lattice: &ControlLattice,
    field: &FFDField,
) -> Result<(Vec<[f64; 3]>, WarpReport)> {
    if !field.matches(lattice) {
        return Err(Error::Data(format!(
            "field shape {:?} does not match lattice dims {:?}",
            field.displacements.shape(),
            lattice.dims
        )));
    }
    let mut report = WarpReport::default();
    let mut out = Vec::with_capacity(points.len());
    let d = field.displacements.as_slice().unwrap();
    for p in points {
        let (disp, any_clamped, _) = displacement_at(p, lattice, d);
        if any_clamped {
            report.clamped += 1;
        }
        out.push([p[0] + disp[0], p[1] + disp[1], p[2] + disp[2]]);
    }
    Ok((out, report))
}

/// Displacement and support data for one point. Returns the displacement,
/// whether any axis was clamped, and the (cell, local coord, clamped) triple
/// per axis.
#[inline]
fn displacement_at(
    p: &[f64; 3],
    lattice: &ControlLattice,
    field: &[f64],
) -> ([f64; 3], bool, [(usize, f64, bool); 3]) {
    let [dd, dh, dw] = lattice.dims;
    let loc = [
        locate(p[0], dd, lattice.spacing[0]),
        locate(p[1], dh, lattice.spacing[1]),
        locate(p[2], dw, lattice.spacing[2]),
    ];
    let bx = cubic_basis(loc[0].1);
    let by = cubic_basis(loc[1].1);
    let bz = cubic_basis(loc[2].1);
    let mut disp = [0.0; 3];
    for (i, &wx) in bx.iter().enumerate() {
        let xi = loc[0].0 + i;
        for (j, &wy) in by.iter().enumerate() {
            let yj = loc[1].0 + j;
            let wxy = wx * wy;
            for (k, &wz) in bz.iter().enumerate() {
                let zk = loc[2].0 + k;
                let w = wxy * wz;
                let base = ((xi * dh + yj) * dw + zk) * 3;
                disp[0] += w * field[base];
                disp[1] += w * field[base + 1];
                disp[2] += w * field[base + 2];
            }
        }
    }
    let any = loc[0].2 || loc[1].2 || loc[2].2;
    (disp, any, loc)
}

/// Differentiable warp on the tape: gradients flow to both the points and
/// the displacement field through the exact analytic adjoint.
pub fn warp_var<'t>(
    tape: &'t Tape,
    points: Var<'t>,
    field: Var<'t>,
    lattice: &ControlLattice,
) -> Var<'t> {
    let pts = points.value();
    let fld = field.value();
    assert_eq!(pts.ndim(), 2);
    assert_eq!(pts.shape()[1], 3);
    let [dd, dh, dw] = lattice.dims;
    assert_eq!(fld.shape(), &[dd, dh, dw, 3]);

    let n = pts.shape()[0];
    let pslice = pts.as_slice().unwrap();
    let fslice = fld.as_slice().unwrap();
    let lat = lattice.clone();

    let mut out = vec![0.0; n * 3];
    let mut locs = Vec::with_capacity(n);
    for (pi, chunk) in pslice.chunks_exact(3).enumerate() {
        let p = [chunk[0], chunk[1], chunk[2]];
        let (disp, _, loc) = displacement_at(&p, &lat, fslice);
        out[pi * 3] = p[0] + disp[0];
        out[pi * 3 + 1] = p[1] + disp[1];
        out[pi * 3 + 2] = p[2] + disp[2];
        locs.push(loc);
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[n, 3]), out).unwrap();

    let fld_c = fld.clone();
    tape.custom(out, &[points, field], move |g| {
        let gs = g.as_slice().unwrap();
        let f = fld_c.as_slice().unwrap();
        let mut gp = vec![0.0; n * 3];
        let mut gf = vec![0.0; dd * dh * dw * 3];
        for (pi, loc) in locs.iter().enumerate() {
            let gout = [gs[pi * 3], gs[pi * 3 + 1], gs[pi * 3 + 2]];
            let bx = cubic_basis(loc[0].1);
            let by = cubic_basis(loc[1].1);
            let bz = cubic_basis(loc[2].1);
            // The local coordinate's derivative w.r.t. the point is
            // 1/spacing on unclamped axes, 0 where the lookup clamped.
            let dbx = cubic_basis_deriv(loc[0].1);
            let dby = cubic_basis_deriv(loc[1].1);
            let dbz = cubic_basis_deriv(loc[2].1);
            let sx = if loc[0].2 { 0.0 } else { 1.0 / lat.spacing[0] };
            let sy = if loc[1].2 { 0.0 } else { 1.0 / lat.spacing[1] };
            let sz = if loc[2].2 { 0.0 } else { 1.0 / lat.spacing[2] };

            let mut jac_g = [0.0; 3]; // J^T g accumulated over the support
            for i in 0..4 {
                let xi = loc[0].0 + i;
                for j in 0..4 {
                    let yj = loc[1].0 + j;
                    for k in 0..4 {
                        let zk = loc[2].0 + k;
                        let base = ((xi * dh + yj) * dw + zk) * 3;
                        let w = bx[i] * by[j] * bz[k];
                        let gdotd =
                            gout[0] * f[base] + gout[1] * f[base + 1] + gout[2] * f[base + 2];
                        jac_g[0] += dbx[i] * by[j] * bz[k] * sx * gdotd;
                        jac_g[1] += bx[i] * dby[j] * bz[k] * sy * gdotd;
                        jac_g[2] += bx[i] * by[j] * dbz[k] * sz * gdotd;
                        gf[base] += w * gout[0];
                        gf[base + 1] += w * gout[1];
                        gf[base + 2] += w * gout[2];
                    }
                }
            }
            gp[pi * 3] = gout[0] + jac_g[0];
            gp[pi * 3 + 1] = gout[1] + jac_g[1];
            gp[pi * 3 + 2] = gout[2] + jac_g[2];
        }
        vec![
            ArrayD::from_shape_vec(IxDyn(&[n, 3]), gp).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[dd, dh, dw, 3]), gf).unwrap(),
        ]
    })
}

/// Applies all scales in order to the template, copying topology unchanged.
pub fn cascade_warp(
    template: &TemplateMesh,
    msf: &MultiScaleFFD,
    lattices: &[ControlLattice],
) -> Result<(Mesh, WarpReport)> {
    msf.validate(lattices)?;
    let mut points = template.mesh.vertices.clone();
    let mut report = WarpReport::default();
    for (field, lattice) in msf.fields.iter().zip(lattices) {
        let (next, r) = bspline_warp(&points, lattice, field)?;
        points = next;
        report = report.merge(r);
    }
    Ok((template.mesh.with_vertices(points), report))
}

/// Differentiable cascade on the tape: per-scale field variables applied in
/// order starting from the given vertex variable.
pub fn cascade_warp_var<'t>(
    tape: &'t Tape,
    template_verts: Var<'t>,
    fields: &[Var<'t>],
    lattices: &[ControlLattice],
) -> Var<'t> {
    assert_eq!(fields.len(), lattices.len());
    let mut pts = template_verts;
    for (f, l) in fields.iter().zip(lattices) {
        pts = warp_var(tape, pts, *f, l);
    }
    pts
}

// ---------------------------------------------------------------------------
// FFDT binary format
// ---------------------------------------------------------------------------

const FFDT_MAGIC: &[u8; 4] = b"FFDT";
const FFDT_VERSION: u32 = 1;

/// Writes the stack in the FFDT layout: magic, version, scale count, then
/// per scale dims and row-major (component-fastest) little-endian f32 data.
pub fn write_ffdt(path: &Path, msf: &MultiScaleFFD) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(FFDT_MAGIC);
    buf.extend_from_slice(&FFDT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(msf.fields.len() as u32).to_le_bytes());
    for f in &msf.fields {
        let s = f.displacements.shape();
        for &d in &s[..3] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in f.displacements.as_slice().unwrap() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a FFDT file written by [`write_ffdt`].
pub fn read_ffdt(path: &Path) -> Result<MultiScaleFFD> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data(format!("truncated FFDT file {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != FFDT_MAGIC {
        return Err(Error::Data(format!("bad FFDT magic in {}", path.display())));
    }
    let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if ver != FFDT_VERSION {
        return Err(Error::Data(format!("unsupported FFDT version {ver}")));
    }
    let nscales = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut fields = Vec::with_capacity(nscales);
    for scale in 1..=nscales {
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let count = dims[0] * dims[1] * dims[2] * 3;
        let raw = take(&mut pos, count * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        fields.push(FFDField {
            scale,
            displacements: ArrayD::from_shape_vec(IxDyn(&[dims[0], dims[1], dims[2], 3]), data)
                .unwrap(),
        });
    }
    if pos != bytes.len() {
        return Err(Error::Data(format!(
            "trailing bytes in FFDT file {}",
            path.display()
        )));
    }
    Ok(MultiScaleFFD { fields, frame: None })
}
