//! Multi-structure triangle meshes and the differential measurements used
//! by losses and metrics.
//!
//! A [`Mesh`] partitions its vertices and faces into named closed
//! sub-surfaces. The template is built from subdivided-icosahedron
//! ellipsoids; curvature is the cotangent Laplace-Beltrami mean-curvature
//! normal with Voronoi-mixed vertex areas, signed against the area-weighted
//! vertex normal.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;

/// Cotangents are clamped to this range so near-degenerate triangles do not
/// blow up the Laplacian weights.
pub const COT_CLAMP: f64 = 20.0;

/// One named closed sub-surface of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub name: String,
    pub face_range: Range<usize>,
    pub vertex_range: Range<usize>,
    pub edge_range: Range<usize>,
}

/// Triangle mesh partitioned into named closed structures.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub structures: Vec<Structure>,
    /// Unique undirected edges, grouped contiguously per structure.
    pub edges: Vec<[usize; 2]>,
}

/// Template mesh plus its cached per-vertex reference curvature.
#[derive(Debug, Clone)]
pub struct TemplateMesh {
    pub mesh: Mesh,
    pub reference_curvature: Vec<f64>,
}

/// Labeled point set aligned with the template structures.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub structures: Vec<(String, Range<usize>)>,
}

impl PointCloud {
    pub fn structure_points(&self, name: &str) -> Result<&[[f64; 3]]> {
        let (_, r) = self
            .structures
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("unknown point-cloud structure `{name}`")))?;
        Ok(&self.points[r.clone()])
    }
}

/// Ellipsoid structure specification for [`build_template`].
#[derive(Debug, Clone)]
pub struct StructureSpec {
    pub name: String,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub subdivision: usize,
}

impl Mesh {
    /// Builds a mesh from raw parts, deriving edges and validating the
    /// structure invariants: ranges disjoint and covering, every structure
    /// a closed orientable surface, all coordinates finite.
    pub fn new(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[usize; 3]>,
        structures: Vec<(String, Range<usize>, Range<usize>)>,
    ) -> Result<Mesh> {
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Data("non-finite vertex coordinate".into()));
        }
        let mut next_v = 0;
        let mut next_f = 0;
        let mut full = Vec::with_capacity(structures.len());
        let mut edges = Vec::new();
        for (name, face_range, vertex_range) in structures {
            if face_range.start != next_f || vertex_range.start != next_v {
                return Err(Error::Data(format!(
                    "structure `{name}` ranges are not contiguous"
                )));
            }
            next_f = face_range.end;
            next_v = vertex_range.end;
            let sfaces = &faces[face_range.clone()];
            // Closed orientable surface: every directed edge appears once,
            // paired with its reverse.
            let mut directed = BTreeMap::new();
            for f in sfaces {
                for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                    if a < vertex_range.start || a >= vertex_range.end {
                        return Err(Error::Data(format!(
                            "structure `{name}` face references vertex {a} outside its range"
                        )));
                    }
                    if *directed.entry((a, b)).or_insert(0usize) >= 1 {
                        return Err(Error::Data(format!(
                            "structure `{name}` is not manifold: repeated directed edge"
                        )));
                    }
                    *directed.get_mut(&(a, b)).unwrap() += 1;
                }
            }
            let estart = edges.len();
            for (&(a, b), _) in directed.iter() {
                if !directed.contains_key(&(b, a)) {
                    return Err(Error::Data(format!(
                        "structure `{name}` is not closed: boundary edge ({a},{b})"
                    )));
                }
                if a < b {
                    edges.push([a, b]);
                }
            }
            full.push(Structure {
                name,
                face_range,
                vertex_range,
                edge_range: estart..edges.len(),
            });
        }
        if next_f != faces.len() || next_v != vertices.len() {
            return Err(Error::Data("structure ranges do not cover the mesh".into()));
        }
        Ok(Mesh {
            vertices,
            faces,
            structures: full,
            edges,
        })
    }

    pub fn structure(&self, name: &str) -> Result<&Structure> {
        self.structures
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("unknown structure `{name}`")))
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Replaces vertex positions, keeping topology. Lengths must match.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Mesh {
        assert_eq!(vertices.len(), self.vertices.len());
        Mesh {
            vertices,
            faces: self.faces.clone(),
            structures: self.structures.clone(),
            edges: self.edges.clone(),
        }
    }

    /// Vertex positions as an `(V, 3)` tensor.
    pub fn vertex_array(&self) -> ArrayD<f64> {
        let flat: Vec<f64> = self.vertices.iter().flatten().copied().collect();
        ArrayD::from_shape_vec(IxDyn(&[self.vertices.len(), 3]), flat).unwrap()
    }
}

/// Converts an `(V, 3)` tensor back to vertex triples.
pub fn array_to_vertices(arr: &ArrayD<f64>) -> Vec<[f64; 3]> {
    assert_eq!(arr.ndim(), 2);
    assert_eq!(arr.shape()[1], 3);
    arr.as_slice()
        .unwrap()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

// ---------------------------------------------------------------------------
// Template construction
// ---------------------------------------------------------------------------

/// Icosahedron subdivided `k` times, projected to the unit sphere.
/// Vertex count is `10 * 4^k + 2`.
fn icosphere(subdivision: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let normalize = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    for v in verts.iter_mut() {
        *v = normalize(*v);
    }
    for _ in 0..subdivision {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0usize; 3];
            for (e, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].iter().enumerate() {
                let key = (*a.min(b), *a.max(b));
                mids[e] = *midpoint.entry(key).or_insert_with(|| {
                    let (va, vb) = (verts[*a], verts[*b]);
                    verts.push(normalize([
                        (va[0] + vb[0]) / 2.0,
                        (va[1] + vb[1]) / 2.0,
                        (va[2] + vb[2]) / 2.0,
                    ]));
                    verts.len() - 1
                });
            }
            new_faces.push([f[0], mids[0], mids[2]]);
            new_faces.push([f[1], mids[1], mids[0]]);
            new_faces.push([f[2], mids[2], mids[1]]);
            new_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = new_faces;
    }
    (verts, faces)
}

/// Builds the multi-structure ellipsoid template and caches its reference
/// curvature.
///
/// Rejects specs whose surfaces leave `[0.05, 0.95]^3`, non-positive
/// semi-axes, and subdivision below 2 (curvature needs the resolution).
pub fn build_template(specs: &[StructureSpec]) -> Result<TemplateMesh> {
    if specs.is_empty() {
        return Err(Error::Config("template needs at least one structure".into()));
    }
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut structures = Vec::new();
    for spec in specs {
        if spec.semi_axes.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config(format!(
                "structure `{}` has non-positive semi-axis",
                spec.name
            )));
        }
        if spec.subdivision < 2 {
            return Err(Error::Config(format!(
                "structure `{}` subdivision must be >= 2",
                spec.name
            )));
        }
        for axis in 0..3 {
            let lo = spec.center[axis] - spec.semi_axes[axis];
            let hi = spec.center[axis] + spec.semi_axes[axis];
            if lo < 0.05 || hi > 0.95 {
                return Err(Error::Config(format!(
                    "structure `{}` leaves the [0.05, 0.95]^3 domain on axis {axis}",
                    spec.name
                )));
            }
        }
        let (sv, sf) = icosphere(spec.subdivision);
        let voff = vertices.len();
        let foff = faces.len();
        vertices.extend(sv.iter().map(|v| {
            [
                spec.center[0] + spec.semi_axes[0] * v[0],
                spec.center[1] + spec.semi_axes[1] * v[1],
                spec.center[2] + spec.semi_axes[2] * v[2],
            ]
        }));
        faces.extend(sf.iter().map(|f| [f[0] + voff, f[1] + voff, f[2] + voff]));
        structures.push((spec.name.clone(), foff..faces.len(), voff..vertices.len()));
    }
    let mesh = Mesh::new(vertices, faces, structures)?;
    let reference_curvature = mean_curvature(&mesh);
    Ok(TemplateMesh {
        mesh,
        reference_curvature,
    })
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

/// Divergence-theorem volume of one closed structure. Positive for outward
/// (counter-clockwise) face orientation.
pub fn signed_volume(mesh: &Mesh, structure: &str) -> Result<f64> {
    let s = mesh.structure(structure)?;
    let mut vol = 0.0;
    for f in &mesh.faces[s.face_range.clone()] {
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        vol += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
    }
    Ok(vol / 6.0)
}

/// Mean and population standard deviation of a structure's edge lengths.
pub fn edge_stats(mesh: &Mesh, structure: &str) -> Result<(f64, f64)> {
    let s = mesh.structure(structure)?;
    let edges = &mesh.edges[s.edge_range.clone()];
    if edges.is_empty() {
        return Err(Error::Data(format!("structure `{structure}` has no edges")));
    }
    let lengths: Vec<f64> = edges
        .iter()
        .map(|e| {
            let (a, b) = (mesh.vertices[e[0]], mesh.vertices[e[1]]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect();
    Ok(scalar_stats(&lengths))
}

/// Mean and population standard deviation of a sample.
pub fn scalar_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Face-corner and edge index tables shared by the differentiable mesh
/// measurements.
#[derive(Clone)]
pub struct MeshTopology {
    pub nv: usize,
    pub corner: [Rc<Vec<usize>>; 3],
    pub edge_a: Rc<Vec<usize>>,
    pub edge_b: Rc<Vec<usize>>,
}

impl MeshTopology {
    pub fn of(mesh: &Mesh) -> MeshTopology {
        MeshTopology {
            nv: mesh.vertices.len(),
            corner: [
                Rc::new(mesh.faces.iter().map(|f| f[0]).collect()),
                Rc::new(mesh.faces.iter().map(|f| f[1]).collect()),
                Rc::new(mesh.faces.iter().map(|f| f[2]).collect()),
            ],
            edge_a: Rc::new(mesh.edges.iter().map(|e| e[0]).collect()),
            edge_b: Rc::new(mesh.edges.iter().map(|e| e[1]).collect()),
        }
    }
}

/// Differentiable per-vertex mean curvature of `verts` (`(V, 3)` on the
/// tape) with the mesh's topology. Returns a `(V,)` variable.
///
/// Cotangent weights are clamped to `[-COT_CLAMP, COT_CLAMP]`; vertex areas
/// are Voronoi-mixed; the sign comes from the area-weighted vertex normal.
pub fn curvature_var<'t>(tape: &'t Tape, verts: Var<'t>, topo: &MeshTopology) -> Var<'t> {
    let nf = topo.corner[0].len();
    let v0 = verts.gather_rows(Rc::clone(&topo.corner[0]));
    let v1 = verts.gather_rows(Rc::clone(&topo.corner[1]));
    let v2 = verts.gather_rows(Rc::clone(&topo.corner[2]));

    let e01 = v1.sub(v0);
    let e02 = v2.sub(v0);
    let e12 = v2.sub(v1);

    // Unnormalized face normal; its length is twice the face area.
    let fnorm = e01.cross3(e02);
    let a2 = fnorm.square().sum_cols().add_scalar(1e-300).sqrt();
    let inv_a2 = a2.recip();

    // cot of each corner angle: dot of adjacent edges over twice the area.
    let cot0 = e01.mul(e02).sum_cols().mul(inv_a2).clamp(-COT_CLAMP, COT_CLAMP);
    let cot1 = e01.neg().mul(e12).sum_cols().mul(inv_a2).clamp(-COT_CLAMP, COT_CLAMP);
    let cot2 = e02.mul(e12).sum_cols().mul(inv_a2).clamp(-COT_CLAMP, COT_CLAMP);

    // Cotangent Laplacian L V: the edge opposite each corner receives that
    // corner's cotangent weight.
    let mut lv = tape.leaf(ArrayD::zeros(IxDyn(&[topo.nv, 3])));
    for (cot, ia, ib, va, vb) in [
        (cot0, &topo.corner[1], &topo.corner[2], v1, v2),
        (cot1, &topo.corner[0], &topo.corner[2], v0, v2),
        (cot2, &topo.corner[0], &topo.corner[1], v0, v1),
    ] {
        let half = cot.mul_scalar(0.5);
        let d = vb.sub(va).scale_rows(half);
        lv = lv.add(d.scatter_add_rows(Rc::clone(ia), topo.nv));
        lv = lv.add(d.neg().scatter_add_rows(Rc::clone(ib), topo.nv));
    }

    // Voronoi-mixed vertex areas (mixed cells): Voronoi weights for
    // non-obtuse triangles, area/2 at the obtuse corner and area/4 at the
    // others otherwise. Obtuseness masks are data-dependent constants.
    let se01 = e01.square().sum_cols();
    let se02 = e02.square().sum_cols();
    let se12 = e12.square().sum_cols();
    let area = a2.mul_scalar(0.5);

    let cot_vars = [cot0, cot1, cot2];
    let cvals: Vec<_> = cot_vars.iter().map(|c| c.value()).collect();
    let mut nonobtuse = vec![1.0; nf];
    for c in &cvals {
        for (m, &v) in nonobtuse.iter_mut().zip(c.iter()) {
            if v < 0.0 {
                *m = 0.0;
            }
        }
    }
    let mask_no = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[nf]), nonobtuse).unwrap());
    let mask_ob = mask_no.mul_scalar(-1.0).add_scalar(1.0);

    let vor = [
        se01.mul(cot_vars[2]).add(se02.mul(cot_vars[1])).mul_scalar(0.125),
        se01.mul(cot_vars[2]).add(se12.mul(cot_vars[0])).mul_scalar(0.125),
        se12.mul(cot_vars[0]).add(se02.mul(cot_vars[1])).mul_scalar(0.125),
    ];

    let mut vertex_area = tape.leaf(ArrayD::zeros(IxDyn(&[topo.nv, 1])));
    for (ci, vor_c) in vor.into_iter().enumerate() {
        let obtuse_here: Vec<f64> = cvals[ci]
            .iter()
            .map(|&v| if v < 0.0 { 1.0 } else { 0.0 })
            .collect();
        let m_here = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[nf]), obtuse_here).unwrap());
        let m_other = mask_ob.sub(m_here.mul(mask_ob));
        // Non-obtuse: Voronoi; obtuse at this corner: A/2; obtuse elsewhere: A/4.
        let contrib = vor_c
            .mul(mask_no)
            .add(area.mul(m_here.mul(mask_ob)).mul_scalar(0.5))
            .add(area.mul(m_other).mul_scalar(0.25));
        let col = contrib.reshape(&[nf, 1]);
        vertex_area = vertex_area.add(col.scatter_add_rows(Rc::clone(&topo.corner[ci]), topo.nv));
    }

    // Mean-curvature normal K = -(L V) / A; H = |K| / 2 signed against the
    // area-weighted vertex normal.
    let inv_area = vertex_area.reshape(&[topo.nv]).add_scalar(1e-300).recip();
    let k = lv.neg().scale_rows(inv_area);

    let mut vnormal = tape.leaf(ArrayD::zeros(IxDyn(&[topo.nv, 3])));
    for ci in 0..3 {
        vnormal = vnormal.add(fnorm.scatter_add_rows(Rc::clone(&topo.corner[ci]), topo.nv));
    }

    let kdotn = k.mul(vnormal).sum_cols();
    let sign: Vec<f64> = kdotn
        .value()
        .iter()
        .map(|&d| if d >= 0.0 { 0.5 } else { -0.5 })
        .collect();
    let half_sign = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[topo.nv]), sign).unwrap());
    k.square().sum_cols().add_scalar(1e-300).sqrt().mul(half_sign)
}

/// Per-vertex mean curvature of a mesh (non-differentiating wrapper).
pub fn mean_curvature(mesh: &Mesh) -> Vec<f64> {
    let tape = Tape::new();
    let verts = tape.leaf(mesh.vertex_array());
    let h = curvature_var(&tape, verts, &MeshTopology::of(mesh));
    h.value().as_slice().unwrap().to_vec()
}

// ---------------------------------------------------------------------------
// OBJ I/O
// ---------------------------------------------------------------------------

/// Writes an ASCII OBJ with one `g` group per structure, 9 significant
/// digits per coordinate, 1-based face indices.
pub fn export_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {:.8e} {:.8e} {:.8e}", v[0], v[1], v[2]).unwrap();
    }
    for s in &mesh.structures {
        writeln!(out, "g {}", s.name).unwrap();
        for f in &mesh.faces[s.face_range.clone()] {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a mesh written by [`export_obj`]. Structure vertex ranges are
/// recovered from the face indices of each group.
pub fn import_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)?;
    let mut vertices = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in c.iter_mut() {
                    *slot = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Data(format!("bad vertex at line {}", lineno + 1)))?;
                }
                vertices.push(c);
            }
            Some("g") => {
                let name = it.next().unwrap_or("default").to_string();
                groups.push((name, faces.len()));
            }
            Some("f") => {
                let mut f = [0usize; 3];
                for slot in f.iter_mut() {
                    let tok = it
                        .next()
                        .ok_or_else(|| Error::Data(format!("bad face at line {}", lineno + 1)))?;
                    let idx: usize = tok
                        .split('/')
                        .next()
                        .unwrap()
                        .parse()
                        .map_err(|_| Error::Data(format!("bad face index at line {}", lineno + 1)))?;
                    *slot = idx - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    if groups.is_empty() {
        groups.push(("default".into(), 0));
    }
    let mut structures = Vec::new();
    for (i, (name, fstart)) in groups.iter().enumerate() {
        let fend = groups.get(i + 1).map(|g| g.1).unwrap_or(faces.len());
        let (mut vmin, mut vmax) = (usize::MAX, 0usize);
        for f in &faces[*fstart..fend] {
            for &v in f {
                vmin = vmin.min(v);
                vmax = vmax.max(v);
            }
        }
        structures.push((name.clone(), *fstart..fend, vmin..vmax + 1));
    }
    Mesh::new(vertices, faces, structures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_spec(name: &str, r: f64, center: [f64; 3], sub: usize) -> StructureSpec {
        StructureSpec {
            name: name.into(),
            center,
            semi_axes: [r, r, r],
            subdivision: sub,
        }
    }

    fn unit_cube() -> Mesh {
        // 12 triangles, outward orientation.
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
        ];
        let f = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        Mesh::new(v, f, vec![("cube".into(), 0..12, 0..8)]).unwrap()
    }

    #[test]
    fn template_counts_follow_subdivision_formula() {
        let t = build_template(&[sphere_spec("s", 0.3, [0.5, 0.5, 0.5], 3)]).unwrap();
        assert_eq!(t.mesh.vertices.len(), 642);
        assert_eq!(t.mesh.faces.len(), 1280);

        let t2 = build_template(&[
            sphere_spec("a", 0.1, [0.3, 0.5, 0.5], 3),
            sphere_spec("b", 0.1, [0.7, 0.5, 0.5], 3),
        ])
        .unwrap();
        assert_eq!(t2.mesh.vertices.len(), 2 * 642);
        assert_eq!(t2.mesh.structures.len(), 2);
        assert_eq!(t2.mesh.structures[1].vertex_range, 642..1284);
    }

    #[test]
    fn template_vertices_lie_on_the_ellipsoid() {
        let a = 0.25;
        let t = build_template(&[sphere_spec("s", a, [0.5, 0.5, 0.5], 3)]).unwrap();
        for v in &t.mesh.vertices {
            let d = ((v[0] - 0.5).powi(2) + (v[1] - 0.5).powi(2) + (v[2] - 0.5).powi(2)).sqrt();
            assert!((d - a).abs() < 1e-12);
        }
    }

    #[test]
    fn template_rejects_bad_specs() {
        assert!(build_template(&[sphere_spec("s", 0.6, [0.5, 0.5, 0.5], 3)]).is_err());
        assert!(build_template(&[sphere_spec("s", 0.2, [0.5, 0.5, 0.5], 1)]).is_err());
        let mut bad = sphere_spec("s", 0.2, [0.5, 0.5, 0.5], 2);
        bad.semi_axes[1] = -0.1;
        assert!(build_template(&[bad]).is_err());
    }

    #[test]
    fn cube_volume_is_exact() {
        let m = unit_cube();
        assert!((signed_volume(&m, "cube").unwrap() - 1.0).abs() < 1e-14);
        assert!(signed_volume(&m, "nope").is_err());

        // Flipping orientation negates the volume.
        let flipped: Vec<[usize; 3]> = m.faces.iter().map(|f| [f[0], f[2], f[1]]).collect();
        let mf = Mesh {
            faces: flipped,
            ..m.clone()
        };
        assert!((signed_volume(&mf, "cube").unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn icosphere_volume_approaches_analytic() {
        let r = 0.3;
        let t = build_template(&[sphere_spec("s", r, [0.5, 0.5, 0.5], 4)]).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        let v = signed_volume(&t.mesh, "s").unwrap();
        assert!((v - analytic).abs() / analytic < 0.005, "v={v} vs {analytic}");
    }

    #[test]
    fn volume_scaling_and_translation_invariance() {
        let t = build_template(&[sphere_spec("s", 0.2, [0.5, 0.5, 0.5], 3)]).unwrap();
        let v0 = signed_volume(&t.mesh, "s").unwrap();
        let s = 1.7;
        let scaled = t.mesh.with_vertices(
            t.mesh
                .vertices
                .iter()
                .map(|v| [v[0] * s, v[1] * s, v[2] * s])
                .collect(),
        );
        let vs = signed_volume(&scaled, "s").unwrap();
        assert!((vs - s.powi(3) * v0).abs() / vs.abs() < 1e-12);

        let shifted = t.mesh.with_vertices(
            t.mesh
                .vertices
                .iter()
                .map(|v| [v[0] + 11.0, v[1] - 3.0, v[2] + 0.5])
                .collect(),
        );
        let vt = signed_volume(&shifted, "s").unwrap();
        assert!((vt - v0).abs() / v0.abs() < 1e-10);
    }

    #[test]
    fn edge_stats_basics() {
        let (mean, std) = scalar_stats(&[1.0, 3.0]);
        assert!((mean - 2.0).abs() < 1e-15);
        assert!((std - 1.0).abs() < 1e-15);

        // Regular tetrahedron: all edges equal.
        let s = 1.0 / 3.0_f64.sqrt();
        let v = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        let f = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let m = Mesh::new(v, f, vec![("t".into(), 0..4, 0..4)]).unwrap();
        let (_, std) = edge_stats(&m, "t").unwrap();
        assert!(std < 1e-14);

        // Uniform scale doubles the std.
        let t = build_template(&[sphere_spec("s", 0.2, [0.5, 0.5, 0.5], 2)]).unwrap();
        let (_, std1) = edge_stats(&t.mesh, "s").unwrap();
        let scaled = t.mesh.with_vertices(
            t.mesh
                .vertices
                .iter()
                .map(|v| [v[0] * 2.0, v[1] * 2.0, v[2] * 2.0])
                .collect(),
        );
        let (_, std2) = edge_stats(&scaled, "s").unwrap();
        assert!((std2 - 2.0 * std1).abs() < 1e-12);
    }

    #[test]
    fn edge_std_invariant_under_rigid_motion() {
        let t = build_template(&[sphere_spec("s", 0.2, [0.5, 0.5, 0.5], 2)]).unwrap();
        let (_, std1) = edge_stats(&t.mesh, "s").unwrap();
        // Rotation about z plus a translation.
        let (c, s) = (0.7_f64.cos(), 0.7_f64.sin());
        let moved = t.mesh.with_vertices(
            t.mesh
                .vertices
                .iter()
                .map(|v| [c * v[0] - s * v[1] + 2.0, s * v[0] + c * v[1] - 1.0, v[2] + 4.0])
                .collect(),
        );
        let (_, std2) = edge_stats(&moved, "s").unwrap();
        assert!((std1 - std2).abs() < 1e-12);
    }

    #[test]
    fn sphere_curvature_matches_inverse_radius() {
        let t = build_template(&[sphere_spec("s", 0.4, [0.5, 0.5, 0.5], 4)]).unwrap();
        let expect = 1.0 / 0.4;
        for &h in &t.reference_curvature {
            assert!(
                (h - expect).abs() / expect < 0.02,
                "h={h}, expected ~{expect}"
            );
        }
        // Radius 0.25 at lower subdivision still lands near 1/r = 4.
        let t2 = build_template(&[sphere_spec("s", 0.25, [0.5, 0.5, 0.5], 3)]).unwrap();
        let mean: f64 =
            t2.reference_curvature.iter().sum::<f64>() / t2.reference_curvature.len() as f64;
        assert!((mean - 4.0).abs() / 4.0 < 0.02);
    }

    #[test]
    fn curvature_halves_under_doubling() {
        let t = build_template(&[sphere_spec("s", 0.2, [0.5, 0.5, 0.5], 3)]).unwrap();
        let h1 = mean_curvature(&t.mesh);
        let scaled = t.mesh.with_vertices(
            t.mesh
                .vertices
                .iter()
                .map(|v| [v[0] * 2.0, v[1] * 2.0, v[2] * 2.0])
                .collect(),
        );
        let h2 = mean_curvature(&scaled);
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a - 2.0 * b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn sphere_curvature_error_decreases_with_subdivision() {
        let r = 0.3;
        let mut errors = Vec::new();
        for sub in [2, 3, 4] {
            let t = build_template(&[sphere_spec("s", r, [0.5, 0.5, 0.5], sub)]).unwrap();
            let target = 1.0 / r;
            let max_err = t
                .reference_curvature
                .iter()
                .map(|h| (h - target).abs() / target)
                .fold(0.0, f64::max);
            errors.push(max_err);
        }
        assert!(errors[1] < errors[0] && errors[2] < errors[1], "{errors:?}");
    }

    #[test]
    fn obj_roundtrip_preserves_structure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        let t = build_template(&[
            sphere_spec("inner", 0.1, [0.4, 0.5, 0.5], 2),
            sphere_spec("outer", 0.12, [0.7, 0.5, 0.5], 2),
        ])
        .unwrap();
        export_obj(&t.mesh, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let groups: Vec<&str> = text.lines().filter(|l| l.starts_with("g ")).collect();
        assert_eq!(groups, vec!["g inner", "g outer"]);

        let back = import_obj(&path).unwrap();
        assert_eq!(back.faces, t.mesh.faces);
        assert_eq!(back.structures, t.mesh.structures);
        for (a, b) in back.vertices.iter().zip(&t.mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-8 * b[k].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn obj_tetrahedron_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.obj");
        let s = 1.0 / 3.0_f64.sqrt();
        let v = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        let f = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let m = Mesh::new(v, f, vec![("t".into(), 0..4, 0..4)]).unwrap();
        export_obj(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 4);
        assert!(text.contains("f 1 3 2"));
    }

    #[test]
    fn mesh_validation_rejects_open_surfaces() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let f = vec![[0, 1, 2]];
        assert!(Mesh::new(v, f, vec![("open".into(), 0..1, 0..3)]).is_err());
    }
}
