//! Evaluation suite: per-frame volume vectors with end-diastolic
//! normalization, the volume Frechet distance between generated and real
//! sequence sets, nine-phenotype extraction, and the conditional and
//! periodic RMSD measures.
//!
//! Frame 1 is end-diastole by convention: normalization divides by the
//! frame-1 total volume, and EDV phenotypes read frame 1.

use crate::error::{Error, Result};
use crate::flow::CondStats;
use crate::mesh::{signed_volume, Mesh};
use crate::neural::GaussianStats;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Myocardial density proxy used for the wall-mass phenotype.
pub const WALL_DENSITY: f64 = 1.05;

/// How one reported volume row is computed from mesh structures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VolumeRow {
    /// The signed volume of one closed structure.
    Structure { name: String, structure: String },
    /// Outer minus inner volume of a nested pair.
    Wall {
        name: String,
        outer: String,
        inner: String,
    },
}

impl VolumeRow {
    pub fn name(&self) -> &str {
        match self {
            VolumeRow::Structure { name, .. } => name,
            VolumeRow::Wall { name, .. } => name,
        }
    }
}

/// The paper-shaped five-row layout over the default template structures.
pub fn default_volume_rows() -> Vec<VolumeRow> {
    vec![
        VolumeRow::Structure {
            name: "LV".into(),
            structure: "lv_endo".into(),
        },
        VolumeRow::Wall {
            name: "LVM".into(),
            outer: "lv_epi".into(),
            inner: "lv_endo".into(),
        },
        VolumeRow::Structure {
            name: "RV".into(),
            structure: "rv".into(),
        },
        VolumeRow::Structure {
            name: "LA".into(),
            structure: "la".into(),
        },
        VolumeRow::Structure {
            name: "RA".into(),
            structure: "ra".into(),
        },
    ]
}

/// Per-structure, per-frame volumes of one sequence.
#[derive(Debug, Clone)]
pub struct VolumeVector {
    pub row_names: Vec<String>,
    /// `raw[s][tau - 1]`, model units cubed.
    pub raw: Vec<Vec<f64>>,
    /// `S * raw / sum_s raw[s][0]`.
    pub normalized: Vec<Vec<f64>>,
}

impl VolumeVector {
    pub fn n_frames(&self) -> usize {
        self.raw[0].len()
    }

    /// Structure-major flattening of the normalized matrix.
    pub fn flattened(&self) -> Vec<f64> {
        self.normalized.iter().flatten().copied().collect()
    }
}

/// Volumes of every row over a mesh sequence, normalized by the frame-1
/// total. Non-positive row volumes are an error: the sequence must be
/// excluded from distribution statistics.
pub fn volume_vector(seq: &[Mesh], rows: &[VolumeRow]) -> Result<VolumeVector> {
    if seq.is_empty() {
        return Err(Error::Data("empty mesh sequence".into()));
    }
    let mut raw = vec![Vec::with_capacity(seq.len()); rows.len()];
    for mesh in seq {
        for (ri, row) in rows.iter().enumerate() {
            let v = match row {
                VolumeRow::Structure { structure, .. } => signed_volume(mesh, structure)?,
                VolumeRow::Wall { outer, inner, .. } => {
                    signed_volume(mesh, outer)? - signed_volume(mesh, inner)?
                }
            };
            if v <= 0.0 {
                return Err(Error::Numerical(format!(
                    "non-positive volume {v:.3e} for row `{}`",
                    row.name()
                )));
            }
            raw[ri].push(v);
        }
    }
    let ed_total: f64 = raw.iter().map(|r| r[0]).sum();
    let s = rows.len() as f64;
    let normalized = raw
        .iter()
        .map(|r| r.iter().map(|v| s * v / ed_total).collect())
        .collect();
    Ok(VolumeVector {
        row_names: rows.iter().map(|r| r.name().to_string()).collect(),
        raw,
        normalized,
    })
}

// ---------------------------------------------------------------------------
// vFID
// ---------------------------------------------------------------------------

/// Frechet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sb^1/2 Sa Sb^1/2)^1/2)`.
///
/// The matrix square roots go through symmetric eigendecompositions with
/// negative eigenvalues clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Data(format!(
            "dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let dmu = &a.mean - &b.mean;
    let mean_term = dmu.dot(&dmu);

    let b_half = sym_sqrt(&b.cov);
    let inner = &b_half * &a.cov * &b_half;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = inner_sym.symmetric_eigenvalues();
    let sqrt_trace: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();

    Ok(mean_term + a.cov.trace() + b.cov.trace() - 2.0 * sqrt_trace)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Volume Frechet distance between two sets of sequences. Each side's
/// flattened normalized volume vectors are fitted with a (shrunk) Gaussian.
pub fn vfid(generated: &[VolumeVector], real: &[VolumeVector]) -> Result<f64> {
    let rows_of = |set: &[VolumeVector], side: &str| -> Result<Vec<Vec<f64>>> {
        if set.len() < 2 {
            return Err(Error::Data(format!("{side} set needs >= 2 sequences")));
        }
        let d = set[0].flattened().len();
        let rows: Vec<Vec<f64>> = set.iter().map(|v| v.flattened()).collect();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data(format!("{side} set has inconsistent dimensions")));
        }
        Ok(rows)
    };
    let g = rows_of(generated, "generated")?;
    let r = rows_of(real, "real")?;
    if g[0].len() != r[0].len() {
        return Err(Error::Data(format!(
            "generated dimension {} != real dimension {}",
            g[0].len(),
            r[0].len()
        )));
    }
    let sa = GaussianStats::from_rows(&g, true)?;
    let sb = GaussianStats::from_rows(&r, true)?;
    frechet_distance(&sa, &sb)
}

// ---------------------------------------------------------------------------
// Phenotypes
// ---------------------------------------------------------------------------

pub const PHENOTYPE_NAMES: [&str; 9] = [
    "LVM", "LVEDV", "LVESV", "RVEDV", "RVESV", "LAMAXV", "LAMINV", "RAMAXV", "RAMINV",
];

/// The nine phenotype scalars driving conditional generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeVector(pub [f64; 9]);

impl PhenotypeVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Row indices of the ventricular, wall, and atrial rows in a volume vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeartRoles {
    pub lv: usize,
    pub lvm: usize,
    pub rv: usize,
    pub la: usize,
    pub ra: usize,
}

impl Default for HeartRoles {
    /// Matches [`default_volume_rows`] order.
    fn default() -> Self {
        HeartRoles {
            lv: 0,
            lvm: 1,
            rv: 2,
            la: 3,
            ra: 4,
        }
    }
}

/// Extracts phenotypes from raw volume trajectories: EDV reads frame 1,
/// ESV is the cycle minimum, atrial MAX/MIN the cycle extrema, wall mass
/// is the frame-1 wall volume times the density proxy.
pub fn phenotypes(vv: &VolumeVector, roles: &HeartRoles) -> Result<PhenotypeVector> {
    let max_row = [roles.lv, roles.lvm, roles.rv, roles.la, roles.ra]
        .into_iter()
        .max()
        .unwrap();
    if max_row >= vv.raw.len() {
        return Err(Error::Data(format!(
            "role row {max_row} out of range for {} rows",
            vv.raw.len()
        )));
    }
    let min = |r: &[f64]| r.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |r: &[f64]| r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lv = &vv.raw[roles.lv];
    let rv = &vv.raw[roles.rv];
    let la = &vv.raw[roles.la];
    let ra = &vv.raw[roles.ra];
    Ok(PhenotypeVector([
        WALL_DENSITY * vv.raw[roles.lvm][0],
        lv[0],
        min(lv),
        rv[0],
        min(rv),
        max(la),
        min(la),
        max(ra),
        min(ra),
    ]))
}

// ---------------------------------------------------------------------------
// RMSD measures
// ---------------------------------------------------------------------------

/// Root-mean-square deviation between phenotype vectors, both standardized
/// against reference statistics and in raw units.
pub fn rmsd_cond(
    generated: &PhenotypeVector,
    target: &PhenotypeVector,
    stats: &CondStats,
) -> (f64, f64) {
    let gs = stats.standardize(generated.as_slice());
    let ts = stats.standardize(target.as_slice());
    let std_rmsd = (gs
        .iter()
        .zip(&ts)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 9.0)
        .sqrt();
    let raw_rmsd = (generated
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 9.0)
        .sqrt();
    (std_rmsd, raw_rmsd)
}

/// Vertex RMSD between the first and last frames of a sequence.
pub fn rmsd_period(seq: &[Mesh]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::Data("need at least two frames".into()));
    }
    let (first, last) = (&seq[0], &seq[seq.len() - 1]);
    if first.vertex_count() != last.vertex_count() || first.faces != last.faces {
        return Err(Error::Data("first/last frame topology mismatch".into()));
    }
    let n = first.vertex_count() as f64;
    let sum: f64 = first
        .vertices
        .iter()
        .zip(&last.vertices)
        .map(|(a, b)| {
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
        })
        .sum();
    Ok((sum / n).sqrt())
}

/// Evaluation report emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub n_generated: usize,
    pub n_real: usize,
    pub vfid: f64,
    pub rmsd_period_mean: f64,
    pub rmsd_period_std: f64,
    /// Present only when conditions were evaluated.
    pub rmsd_cond_std_mean: Option<f64>,
    pub rmsd_cond_std_std: Option<f64>,
    pub rmsd_cond_raw_mean: Option<f64>,
    pub per_phenotype_rmsd: Option<Vec<(String, f64)>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_template, StructureSpec};
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn sphere_seq(radii: &[f64]) -> Vec<Mesh> {
        radii
            .iter()
            .map(|&r| {
                build_template(&[StructureSpec {
                    name: "s".into(),
                    center: [0.5, 0.5, 0.5],
                    semi_axes: [r, r, r],
                    subdivision: 2,
                }])
                .unwrap()
                .mesh
            })
            .collect()
    }

    fn single_row() -> Vec<VolumeRow> {
        vec![VolumeRow::Structure {
            name: "S".into(),
            structure: "s".into(),
        }]
    }

    #[test]
    fn normalization_fixes_frame_one_total() {
        let seq = sphere_seq(&[0.2, 0.18, 0.19]);
        let vv = volume_vector(&seq, &single_row()).unwrap();
        assert_eq!(vv.n_frames(), 3);
        assert!((vv.normalized[0][0] - 1.0).abs() < 1e-12);

        // Static sequence: every frame equals frame 1.
        let seq2 = sphere_seq(&[0.2, 0.2, 0.2]);
        let vv2 = volume_vector(&seq2, &single_row()).unwrap();
        for f in 0..3 {
            assert!((vv2.normalized[0][f] - 1.0).abs() < 1e-12);
        }

        // Uniform scaling cancels in the normalization.
        let scaled: Vec<Mesh> = seq
            .iter()
            .map(|m| {
                m.with_vertices(
                    m.vertices
                        .iter()
                        .map(|v| [v[0] * 2.0, v[1] * 2.0, v[2] * 2.0])
                        .collect(),
                )
            })
            .collect();
        let vvs = volume_vector(&scaled, &single_row()).unwrap();
        for f in 0..3 {
            assert!((vvs.normalized[0][f] - vv.normalized[0][f]).abs() < 1e-12);
        }
    }

    #[test]
    fn five_row_normalization_sums_to_five_at_frame_one() {
        // Five concentric-free spheres acting as the five rows.
        let specs: Vec<StructureSpec> = [
            ("lv_endo", [0.3, 0.4, 0.5], 0.08),
            ("lv_epi", [0.3, 0.4, 0.5], 0.12),
            ("rv", [0.62, 0.4, 0.5], 0.1),
            ("la", [0.35, 0.68, 0.5], 0.09),
            ("ra", [0.65, 0.68, 0.5], 0.09),
        ]
        .iter()
        .map(|(n, c, r)| StructureSpec {
            name: n.to_string(),
            center: *c,
            semi_axes: [*r, *r, *r],
            subdivision: 2,
        })
        .collect();
        let mesh = build_template(&specs).unwrap().mesh;
        let vv = volume_vector(&[mesh.clone(), mesh], &default_volume_rows()).unwrap();
        let total: f64 = vv.normalized.iter().map(|r| r[0]).sum();
        assert!((total - 5.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_identity_and_identity_covariance_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let s = GaussianStats::from_rows(&rows, true).unwrap();
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d.abs() < 1e-8, "self distance {d}");

        // With equal identity covariances the distance is |mu|^2.
        let eye = DMatrix::identity(4, 4);
        let a = GaussianStats {
            mean: DVector::from_vec(vec![1.0, 0.0, 2.0, 0.0]),
            cov: eye.clone(),
        };
        let b = GaussianStats {
            mean: DVector::zeros(4),
            cov: eye,
        };
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 1e-10);
    }

    #[test]
    fn frechet_gaussian_oracle_within_five_percent() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let d = 16;
        let n = 10_000;
        for mu_sq in [1.0, 4.0] {
            let shift = (mu_sq / d as f64).sqrt();
            let a: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
                        .collect()
                })
                .collect();
            let b: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let sa = GaussianStats::from_rows(&a, true).unwrap();
            let sb = GaussianStats::from_rows(&b, true).unwrap();
            let got = frechet_distance(&sa, &sb).unwrap();
            assert!(
                (got - mu_sq).abs() / mu_sq < 0.05,
                "|mu|^2 = {mu_sq}: got {got}"
            );
        }
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha20Rng, off: f64| {
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|_| {
                    (0..5)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * 1.3 + off)
                        .collect()
                })
                .collect();
            GaussianStats::from_rows(&rows, true).unwrap()
        };
        let a = mk(&mut rng, 0.0);
        let b = mk(&mut rng, 0.7);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        assert!(ab >= 0.0);
    }

    #[test]
    fn phenotype_extraction_examples() {
        // Constant trajectory: EDV = ESV, MAXV = MINV.
        let n = 8;
        let flat = vec![2.0; n];
        let vv = VolumeVector {
            row_names: vec!["LV".into(), "LVM".into(), "RV".into(), "LA".into(), "RA".into()],
            raw: vec![flat.clone(); 5],
            normalized: vec![flat.clone(); 5],
        };
        let p = phenotypes(&vv, &HeartRoles::default()).unwrap();
        assert_eq!(p.0[1], p.0[2]);
        assert_eq!(p.0[5], p.0[6]);
        assert!((p.0[0] - WALL_DENSITY * 2.0).abs() < 1e-15);

        // V(tau) = 2 - cos(2 pi (tau - 1) / N): EDV = 1, ESV = 1, MAXV = 3.
        let traj: Vec<f64> = (0..n)
            .map(|i| 2.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let vv2 = VolumeVector {
            row_names: vv.row_names.clone(),
            raw: vec![traj.clone(); 5],
            normalized: vec![traj; 5],
        };
        let p2 = phenotypes(&vv2, &HeartRoles::default()).unwrap();
        assert!((p2.0[1] - 1.0).abs() < 1e-12); // LVEDV
        assert!((p2.0[2] - 1.0).abs() < 1e-12); // LVESV = min = frame 1
        assert!((p2.0[5] - 3.0).abs() < 1e-12); // LAMAXV mid-cycle
        // Invariants: EDV >= ESV, MAXV >= MINV.
        assert!(p2.0[1] >= p2.0[2] && p2.0[3] >= p2.0[4]);
        assert!(p2.0[5] >= p2.0[6] && p2.0[7] >= p2.0[8]);
    }

    #[test]
    fn rmsd_cond_examples() {
        let stats = CondStats {
            mean: vec![0.0; 9],
            std: vec![1.0; 9],
        };
        let a = PhenotypeVector([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let (s, r) = rmsd_cond(&a, &a, &stats);
        assert_eq!(s, 0.0);
        assert_eq!(r, 0.0);

        let mut b = a.clone();
        b.0[3] += 1.0;
        let (s, _) = rmsd_cond(&a, &b, &stats);
        assert!((s - (1.0f64 / 9.0).sqrt()).abs() < 1e-12);

        let (ab, _) = rmsd_cond(&a, &b, &stats);
        let (ba, _) = rmsd_cond(&b, &a, &stats);
        assert_eq!(ab, ba);
    }

    #[test]
    fn rmsd_period_examples() {
        let seq = sphere_seq(&[0.2, 0.19, 0.2]);
        assert!(rmsd_period(&[seq[0].clone(), seq[0].clone()]).unwrap() < 1e-15);

        // A pure translation of the last frame gives exactly its magnitude.
        let shifted = seq[0].with_vertices(
            seq[0]
                .vertices
                .iter()
                .map(|v| [v[0] + 0.01, v[1], v[2]])
                .collect(),
        );
        let r = rmsd_period(&[seq[0].clone(), shifted]).unwrap();
        assert!((r - 0.01).abs() < 1e-14);

        // Invariant under a rigid motion applied to both frames.
        let rot = |m: &Mesh| {
            let (c, s) = (0.4_f64.cos(), 0.4_f64.sin());
            m.with_vertices(
                m.vertices
                    .iter()
                    .map(|v| [c * v[0] - s * v[1] + 1.0, s * v[0] + c * v[1], v[2] - 2.0])
                    .collect(),
            )
        };
        let a = seq[0].clone();
        let b = seq[1].clone();
        let r1 = rmsd_period(&[a.clone(), b.clone()]).unwrap();
        let r2 = rmsd_period(&[rot(&a), rot(&b)]).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn vfid_rejects_mismatched_dimensions() {
        let seq3 = sphere_seq(&[0.2, 0.19, 0.2]);
        let seq2 = sphere_seq(&[0.2, 0.19]);
        let v3 = volume_vector(&seq3, &single_row()).unwrap();
        let v2 = volume_vector(&seq2, &single_row()).unwrap();
        assert!(vfid(&[v3.clone(), v3.clone()], &[v2.clone(), v2]).is_err());
        assert!(vfid(&[v3.clone()], &[v3.clone(), v3]).is_err());
    }
}
