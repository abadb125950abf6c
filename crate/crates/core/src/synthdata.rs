//! Parametric generator of periodic beating multi-structure shape
//! sequences: per-subject randomized ellipsoid anatomy, a cosine
//! contraction cycle (ventricular structures contract while atrial ones
//! expand), and a small zero-mean radial perturbation basis for shape
//! variety. Every quantity has a closed form, so fitted meshes can be
//! checked against analytic volumes and phenotypes.

use crate::error::{Error, Result};
use crate::ffd::{read_ffdt, write_ffdt, ControlLattice};
use crate::fitting::{fit_ffd, FitConfig, FrameFit};
use crate::mesh::{PointCloud, StructureSpec, TemplateMesh};
use crate::metrics::{phenotypes, HeartRoles, PhenotypeVector, VolumeVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Structure layout of the default five-structure template: a nested
/// left-ventricular pair plus three free chambers.
pub fn default_structure_specs(subdivision: usize) -> Vec<StructureSpec> {
    let mk = |name: &str, center: [f64; 3], semi: [f64; 3]| StructureSpec {
        name: name.into(),
        center,
        semi_axes: semi,
        subdivision,
    };
    vec![
        mk("lv_endo", [0.36, 0.40, 0.50], [0.104, 0.0975, 0.130]),
        mk("lv_epi", [0.36, 0.40, 0.50], [0.160, 0.150, 0.200]),
        mk("rv", [0.66, 0.38, 0.52], [0.110, 0.130, 0.170]),
        mk("la", [0.40, 0.72, 0.56], [0.100, 0.110, 0.120]),
        mk("ra", [0.68, 0.70, 0.58], [0.100, 0.100, 0.110]),
    ]
}

/// Contraction amplitude factor and phase shift per structure family.
fn family_profile(name: &str) -> (f64, f64) {
    match name {
        "lv_endo" => (1.0, 0.0),
        "lv_epi" => (0.5, 0.0),
        "rv" => (0.8, 0.0),
        // Atria fill while ventricles empty.
        "la" | "ra" => (0.7, std::f64::consts::PI),
        _ => (0.8, 0.0),
    }
}

/// Zero-mean radial basis over the unit sphere.
const PERTURB_TERMS: usize = 5;

fn perturb_basis(u: [f64; 3]) -> [f64; PERTURB_TERMS] {
    let [x, y, z] = u;
    [x * y, y * z, x * z, x * x - y * y, 3.0 * z * z - 1.0]
}

/// One subject's generative parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    /// Per-structure semi-axis scale factors, indexed like the template.
    pub structure_scales: Vec<[f64; 3]>,
    /// Contraction amplitude in `[0, 0.4]`.
    pub alpha: f64,
    /// Cycle phase offset in `[0, 2 pi)`.
    pub phase: f64,
    /// Per-structure radial perturbation coefficients.
    pub perturb: Vec<[f64; PERTURB_TERMS]>,
    pub seed: u64,
}

/// Sampling ranges: scales in `[0.85, 1.15]`, alpha in `[0.08, 0.32]`,
/// perturbation coefficients in `[-0.025, 0.025]`. These keep every frame
/// of every structure inside the unit cube and nested pairs nested.
pub fn sample_subject(rng: &mut ChaCha20Rng, n_structures: usize) -> SubjectParams {
    let structure_scales = (0..n_structures)
        .map(|_| {
            let mut s = [0.0; 3];
            for a in s.iter_mut() {
                *a = rng.gen_range(0.85..1.15);
            }
            s
        })
        .collect();
    let alpha = rng.gen_range(0.08..0.32);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let perturb = (0..n_structures)
        .map(|_| {
            let mut c = [0.0; PERTURB_TERMS];
            for v in c.iter_mut() {
                *v = rng.gen_range(-0.025..0.025);
            }
            c
        })
        .collect();
    SubjectParams {
        structure_scales,
        alpha,
        phase,
        perturb,
        seed: rng.gen(),
    }
}

/// Radial contraction factor of one structure at frame `tau`.
fn contraction(params: &SubjectParams, family: (f64, f64), tau: usize, n_frames: usize) -> f64 {
    let (amp, shift) = family;
    let angle =
        std::f64::consts::TAU * (tau as f64 - 1.0) / n_frames as f64 + params.phase + shift;
    1.0 - params.alpha * amp * (1.0 - angle.cos()) / 2.0
}

/// Analytic volume of one structure at one frame (perturbation omitted;
/// the basis is zero-mean so its volume effect is second order).
pub fn analytic_volume(
    params: &SubjectParams,
    specs: &[StructureSpec],
    structure: usize,
    tau: usize,
    n_frames: usize,
) -> f64 {
    let spec = &specs[structure];
    let s = contraction(params, family_profile(&spec.name), tau, n_frames);
    let k = &params.structure_scales[structure];
    4.0 / 3.0
        * std::f64::consts::PI
        * spec.semi_axes[0]
        * k[0]
        * spec.semi_axes[1]
        * k[1]
        * spec.semi_axes[2]
        * k[2]
        * s.powi(3)
}

/// Area-weighted surface samples of every structure at frame `tau`, plus
/// the analytic per-structure volumes. Sampling is deterministic in
/// `(params.seed, tau mod N)`, so frame `tau + N` reproduces frame `tau`.
pub fn surface_at_frame(
    params: &SubjectParams,
    specs: &[StructureSpec],
    tau: usize,
    n_frames: usize,
    points_per_structure: usize,
) -> Result<(PointCloud, Vec<f64>)> {
    if tau < 1 {
        return Err(Error::Config("frame index is 1-based".into()));
    }
    let tau_mod = (tau - 1) % n_frames + 1;
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed ^ ((tau_mod as u64) << 32));

    let mut points = Vec::with_capacity(specs.len() * points_per_structure);
    let mut structures = Vec::with_capacity(specs.len());
    let mut volumes = Vec::with_capacity(specs.len());

    for (si, spec) in specs.iter().enumerate() {
        let k = &params.structure_scales[si];
        let semi = [
            spec.semi_axes[0] * k[0],
            spec.semi_axes[1] * k[1],
            spec.semi_axes[2] * k[2],
        ];
        let s = contraction(params, family_profile(&spec.name), tau, n_frames);
        let w_max = 1.0 / semi[0].min(semi[1]).min(semi[2]);

        let start = points.len();
        while points.len() - start < points_per_structure {
            // Uniform direction, then an ellipsoid area-weight rejection.
            let mut u = [0.0f64; 3];
            let mut norm = 0.0;
            for v in u.iter_mut() {
                *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
                norm += *v * *v;
            }
            let norm = norm.sqrt();
            if norm < 1e-12 {
                continue;
            }
            for v in u.iter_mut() {
                *v /= norm;
            }
            let w = ((u[0] / semi[0]).powi(2)
                + (u[1] / semi[1]).powi(2)
                + (u[2] / semi[2]).powi(2))
            .sqrt();
            if rng.gen::<f64>() * w_max > w {
                continue;
            }
            let basis = perturb_basis(u);
            let rho = 1.0
                + params.perturb[si]
                    .iter()
                    .zip(&basis)
                    .map(|(c, b)| c * b)
                    .sum::<f64>();
            points.push([
                spec.center[0] + s * rho * semi[0] * u[0],
                spec.center[1] + s * rho * semi[1] * u[1],
                spec.center[2] + s * rho * semi[2] * u[2],
            ]);
        }
        structures.push((spec.name.clone(), start..points.len()));
        volumes.push(analytic_volume(params, specs, si, tau, n_frames));
    }
    Ok((PointCloud { points, structures }, volumes))
}

/// Analytic raw volume matrix in the reporting row layout (LV, LVM, RV,
/// LA, RA) for phenotype labels.
pub fn analytic_volume_vector(
    params: &SubjectParams,
    specs: &[StructureSpec],
    n_frames: usize,
) -> VolumeVector {
    let idx_of = |name: &str| specs.iter().position(|s| s.name == name).unwrap();
    let (endo, epi, rv, la, ra) = (
        idx_of("lv_endo"),
        idx_of("lv_epi"),
        idx_of("rv"),
        idx_of("la"),
        idx_of("ra"),
    );
    let vol = |s: usize, tau: usize| analytic_volume(params, specs, s, tau, n_frames);
    let rows: Vec<Vec<f64>> = vec![
        (1..=n_frames).map(|t| vol(endo, t)).collect(),
        (1..=n_frames).map(|t| vol(epi, t) - vol(endo, t)).collect(),
        (1..=n_frames).map(|t| vol(rv, t)).collect(),
        (1..=n_frames).map(|t| vol(la, t)).collect(),
        (1..=n_frames).map(|t| vol(ra, t)).collect(),
    ];
    let ed_total: f64 = rows.iter().map(|r| r[0]).sum();
    let s = rows.len() as f64;
    VolumeVector {
        row_names: vec!["LV".into(), "LVM".into(), "RV".into(), "LA".into(), "RA".into()],
        normalized: rows.iter().map(|r| r.iter().map(|v| s * v / ed_total).collect()).collect(),
        raw: rows,
    }
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// One subject's record in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: usize,
    pub params: SubjectParams,
    pub cloud_files: Vec<String>,
    pub ffdt_files: Vec<String>,
    pub phenotypes: PhenotypeVector,
    pub fit_ok: bool,
}

/// Train/validation/test split by subject index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub config_hash: String,
    pub n_frames: usize,
    pub structure_names: Vec<String>,
    pub splits: Splits,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub subjects: Vec<SubjectRecord>,
}

/// Line-delimited manifest records: a header line then one line per subject.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum ManifestLine {
    Header(ManifestHeader),
    Subject(SubjectRecord),
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    let header = serde_json::to_string(&ManifestLine::Header(manifest.header.clone()))
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    writeln!(out, "{header}")?;
    for s in &manifest.subjects {
        let line = serde_json::to_string(&ManifestLine::Subject(s.clone()))
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path)?;
    let mut header = None;
    let mut subjects = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestLine>(&line)
            .map_err(|e| Error::Data(format!("manifest parse: {e}")))?
        {
            ManifestLine::Header(h) => header = Some(h),
            ManifestLine::Subject(s) => subjects.push(s),
        }
    }
    let header = header.ok_or_else(|| Error::Data("manifest has no header".into()))?;
    Ok(DatasetManifest { header, subjects })
}

/// Point-cloud file: structure count, then per structure a point count and
/// little-endian f32 triplets. Structure names come from the manifest.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&(cloud.structures.len() as u32).to_le_bytes());
    for (_, range) in &cloud.structures {
        buf.extend_from_slice(&(range.len() as u32).to_le_bytes());
        for p in &cloud.points[range.clone()] {
            for c in p {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_cloud(path: &Path, structure_names: &[String]) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data(format!("truncated cloud file {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let ns = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if ns != structure_names.len() {
        return Err(Error::Data(format!(
            "cloud has {ns} structures, manifest lists {}",
            structure_names.len()
        )));
    }
    let mut points = Vec::new();
    let mut structures = Vec::new();
    for name in structure_names {
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let start = points.len();
        let raw = take(&mut pos, count * 12)?;
        for c in raw.chunks_exact(12) {
            points.push([
                f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[8..12].try_into().unwrap()) as f64,
            ]);
        }
        structures.push((name.clone(), start..points.len()));
    }
    Ok(PointCloud { points, structures })
}

/// Everything `build_dataset` needs beyond the rng.
pub struct DatasetSpec<'a> {
    pub template: &'a TemplateMesh,
    pub specs: &'a [StructureSpec],
    pub lattices: &'a [ControlLattice],
    pub fit: &'a FitConfig,
    pub n_subjects: usize,
    pub n_frames: usize,
    pub points_per_structure: usize,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
    pub out_dir: &'a Path,
    pub config_hash: String,
}

/// Samples subjects, writes per-frame clouds, fits FFD fields, writes FFDT
/// files and a fit report, records analytic phenotypes, and writes the
/// manifest. Returns the manifest and the fraction of converged frames.
pub fn build_dataset(spec: &DatasetSpec, rng: &mut ChaCha20Rng) -> Result<(DatasetManifest, f64)> {
    if spec.n_subjects < 3 {
        return Err(Error::Config("need at least 3 subjects (one per split)".into()));
    }
    if (spec.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    std::fs::create_dir_all(spec.out_dir.join("clouds"))?;
    std::fs::create_dir_all(spec.out_dir.join("ffdt"))?;

    let all_params: Vec<SubjectParams> = (0..spec.n_subjects)
        .map(|_| sample_subject(rng, spec.specs.len()))
        .collect();

    struct SubjectOutput {
        record: SubjectRecord,
        fits: Vec<FrameFit>,
    }

    let outputs: Vec<Result<SubjectOutput>> = all_params
        .par_iter()
        .enumerate()
        .map(|(id, params)| {
            let mut cloud_files = Vec::with_capacity(spec.n_frames);
            let mut targets = Vec::with_capacity(spec.n_frames);
            for tau in 1..=spec.n_frames {
                let (cloud, _) = surface_at_frame(
                    params,
                    spec.specs,
                    tau,
                    spec.n_frames,
                    spec.points_per_structure,
                )?;
                let rel = format!("clouds/s{id:04}_f{tau:03}.pts");
                write_cloud(&spec.out_dir.join(&rel), &cloud)?;
                cloud_files.push(rel);
                targets.push(cloud);
            }

            let (fields, fits) = fit_ffd(spec.template, spec.lattices, &targets, spec.fit)?;
            let mut ffdt_files = Vec::with_capacity(spec.n_frames);
            for (tau, msf) in fields.iter().enumerate() {
                let rel = format!("ffdt/s{id:04}_f{:03}.ffdt", tau + 1);
                write_ffdt(&spec.out_dir.join(&rel), msf)?;
                ffdt_files.push(rel);
            }

            let vv = analytic_volume_vector(params, spec.specs, spec.n_frames);
            let phen = phenotypes(&vv, &HeartRoles::default())?;
            let fit_ok = fits.iter().all(|f| f.converged);
            Ok(SubjectOutput {
                record: SubjectRecord {
                    id,
                    params: params.clone(),
                    cloud_files,
                    ffdt_files,
                    phenotypes: phen,
                    fit_ok,
                },
                fits,
            })
        })
        .collect();

    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut fit_report = std::fs::File::create(spec.out_dir.join("fit_report.jsonl"))?;
    let mut frames_total = 0usize;
    let mut frames_ok = 0usize;
    for out in outputs {
        let out = out?;
        for fit in &out.fits {
            frames_total += 1;
            if fit.converged {
                frames_ok += 1;
            }
            let line = serde_json::json!({
                "subject": out.record.id,
                "frame": fit.frame,
                "chamfer": fit.breakdown.chamfer,
                "edge": fit.breakdown.edge,
                "curvature": fit.breakdown.curvature,
                "total": fit.breakdown.total,
                "chamfer_mean": fit.chamfer_mean,
                "converged": fit.converged,
            });
            writeln!(fit_report, "{line}")?;
        }
        subjects.push(out.record);
    }

    // Deterministic contiguous split.
    let n_train = ((spec.n_subjects as f64) * spec.split[0]).round() as usize;
    let n_val = (((spec.n_subjects as f64) * spec.split[1]).round() as usize).max(1);
    let n_train = n_train.clamp(1, spec.n_subjects - 2);
    let n_val = n_val.clamp(1, spec.n_subjects - n_train - 1);
    let splits = Splits {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..spec.n_subjects).collect(),
    };

    let manifest = DatasetManifest {
        header: ManifestHeader {
            config_hash: spec.config_hash.clone(),
            n_frames: spec.n_frames,
            structure_names: spec.specs.iter().map(|s| s.name.clone()).collect(),
            splits,
        },
        subjects,
    };
    write_manifest(&spec.out_dir.join("manifest.jsonl"), &manifest)?;
    let ok_fraction = frames_ok as f64 / frames_total.max(1) as f64;
    Ok((manifest, ok_fraction))
}

/// Loads the fitted FFD stacks of the given subjects.
pub fn load_fields(
    manifest: &DatasetManifest,
    base: &Path,
    subject_ids: &[usize],
) -> Result<Vec<Vec<crate::ffd::MultiScaleFFD>>> {
    subject_ids
        .iter()
        .map(|&id| {
            let rec = manifest
                .subjects
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Data(format!("subject {id} not in manifest")))?;
            rec.ffdt_files
                .iter()
                .map(|rel| {
                    let path: PathBuf = base.join(rel);
                    if !path.exists() {
                        return Err(Error::Data(format!("missing FFDT file {}", path.display())));
                    }
                    read_ffdt(&path)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffd::lattices_from_dims;
    use crate::mesh::build_template;
    use crate::mesh::signed_volume;

    fn specs2() -> Vec<StructureSpec> {
        // Two-structure fast mode: a nested pair.
        vec![
            StructureSpec {
                name: "lv_endo".into(),
                center: [0.45, 0.5, 0.5],
                semi_axes: [0.10, 0.095, 0.12],
                subdivision: 2,
            },
            StructureSpec {
                name: "lv_epi".into(),
                center: [0.45, 0.5, 0.5],
                semi_axes: [0.16, 0.15, 0.19],
                subdivision: 2,
            },
        ]
    }

    #[test]
    fn same_seed_reproduces_params() {
        let mut a = ChaCha20Rng::seed_from_u64(1);
        let mut b = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(sample_subject(&mut a, 5), sample_subject(&mut b, 5));
    }

    #[test]
    fn all_draws_satisfy_containment() {
        let specs = default_structure_specs(2);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = sample_subject(&mut rng, specs.len());
            for (si, spec) in specs.iter().enumerate() {
                // Worst-case reach: max scale, max positive perturbation,
                // no contraction.
                let rho_max = 1.0 + p.perturb[si].iter().map(|c| c.abs()).sum::<f64>() * 2.0;
                for a in 0..3 {
                    let reach = spec.semi_axes[a] * p.structure_scales[si][a] * rho_max;
                    assert!(spec.center[a] + reach < 1.0, "structure {si} axis {a}");
                    assert!(spec.center[a] - reach > 0.0);
                }
            }
            // Nested pair stays nested at max endo scale vs min epi scale.
            let endo_reach = 0.130 * p.structure_scales[0][2] * 1.06;
            let epi_reach = 0.200
                * p.structure_scales[1][2]
                * (1.0 - p.alpha * 0.5)
                * 0.94;
            assert!(endo_reach < epi_reach * 1.7, "nesting margin");
        }
    }

    #[test]
    fn alpha_extremes_stay_valid() {
        let specs = specs2();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for alpha in [0.0, 0.4] {
            let mut p = sample_subject(&mut rng, 2);
            p.alpha = alpha;
            for tau in 1..=8 {
                let (cloud, vols) = surface_at_frame(&p, &specs, tau, 8, 100).unwrap();
                assert!(cloud.points.iter().flatten().all(|c| (0.0..1.0).contains(c)));
                assert!(vols.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn base_shape_at_frame_one_with_zero_phase() {
        let specs = specs2();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut p = sample_subject(&mut rng, 2);
        p.phase = 0.0;
        // Ventricular family has zero shift: s(1) = 1 exactly.
        let v1 = analytic_volume(&p, &specs, 0, 1, 10);
        let base = 4.0 / 3.0
            * std::f64::consts::PI
            * (0.10 * p.structure_scales[0][0])
            * (0.095 * p.structure_scales[0][1])
            * (0.12 * p.structure_scales[0][2]);
        assert!((v1 - base).abs() < 1e-15);
    }

    #[test]
    fn frames_are_exactly_periodic() {
        let specs = specs2();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = sample_subject(&mut rng, 2);
        let (a, va) = surface_at_frame(&p, &specs, 3, 10, 50).unwrap();
        let (b, vb) = surface_at_frame(&p, &specs, 13, 10, 50).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(va, vb);
    }

    #[test]
    fn volume_trajectory_has_a_single_trough() {
        let specs = specs2();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut p = sample_subject(&mut rng, 2);
        p.phase = 0.0;
        let n = 20;
        let vols: Vec<f64> = (1..=n).map(|t| analytic_volume(&p, &specs, 0, t, n)).collect();
        // Number of descending->ascending switches over the cycle is one.
        let mut switches = 0;
        for i in 0..n {
            let prev = vols[(i + n - 1) % n];
            let cur = vols[i];
            let next = vols[(i + 1) % n];
            if cur < prev && cur <= next {
                switches += 1;
            }
        }
        assert_eq!(switches, 1, "trajectory {vols:?}");
    }

    #[test]
    fn analytic_volume_matches_fitted_dense_mesh() {
        // Fit a dense mesh to one frame and compare volumes. Coarser
        // templates underestimate enclosed volume (inscribed polyhedron),
        // so this check runs at subdivision 4.
        let mut specs = specs2();
        for s in specs.iter_mut() {
            s.subdivision = 4;
        }
        let template = build_template(&specs).unwrap();
        let lattices = lattices_from_dims(&[[4, 4, 4], [6, 6, 6], [8, 8, 8]]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let p = sample_subject(&mut rng, 2);
        let (cloud, vols) = surface_at_frame(&p, &specs, 4, 8, 2000).unwrap();
        let cfg = FitConfig::default();
        let (msf, fit) = crate::fitting::fit_frame(&template, &lattices, &cloud, &cfg, 4).unwrap();
        assert!(fit.converged);
        let (mesh, _) = crate::ffd::cascade_warp(&template, &msf, &lattices).unwrap();
        for (si, spec) in specs.iter().enumerate() {
            let got = signed_volume(&mesh, &spec.name).unwrap();
            let expect = vols[si];
            assert!(
                (got - expect).abs() / expect < 0.01,
                "{}: fitted {got} vs analytic {expect}",
                spec.name
            );
        }
    }

    #[test]
    fn fitted_phenotypes_match_analytic_within_three_percent() {
        // Whole-pipeline check on one five-structure subject at dense
        // resolution over a short cycle.
        let specs = default_structure_specs(3);
        let template = build_template(&specs).unwrap();
        let lattices = lattices_from_dims(&[[4, 4, 4], [6, 6, 6], [8, 8, 8]]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p = sample_subject(&mut rng, specs.len());
        let n = 4;
        let clouds: Vec<PointCloud> = (1..=n)
            .map(|t| surface_at_frame(&p, &specs, t, n, 1200).unwrap().0)
            .collect();
        let cfg = FitConfig::default();
        let (fields, fits) = fit_ffd(&template, &lattices, &clouds, &cfg).unwrap();
        assert!(fits.iter().all(|f| f.converged));
        let meshes: Vec<_> = fields
            .iter()
            .map(|m| crate::ffd::cascade_warp(&template, m, &lattices).unwrap().0)
            .collect();
        let vv = crate::metrics::volume_vector(&meshes, &crate::metrics::default_volume_rows())
            .unwrap();
        let fitted = phenotypes(&vv, &HeartRoles::default()).unwrap();
        let analytic = phenotypes(&analytic_volume_vector(&p, &specs, n), &HeartRoles::default())
            .unwrap();
        for (i, (got, expect)) in fitted
            .as_slice()
            .iter()
            .zip(analytic.as_slice())
            .enumerate()
        {
            assert!(
                (got - expect).abs() / expect < 0.03,
                "phenotype {}: fitted {got} vs analytic {expect}",
                crate::metrics::PHENOTYPE_NAMES[i]
            );
        }
    }

    #[test]
    fn dataset_build_splits_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let specs = default_structure_specs(2);
        let template = build_template(&specs).unwrap();
        let lattices = lattices_from_dims(&[[4, 4, 4]]).unwrap();
        let fit = FitConfig {
            iterations: 40,
            ..FitConfig::default()
        };
        let spec = DatasetSpec {
            template: &template,
            specs: &specs,
            lattices: &lattices,
            fit: &fit,
            n_subjects: 3,
            n_frames: 2,
            points_per_structure: 150,
            split: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            out_dir: dir.path(),
            config_hash: "testhash".into(),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (manifest, _ok) = build_dataset(&spec, &mut rng).unwrap();
        assert_eq!(manifest.header.splits.train, vec![0]);
        assert_eq!(manifest.header.splits.val, vec![1]);
        assert_eq!(manifest.header.splits.test, vec![2]);

        let back = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.subjects.len(), 3);
        assert_eq!(back.header.n_frames, 2);
        assert_eq!(back.subjects[1].params, manifest.subjects[1].params);

        // Cloud and FFDT files referenced by the manifest exist and load.
        for rec in &back.subjects {
            for rel in &rec.cloud_files {
                let cloud =
                    read_cloud(&dir.path().join(rel), &back.header.structure_names).unwrap();
                assert_eq!(cloud.structures.len(), 5);
            }
        }
        let fields = load_fields(&back, dir.path(), &[0, 2]).unwrap();
        assert_eq!(fields.len(), 2);
        assert_eq!(fields[0].len(), 2);
    }
}
