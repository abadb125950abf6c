//! Run configuration: one TOML file with sections per subsystem, full
//! defaulting, unknown-key rejection, and a content hash embedded in every
//! artifact a run writes.
//!
//! The hash covers the scientific configuration only; the `[run]` section
//! (seed, output paths, thread count) is excluded so artifacts produced
//! with different seeds remain comparable.

use crate::encoding::EncodingMode;
use crate::error::{Error, Result};
use crate::ffd::{lattices_from_dims, ControlLattice};
use crate::fitting::FitConfig;
use crate::flow::{InputMode, TimeSampling, TrainConfig};
use crate::mesh::{build_template, StructureSpec, TemplateMesh};
use crate::neural::{FusionConfig, UNetConfig};
use crate::synthdata::default_structure_specs;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    /// Icosphere subdivision level of every default structure.
    pub subdivision: usize,
    /// Explicit structure list; empty means the default five-structure
    /// layout at `subdivision`.
    pub structures: Vec<StructureEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StructureEntry {
    pub name: String,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub subdivision: usize,
}

impl Default for TemplateSection {
    fn default() -> Self {
        TemplateSection {
            subdivision: 2,
            structures: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSection {
    pub dims: Vec<[usize; 3]>,
}

impl Default for LatticeSection {
    fn default() -> Self {
        LatticeSection {
            dims: vec![[6, 6, 6], [10, 10, 10], [18, 18, 18]],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalSection {
    pub mode: String,
    pub sigma: f64,
}

impl Default for TemporalSection {
    fn default() -> Self {
        TemporalSection {
            mode: "periodic-gaussian".into(),
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub beta_a: f64,
    pub beta_b: f64,
    /// Euler steps at inference.
    pub steps: usize,
    pub time_sampling: TimeSampling,
    pub input: InputMode,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            beta_a: 0.1,
            beta_b: 2.0,
            steps: 1,
            time_sampling: TimeSampling::Beta,
            input: InputMode::Embedding,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            embed_dim: 16,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UNetSection {
    pub channels: usize,
    pub condition_dim: usize,
    pub t_freqs: usize,
    pub style_hidden: usize,
}

impl Default for UNetSection {
    fn default() -> Self {
        UNetSection {
            channels: 16,
            condition_dim: 0,
            t_freqs: 8,
            style_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            learning_rate: 3e-3,
            batch_size: 8,
            steps: 3000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub w_edge: f64,
    pub w_curv: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub points_per_structure: usize,
    pub chamfer_threshold_frac: f64,
    pub early_stop_rel: f64,
    pub patience: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        FitSection {
            w_edge: f.w_edge,
            w_curv: f.w_curv,
            iterations: f.iterations,
            learning_rate: f.learning_rate,
            points_per_structure: 2000,
            chamfer_threshold_frac: f.chamfer_threshold_frac,
            early_stop_rel: f.early_stop_rel,
            patience: f.patience,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_subjects: usize,
    pub frames: usize,
    /// Train/val/test fractions.
    pub split: [f64; 3],
    /// Fraction of non-converged fit frames tolerated before synth-data
    /// fails.
    pub max_fit_fail_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_subjects: 64,
            frames: 50,
            split: [0.7, 0.05, 0.25],
            max_fit_fail_frac: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub out: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            threads: 0,
            out: "out".into(),
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub template: TemplateSection,
    pub lattice: LatticeSection,
    pub temporal: TemporalSection,
    pub flow: FlowSection,
    pub fusion: FusionSection,
    pub unet: UNetSection,
    pub optim: OptimSection,
    pub fit: FitSection,
    pub data: DataSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let _ = self.encoding_mode()?;
        if self.temporal.sigma <= 0.0 && self.temporal.mode != "one-hot" {
            return Err(Error::Config("temporal.sigma must be positive".into()));
        }
        if self.flow.beta_a <= 0.0 || self.flow.beta_b <= 0.0 {
            return Err(Error::Config("flow beta shapes must be positive".into()));
        }
        if self.flow.steps == 0 {
            return Err(Error::Config("flow.steps must be >= 1".into()));
        }
        let _ = self.lattices()?;
        if self.unet.condition_dim != 0 && self.unet.condition_dim != 9 {
            return Err(Error::Config(
                "unet.condition_dim must be 0 (unconditional) or 9 (phenotypes)".into(),
            ));
        }
        if self.optim.batch_size == 0 || self.optim.steps == 0 {
            return Err(Error::Config("optimizer needs batch_size, steps >= 1".into()));
        }
        if self.optim.learning_rate <= 0.0 || self.fit.learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.fit.w_edge < 0.0 || self.fit.w_curv < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.fit.iterations == 0 {
            return Err(Error::Config("fit.iterations must be >= 1".into()));
        }
        if self.data.frames < 2 {
            return Err(Error::Config("data.frames must be >= 2".into()));
        }
        if (self.data.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("data.split must sum to 1".into()));
        }
        if self.template.subdivision < 2 {
            return Err(Error::Config("template.subdivision must be >= 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, excluding the `[run]`
    /// section.
    pub fn content_hash(&self) -> String {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        if let Some(table) = value.as_table_mut() {
            table.remove("run");
        }
        let canonical = toml::to_string(&value).expect("canonical config");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn encoding_mode(&self) -> Result<EncodingMode> {
        self.temporal.mode.parse()
    }

    pub fn structure_specs(&self) -> Vec<StructureSpec> {
        if self.template.structures.is_empty() {
            default_structure_specs(self.template.subdivision)
        } else {
            self.template
                .structures
                .iter()
                .map(|s| StructureSpec {
                    name: s.name.clone(),
                    center: s.center,
                    semi_axes: s.semi_axes,
                    subdivision: s.subdivision,
                })
                .collect()
        }
    }

    pub fn build_template(&self) -> Result<TemplateMesh> {
        build_template(&self.structure_specs())
    }

    pub fn lattices(&self) -> Result<Vec<ControlLattice>> {
        lattices_from_dims(&self.lattice.dims)
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            w_edge: self.fit.w_edge,
            w_curv: self.fit.w_curv,
            iterations: self.fit.iterations,
            learning_rate: self.fit.learning_rate,
            chamfer_threshold_frac: self.fit.chamfer_threshold_frac,
            early_stop_rel: self.fit.early_stop_rel,
            patience: self.fit.patience,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            embed_dim: self.fusion.embed_dim,
            encoding_dim: self.data.frames,
            hidden: self.fusion.hidden,
            scales: self.lattice.dims.clone(),
        }
    }

    pub fn unet_config(&self, conditional: bool) -> UNetConfig {
        UNetConfig {
            scales: self.lattice.dims.clone(),
            channels: self.unet.channels,
            condition_dim: if conditional { self.unet.condition_dim } else { 0 },
            t_freqs: self.unet.t_freqs,
            style_hidden: self.unet.style_hidden,
        }
    }

    pub fn train_config(&self, input_mode: InputMode, conditional: bool) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.optim.batch_size,
            lr: self.optim.learning_rate,
            beta_a: self.flow.beta_a,
            beta_b: self.flow.beta_b,
            time_sampling: self.flow.time_sampling,
            input_mode,
            conditional,
            seed: self.run.seed,
            sigma: self.temporal.sigma,
            enc_mode: self.encoding_mode()?,
        })
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let h1 = cfg.content_hash();
        let h2 = cfg.content_hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn run_section_does_not_affect_the_hash() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.run.seed = 7;
        b.run.out = "elsewhere".into();
        b.run.threads = 4;
        assert_eq!(a.content_hash(), b.content_hash());

        let mut c = RunConfig::default();
        c.temporal.sigma = 3.0;
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
            [temporal]
            mode = "one-hot"
            sigma = 2.0
            bogus = 1
        "#;
        let err = toml::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn file_roundtrip_and_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
                [lattice]
                dims = [[4, 4, 4], [6, 6, 6]]

                [data]
                frames = 20
                n_subjects = 8
            "#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.frames, 20);
        assert_eq!(cfg.lattice.dims.len(), 2);

        std::fs::write(&path, "[temporal]\nmode = \"nope\"\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));

        std::fs::write(&path, "[flow]\nbeta_a = -1.0\n").unwrap();
        assert!(RunConfig::load(&path).is_err());

        std::fs::write(&path, "[lattice]\ndims = [[4,4,4],[4,6,6]]\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
