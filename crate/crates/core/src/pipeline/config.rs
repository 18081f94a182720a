use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::association::{validate_bands, AssociationConfig};
use crate::cohort::GeneratorConfig;
use crate::error::{Error, Result};
use crate::explainer::ExplainerConfig;
use crate::student::{ArchConfig, TrainConfig};
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Jittered ground-truth probabilities.
    #[default]
    Oracle,
    /// The feed-forward reference network trained on the train split.
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    pub noise_sd: f64,
    pub trained: TeacherConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Oracle,
            noise_sd: 0.3,
            trained: TeacherConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub arch: ArchConfig,
    pub bdl: TrainConfig,
    pub bdld: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Predictive samples per patient.
    pub n_samples: usize,
    /// Rounds of the per-sample interval protocol.
    pub ci_rounds: usize,
    pub n_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            n_samples: 30,
            ci_rounds: 30,
            n_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub association: AssociationConfig,
    #[serde(default)]
    pub explainer: ExplainerConfig,
    /// Validation patients explained by the `explain` stage.
    #[serde(default = "default_explain_patients")]
    pub explain_patients: usize,
    /// Code pairs above this Cramér's V are listed as collinear.
    #[serde(default = "default_collinearity")]
    pub collinearity_threshold: f64,
}

fn default_explain_patients() -> usize {
    5
}

fn default_collinearity() -> f64 {
    0.5
}

impl RunConfig {
    /// A config with every section at its default.
    pub fn with_output_dir(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            global_seed: 0,
            generator: GeneratorConfig::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            metrics: MetricsSection::default(),
            association: AssociationConfig::default(),
            explainer: ExplainerConfig::default(),
            explain_patients: default_explain_patients(),
            collinearity_threshold: default_collinearity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.output_dir.as_os_str().is_empty() {
            return fail("output_dir must not be empty".into());
        }
        // seeds come from global_seed alone so that one number identifies a run
        let seeds = [
            ("generator.seed", self.generator.seed),
            ("teacher.trained.seed", self.teacher.trained.seed),
            ("student.bdl.seed", self.student.bdl.seed),
            ("student.bdld.seed", self.student.bdld.seed),
            ("association.seed", self.association.seed),
            ("explainer.seed", self.explainer.seed),
        ];
        if let Some((key, _)) = seeds.iter().find(|(_, s)| *s != 0) {
            return fail(format!(
                "{key}: per-section seeds are not accepted; set global_seed instead"
            ));
        }
        self.generator.validate()?;
        if !(self.teacher.noise_sd >= 0.0) {
            return fail(format!(
                "teacher.noise_sd: {} must be non-negative",
                self.teacher.noise_sd
            ));
        }
        self.teacher.trained.validate()?;
        let vocab = self.generator.vocab_size();
        if self.student.arch.vocab_size != vocab {
            return fail(format!(
                "student.arch.vocab_size: {} does not match the generator vocabulary of {vocab}",
                self.student.arch.vocab_size
            ));
        }
        self.student.arch.validate()?;
        for (key, c) in [("student.bdl", &self.student.bdl), ("student.bdld", &self.student.bdld)] {
            c.validate().map_err(|e| Error::Config(format!("{key}: {e}")))?;
        }
        let m = &self.metrics;
        if m.n_samples == 0 || m.ci_rounds == 0 || m.ci_rounds > m.n_samples {
            return fail(format!(
                "metrics: need 1 <= ci_rounds <= n_samples, got {} and {}",
                m.ci_rounds, m.n_samples
            ));
        }
        if m.n_bins < 2 {
            return fail("metrics.n_bins must be at least 2".into());
        }
        validate_bands(&self.association.bands)?;
        if self.association.contextual_samples == 0 || self.association.coefficient_samples == 0 {
            return fail("association sample counts must be positive".into());
        }
        self.explainer.validate()?;
        if !(0.0..=1.0).contains(&self.collinearity_threshold) {
            return fail(format!(
                "collinearity_threshold {} must lie in [0, 1]",
                self.collinearity_threshold
            ));
        }
        Ok(())
    }

    /// Copy with every section seed set from `global_seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        let s = self.global_seed;
        c.generator.seed = s;
        c.teacher.trained.seed = s;
        // both students start from the same initialization, so the comparison is paired
        c.student.bdl.seed = s;
        c.student.bdld.seed = s;
        c.association.seed = s;
        c.explainer.seed = s;
        c
    }
}

/// Strict TOML parse: unknown keys and out-of-range values are errors.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
