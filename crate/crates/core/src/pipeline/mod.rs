//! Resumable experiment stages driven by one [`RunConfig`].
//!
//! Every stage writes its files under the run's output directory and records
//! their SHA-256 hashes in `manifest.json`, together with the hashes of the
//! files it read and the hash of the config slice it used. A stage whose
//! record still matches is skipped on resume.

mod config;
mod report;
mod stages;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use config::{
    parse_config, parse_config_str, MetricsSection, RunConfig, StudentSection, TeacherKind, TeacherSection,
};
pub use report::{write_report, REPORT_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    Teach,
    TrainBdl,
    TrainBdld,
    Evaluate,
    Associate,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Teach,
        Stage::TrainBdl,
        Stage::TrainBdld,
        Stage::Evaluate,
        Stage::Associate,
        Stage::Explain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Teach => "teach",
            Stage::TrainBdl => "train-bdl",
            Stage::TrainBdld => "train-bdld",
            Stage::Evaluate => "evaluate",
            Stage::Associate => "associate",
            Stage::Explain => "explain",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Teach | Stage::TrainBdl => &[Stage::Generate],
            Stage::TrainBdld => &[Stage::Generate, Stage::Teach],
            Stage::Evaluate => &[Stage::Generate, Stage::Teach, Stage::TrainBdl, Stage::TrainBdld],
            Stage::Associate | Stage::Explain => &[Stage::Generate, Stage::TrainBdld],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Files read, keyed by path relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(output_dir: &Path) -> Result<Self> {
        let path = output_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        let path = output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("manifest", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(stage.name())
    }

    /// The record of `stage` if all of its outputs are on disk with the recorded hashes.
    pub fn verified(&self, stage: Stage, output_dir: &Path) -> Option<&StageRecord> {
        let rec = self.get(stage)?;
        rec.outputs
            .iter()
            .all(|(f, h)| file_hash(&output_dir.join(f)).is_ok_and(|x| &x == h))
            .then_some(rec)
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs, config and outputs all matched the manifest.
    UpToDate,
}

/// Runs `stage` unless it is up to date; `force` reruns it regardless.
pub fn run_stage(config: &RunConfig, stage: Stage, manifest: &mut RunManifest, force: bool) -> Result<StageOutcome> {
    config.validate()?;
    let config = config.seeded();
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let missing: Vec<String> = stage
        .dependencies()
        .iter()
        .filter(|d| manifest.verified(**d, &dir).is_none())
        .map(|d| d.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingStages {
            stage: stage.name().to_string(),
            required: missing,
        });
    }
    let mut inputs = BTreeMap::new();
    for d in stage.dependencies() {
        inputs.extend(manifest.get(*d).expect("verified above").outputs.clone());
    }
    let config_hash = stages::stage_hash(&config, stage);
    if !force {
        if let Some(rec) = manifest.verified(stage, &dir) {
            if rec.config_hash == config_hash && rec.inputs == inputs {
                return Ok(StageOutcome::UpToDate);
            }
        }
    }

    let started = Instant::now();
    let ctx = stages::Context {
        config: &config,
        dir: &dir,
        manifest,
        config_hash: &config_hash,
    };
    let files = stages::run(&ctx, stage)?;
    let mut outputs = BTreeMap::new();
    for f in files {
        let h = file_hash(&dir.join(&f))?;
        outputs.insert(f, h);
    }
    let completed_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            config_hash,
            seed: config.global_seed,
            inputs,
            outputs,
            wall_time_secs: started.elapsed().as_secs_f64(),
            completed_at,
        },
    );
    manifest.save(&dir)?;
    Ok(StageOutcome::Ran)
}

/// Runs every stage in order and writes the report.
pub fn run_all(config: &RunConfig, force: bool) -> Result<(RunManifest, Vec<(Stage, StageOutcome)>)> {
    config.validate()?;
    let mut manifest = RunManifest::load(&config.output_dir)?;
    let mut outcomes = Vec::new();
    for stage in Stage::ALL {
        outcomes.push((stage, run_stage(config, stage, &mut manifest, force)?));
    }
    write_report(&manifest, &config.output_dir)?;
    Ok((manifest, outcomes))
}

/// Output path of `file` relative to the run directory.
pub fn output_path(config: &RunConfig, file: &str) -> PathBuf {
    config.output_dir.join(file)
}
