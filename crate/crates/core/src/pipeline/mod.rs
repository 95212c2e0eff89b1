//! Stage orchestration: each stage reads declared artifacts from earlier
//! stages, writes into its own directory, and is recorded in
//! `run_manifest.json` so unchanged stages can be skipped.

mod config;
mod manifest;
mod report;
mod stages;

use std::fmt;
use std::fs;
use std::str::FromStr;
use std::time::Instant;

pub use config::*;
pub use manifest::{hash_bytes, hash_path, DirLock, RunManifest, StageRecord};
pub use report::*;
pub use stages::{read_features_csv, read_measures_csv, write_features_csv, write_measures_csv, Input, Layout};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Sep,
    Split,
    Preprocess,
    TrainExtractor,
    Extract,
    Fit,
    Explain,
    Reduce,
    Report,
    All,
}

impl Stage {
    /// Execution order of `all`.
    pub const ORDER: [Stage; 10] = [
        Stage::Synth,
        Stage::Sep,
        Stage::Split,
        Stage::Preprocess,
        Stage::TrainExtractor,
        Stage::Extract,
        Stage::Fit,
        Stage::Explain,
        Stage::Reduce,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Sep => "sep",
            Stage::Split => "split",
            Stage::Preprocess => "preprocess",
            Stage::TrainExtractor => "train-extractor",
            Stage::Extract => "extract",
            Stage::Fit => "fit",
            Stage::Explain => "explain",
            Stage::Reduce => "reduce",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::TrainExtractor => "extractor",
            Stage::Extract => "features",
            s => s.name(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown stage `{s}`")))
    }
}

/// Hash of the configuration with `output_dir` blanked, so the same settings
/// written to two places agree.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = Default::default();
    Ok(hash_bytes(&[serde_json::to_string(&c)?.as_bytes()]))
}

fn stage_settings(stage: Stage, cfg: &PipelineConfig) -> Result<serde_json::Value> {
    use serde_json::json;
    Ok(match stage {
        Stage::Synth => json!({ "seed": cfg.seed, "synth": cfg.synth }),
        Stage::Sep => json!({ "sep": cfg.sep }),
        Stage::Split => json!({ "seed": cfg.seed, "split": cfg.split }),
        Stage::Preprocess => json!({ "preprocess": cfg.preprocess }),
        Stage::TrainExtractor => json!({ "seed": cfg.seed, "size": cfg.preprocess.image_size, "extractor": cfg.extractor }),
        Stage::Extract => json!({
            "seed": cfg.seed, "size": cfg.preprocess.image_size, "extractor": cfg.extractor, "offtheshelf": cfg.offtheshelf
        }),
        Stage::Fit => json!({ "seed": cfg.seed, "search": cfg.search, "models": cfg.models, "offtheshelf": cfg.offtheshelf }),
        Stage::Explain => json!({ "shap": cfg.shap, "models": cfg.models }),
        Stage::Reduce => json!({ "seed": cfg.seed, "search": cfg.search, "reduce": cfg.reduce }),
        Stage::Report | Stage::All => json!({ "config": config_hash(cfg)? }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

fn run_locked(stage: Stage, cfg: &PipelineConfig, force: bool, manifest: &mut RunManifest) -> Result<Outcome> {
    let layout = Layout::new(&cfg.output_dir);
    let inputs = stages::stage_inputs(stage, cfg, &layout);
    for i in &inputs {
        if !i.path.exists() {
            return Err(match i.producer {
                Some(p) => Error::MissingDependency {
                    stage: stage.name().into(),
                    requires: p.name().into(),
                    artifact: i.path.clone(),
                },
                None => Error::validation(format!("input {} does not exist", i.path.display())),
            });
        }
    }
    let settings = serde_json::to_string(&stage_settings(stage, cfg)?)?;
    let mut parts = vec![stage.name().as_bytes().to_vec(), settings.into_bytes()];
    for i in &inputs {
        parts.push(hash_path(&i.path)?.into_bytes());
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    let inputs_hash = hash_bytes(&refs);
    let dir = layout.stage_dir(stage);
    if !force {
        if let Some(rec) = manifest.stages.get(stage.name()) {
            if rec.inputs_hash == inputs_hash && dir.exists() && hash_path(&dir)? == rec.outputs_hash {
                log::info!("{stage}: up to date, skipping");
                return Ok(Outcome::Skipped);
            }
        }
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log::info!("{stage}: running");
    let start = Instant::now();
    stages::Context { cfg, layout: layout.clone() }.run(stage)?;
    let rel = |p: &std::path::Path| p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().into_owned();
    manifest.stages.insert(
        stage.name().into(),
        StageRecord {
            inputs_hash,
            outputs_hash: hash_path(&dir)?,
            inputs: inputs.iter().map(|i| rel(&i.path)).collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    );
    Ok(Outcome::Ran)
}

/// Run one stage, or every stage in order for [`Stage::All`]. Returns what
/// happened to each stage.
pub fn run(stage: Stage, cfg: &PipelineConfig, force: bool) -> Result<Vec<(Stage, Outcome)>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let path = cfg.output_dir.join("run_manifest.json");
    let mut manifest = RunManifest::load(&path)?;
    manifest.tool_version = env!("CARGO_PKG_VERSION").into();
    manifest.config_hash = config_hash(cfg)?;
    let list: Vec<Stage> = if stage == Stage::All {
        Stage::ORDER.into_iter().filter(|s| *s != Stage::Synth || cfg.uses_synthetic_inputs()).collect()
    } else {
        vec![stage]
    };
    let mut done = Vec::new();
    for s in list {
        let outcome = run_locked(s, cfg, force, &mut manifest);
        manifest.save(&path)?;
        done.push((s, outcome?));
    }
    Ok(done)
}
