//! Run configuration: one JSON document holding every section.

use crate::error::{CliError, Result};
use sahnet::eval::{TTestKind, Z_95};
use sahnet::net::{DenseNetConfig, MetadataField};
use sahnet::prep::PrepConfig;
use sahnet::synth::SynthConfig;
use sahnet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_NAME: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Drives every random stream; section seeds are overwritten with it.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub prep: PrepConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub explain: ExplainSection,
}


/// Relative paths are taken relative to the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: PathBuf,
    /// Dataset root with `labels.csv`, `images/` and optionally
    /// `metadata.csv` and `ground_truth.json`.
    pub data: Option<PathBuf>,
    /// Directory of raw HU NIfTI volumes for `prep`.
    pub input: Option<PathBuf>,
    /// Registration target; a built-in head template when absent.
    pub template: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Scored subjects (`subject_id,score_dead,label`).
    pub predictions: Option<PathBuf>,
    /// Clinical table for `stats`.
    pub cohort: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            data: None,
            input: None,
            template: None,
            checkpoint: None,
            predictions: None,
            cohort: None,
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        for p in [
            &mut self.data,
            &mut self.input,
            &mut self.template,
            &mut self.checkpoint,
            &mut self.predictions,
            &mut self.cohort,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ModelSection {
    pub network: DenseNetConfig,
    /// Clinical fields fused into the head; empty for an image-only model.
    pub metadata_fields: Vec<MetadataField>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Share of each class held out for validation.
    pub val_fraction: f64,
    pub fit: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { val_fraction: 0.2, fit: TrainConfig::default() }
    }
}

/// Which subjects of the dataset `eval` and `explain` use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    All,
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// A subject is predicted dead when its score exceeds this.
    pub threshold: f64,
    pub batch_size: usize,
    pub split: Split,
    /// Binary outcome column of the clinical table.
    pub outcome_column: String,
    /// Column ignored by `stats`.
    pub id_column: String,
    /// Normal quantile of the odds-ratio interval.
    pub z: f64,
    pub t_test: TTestKind,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            batch_size: 8,
            split: Split::All,
            outcome_column: "dead".into(),
            id_column: "subject_id".into(),
            z: Z_95,
            t_test: TTestKind::Student,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Convolution whose activation is explained; the last one when absent.
    pub layer: Option<String>,
    pub target_class: usize,
    /// Share of voxels counted as the salient region.
    pub top_fraction: f64,
    pub split: Split,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { layer: None, target_class: 1, top_fraction: 0.1, split: Split::All }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides and fills
    /// derived fields.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let cwd = std::env::current_dir()?;
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?;
                let base = p.parent().filter(|b| !b.as_os_str().is_empty()).map_or(cwd.clone(), |b| cwd.join(b));
                cfg.paths.rebase(&base);
                cfg
            }
            None => {
                let mut cfg = RunConfig::default();
                cfg.paths.rebase(&cwd);
                cfg
            }
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.paths.out = cwd.join(o);
        }
        if let Some(c) = &overrides.checkpoint {
            cfg.paths.checkpoint = Some(cwd.join(c));
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.fit.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(0.0..1.0).contains(&self.train.val_fraction) {
            return bad(format!("train.val_fraction {} outside [0, 1)", self.train.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return bad(format!("eval.threshold {} outside [0, 1]", self.eval.threshold));
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be positive".into());
        }
        if !(self.eval.z > 0.0 && self.eval.z.is_finite()) {
            return bad(format!("eval.z {}", self.eval.z));
        }
        let f = self.explain.top_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("explain.top_fraction {f} outside (0, 1]"));
        }
        let mut seen = Vec::new();
        for m in &self.model.metadata_fields {
            if seen.contains(m) {
                return bad(format!("metadata field '{}' listed twice", m.key()));
            }
            seen.push(*m);
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(dir.join(RESOLVED_NAME), text + "\n")?;
        Ok(())
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| CliError::Usage(format!("paths.{key} is not set")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"sed": 1}"#, r#"{"train": {"fit": {"epoch": 3}}}"#, r#"{"paths": {"outdir": "x"}}"#] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::load(None, &Overrides { seed: Some(7), ..Default::default() }).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.fit.seed), (7, 7));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"eval": {"threshold": 0.3}}"#).unwrap();
        assert_eq!(cfg.eval.threshold, 0.3);
        assert_eq!(cfg.eval.outcome_column, "dead");
        assert_eq!(cfg.train, TrainSection::default());
    }
}
