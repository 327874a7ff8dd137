//! Run configuration: one TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mipose::encoding::PyramidSpec;
use mipose::harness::{NoiseSpec, SceneConfig};
use mipose::mesh::{LengthUnit, DEFAULT_CONTINUOUS_STEPS};
use mipose::metrics::MetricConfig;
use mipose::pnp::RansacConfig;
use mipose::postprocess::PostprocessConfig;
use serde::Deserialize;

use crate::InputError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub models_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
pub enum Unit {
    #[default]
    #[serde(rename = "mm")]
    #[value(name = "mm")]
    Millimeters,
    #[serde(rename = "m")]
    #[value(name = "m")]
    Meters,
}

impl Unit {
    pub fn length_unit(self) -> LengthUnit {
        match self {
            Unit::Millimeters => LengthUnit::Millimeters,
            Unit::Meters => LengthUnit::Meters,
        }
    }

    /// File units per meter.
    pub fn per_meter(self) -> f64 {
        match self {
            Unit::Millimeters => 1000.0,
            Unit::Meters => 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub counts: Option<Vec<usize>>,
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub scenes: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model_unit: Unit,
    pub symmetry_steps: usize,
    pub paths: Paths,
    pub postprocess: PostprocessConfig,
    pub metrics: MetricConfig,
    pub pyramid: PyramidSpec,
    /// Unset keeps each command's own default noise.
    pub noise: Option<NoiseSpec>,
    pub scene: SceneConfig,
    pub ransac: RansacConfig,
    pub bench: BenchSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_unit: Unit::default(),
            symmetry_steps: DEFAULT_CONTINUOUS_STEPS,
            paths: Paths::default(),
            postprocess: PostprocessConfig::default(),
            metrics: MetricConfig::default(),
            pyramid: PyramidSpec::default(),
            noise: None,
            scene: SceneConfig::default(),
            ransac: RansacConfig::default(),
            bench: BenchSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        // toml errors carry the line, column and offending key.
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: mipose::Result<()>, section: &str| {
            r.map_err(|e| InputError(format!("[{section}] {e}")))
        };
        check(self.postprocess.validate(), "postprocess")?;
        check(self.metrics.validate(), "metrics")?;
        check(self.pyramid.validate(), "pyramid")?;
        check(self.scene.validate(), "scene")?;
        check(self.ransac.validate(), "ransac")?;
        if let Some(n) = &self.noise {
            check(n.validate(), "noise")?;
        }
        if self.symmetry_steps == 0 {
            return Err(InputError("symmetry_steps must be at least 1".into()).into());
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("mipose-out"))
    }
}

/// An existing path from the configuration, or an input error naming the
/// setting.
pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| InputError(format!("no {what} given (flag or [paths] entry)")))?;
    if !p.exists() {
        return Err(InputError(format!("{what} {} does not exist", p.display())).into());
    }
    Ok(p)
}
