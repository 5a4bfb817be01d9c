//! Run configuration: one JSON file with a section per command. Unknown
//! keys are rejected everywhere so typos fail loudly, and every command
//! writes the exact configuration it resolved beside its outputs.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use viws_core::data::Split;
use viws_core::train::TrainConfig;
use viws_core::{Error, Result};

/// Environment override for `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "VIWS_OUTPUT_ROOT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root directory for everything a command writes;
    /// `VIWS_OUTPUT_ROOT` overrides it.
    #[serde(default)]
    pub output_root: Option<PathBuf>,
    #[serde(default)]
    pub synthesize: Option<SynthesizeSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub infer: Option<InferSection>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateCleanSection {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeSection {
    /// Directory of clean source videos (one subdirectory of frames per
    /// video).
    pub clean_root: PathBuf,
    /// When present and `clean_root` does not exist yet, render
    /// procedural clean videos into it first, making a run
    /// self-contained.
    #[serde(default)]
    pub generate_clean: Option<GenerateCleanSection>,
    pub videos_per_weather: usize,
    /// Fraction of each weather's videos in the train split.
    pub split_ratio: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub config: TrainConfig,
    pub manifest: PathBuf,
    /// Iterations between validation passes over the test split;
    /// omitted = once per epoch, 0 = never.
    #[serde(default)]
    pub validate_every: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub checkpoint: PathBuf,
    /// Directory of `.png` frames forming one video.
    pub input: PathBuf,
    /// Subdirectory name under `<output_root>/restored`; defaults to the
    /// input directory's own name.
    #[serde(default)]
    pub output_name: Option<String>,
    /// Temporal half-window; defaults to the checkpoint's value.
    #[serde(default)]
    pub n: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub manifest: PathBuf,
    /// Root holding one `<video_id>/` directory of restored frames per
    /// evaluated video.
    pub predictions: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Half-window used only to flag padded edge frames in the CSV.
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_split() -> Split {
    Split::Test
}

fn default_n() -> usize {
    2
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Output root after the environment override.
    pub fn resolved_output_root(&self) -> Result<PathBuf> {
        if let Ok(v) = std::env::var(OUTPUT_ROOT_ENV) {
            if !v.is_empty() {
                return Ok(PathBuf::from(v));
            }
        }
        self.output_root.clone().ok_or_else(|| {
            Error::Config(format!(
                "no output_root in config and {OUTPUT_ROOT_ENV} is unset"
            ))
        })
    }

    /// Write the configuration this command actually ran with beside its
    /// outputs.
    pub fn echo_resolved(&self, output_root: &Path, command: &str) -> Result<()> {
        let mut resolved = self.clone();
        resolved.output_root = Some(output_root.to_path_buf());
        std::fs::create_dir_all(output_root).map_err(|e| Error::io(output_root, e))?;
        let path = output_root.join(format!("{command}-resolved.json"));
        let text = serde_json::to_string_pretty(&resolved)
            .map_err(|e| Error::Config(format!("resolved config: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn synthesize_section(&self) -> Result<&SynthesizeSection> {
        self.synthesize
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `synthesize` section".into()))
    }

    pub fn train_section(&self) -> Result<&TrainSection> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `train` section".into()))
    }

    pub fn infer_section(&self) -> Result<&InferSection> {
        self.infer
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `infer` section".into()))
    }

    pub fn evaluate_section(&self) -> Result<&EvaluateSection> {
        self.evaluate
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `evaluate` section".into()))
    }
}
