use std::fs;
use std::path::{Path, PathBuf};

use mrcae_core::bss_eval::DEFAULT_FILTER_TAPS;
use mrcae_core::datapipe::OverlapMode;
use mrcae_core::pipeline::DEFAULT_INFER_BATCH;
use mrcae_core::synth::SynthSpec;
use mrcae_core::trainer::Hyperparams;
use mrcae_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Every field has a default, so an empty JSON
/// object describes the full-size configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub seg_len: usize,
    /// Hop between windows at separation time.
    pub hop_test: usize,
    /// Hop between training windows; defaults to `seg_len`.
    pub hop_train: Option<usize>,
    /// Divide training targets by the mixture's standard deviation.
    pub scale_targets: bool,
    pub overlap_mode: OverlapMode,
    /// Sources the model separates, in output order. Defaults to every
    /// source listed in the manifest.
    pub targets: Option<Vec<String>>,
    /// Segments per inference call.
    pub infer_batch: usize,
    /// Song count for `synth`.
    pub songs: usize,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::from("data/manifest.json"),
            seg_len: 1025,
            hop_test: 16,
            hop_train: None,
            scale_targets: true,
            overlap_mode: OverlapMode::Average,
            targets: None,
            infer_batch: DEFAULT_INFER_BATCH,
            songs: 6,
            synth: SynthSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn hop_train(&self) -> usize {
        self.hop_train.unwrap_or(self.seg_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub filter_taps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            filter_taps: DEFAULT_FILTER_TAPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        let d = &self.data;
        if d.seg_len != self.model.segment_len {
            return Err(Error::config(format!(
                "data.seg_len {} differs from model.segment_len {}",
                d.seg_len, self.model.segment_len
            )));
        }
        if d.hop_test == 0 || d.hop_test > d.seg_len {
            return Err(Error::config("data.hop_test must be in 1..=seg_len"));
        }
        if d.hop_train() == 0 {
            return Err(Error::config("data.hop_train must be positive"));
        }
        if d.infer_batch == 0 {
            return Err(Error::config("data.infer_batch must be positive"));
        }
        if let Some(t) = &d.targets {
            if t.len() != self.model.num_sources {
                return Err(Error::config(format!(
                    "{} target sources listed, model separates {}",
                    t.len(),
                    self.model.num_sources
                )));
            }
        }
        if self.eval.filter_taps == 0 {
            return Err(Error::config("eval.filter_taps must be at least 1"));
        }
        Ok(())
    }
}
