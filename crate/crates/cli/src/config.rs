use anyhow::{bail, Context, Result};
use ple_core::leakage::SynthTaskSpec;
use ple_core::model::PleConfig;
use ple_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a subcommand needs. Precedence, lowest first: built-in
/// defaults, the `--config` file, command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `vocab_size` 0 means "size of the training vocabulary".
    pub model: PleConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub report_dir: PathBuf,
    pub seed: u64,
    /// Task used by `--synth` runs.
    pub synth: SynthTaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PleConfig::tiny(0),
            train: TrainConfig::default(),
            dataset: None,
            checkpoint: None,
            lexicon: None,
            report_dir: PathBuf::from("reports"),
            seed: 0,
            synth: SynthTaskSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the global flags. A seed given on the command line also
    /// seeds the trainer's shuffling.
    pub fn resolve(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = match config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(o) = out {
            cfg.report_dir = o.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.report_dir.join("model.ple"))
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        match &self.dataset {
            Some(p) => Ok(p),
            None => bail!("no dataset given (set `dataset` in the config or pass --dataset)"),
        }
    }
}

/// Vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}
