//! Run configuration: a TOML file with flat sections, overridable by flags.
//! Every run writes the fully resolved form next to its outputs.

use anyhow::Context;
use negtune_core::codec::FreezeSpec;
use negtune_core::finetune::{DEFAULT_BATCH_SIZE, DEFAULT_CLIP_NORM, DEFAULT_CROP, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE};
use negtune_core::ratematch::RateMatchConfig;
use negtune_core::report::Sweep;
use negtune_core::{ScalingFactors, TiePolicy};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the directory all run outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "NEGTUNE_OUTPUT_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub codec: CodecSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub rate_match: RateMatchSection,
    pub eval: EvalSection,
    pub rank: RankSection,
    pub probe: ProbeSection,
}

/// A root holding `train/`, `validation/` and `test/`, or explicit
/// directories per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub root: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub checkpoint: Option<PathBuf>,
}

/// Fixed factors, the keyword `"calibrate"`, or the path of a JSON file
/// written by the calibrate command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalingSetting {
    Fixed(ScalingFactors),
    Keyword(String),
}

impl Default for ScalingSetting {
    fn default() -> Self {
        ScalingSetting::Keyword("calibrate".into())
    }
}

impl std::str::FromStr for ScalingSetting {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((b, g)) = s.split_once(',') {
            let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| config_err(format!("bad scaling value '{v}'")));
            return Ok(ScalingSetting::Fixed(ScalingFactors {
                beta_prime: parse(b)?,
                gamma_prime: parse(g)?,
            }));
        }
        Ok(ScalingSetting::Keyword(s.to_owned()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// `[alpha, beta, gamma]`.
    pub weights: [f64; 3],
    /// Defaults to the checkpoint's training lambda.
    pub lambda: Option<f64>,
    pub scaling: ScalingSetting,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            weights: [1.0, 0.0, 0.0],
            lambda: None,
            scaling: ScalingSetting::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub crop: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub validation_crop: Option<usize>,
    #[serde(with = "freeze_str")]
    pub freeze: FreezeSpec,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            crop: DEFAULT_CROP,
            batch_size: DEFAULT_BATCH_SIZE,
            clip_norm: DEFAULT_CLIP_NORM,
            validation_crop: None,
            freeze: FreezeSpec::DecoderOnly,
        }
    }
}

mod freeze_str {
    use negtune_core::codec::FreezeSpec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &FreezeSpec, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FreezeSpec, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateMatchSection {
    pub enabled: bool,
    /// Defaults to the starting checkpoint's mean bpp on the test split.
    pub target_bpp: Option<f64>,
    /// Defaults to the loss lambda.
    pub lambda0: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub max_expansions: usize,
    pub expansion: f64,
}

impl Default for RateMatchSection {
    fn default() -> Self {
        let d = RateMatchConfig::default();
        Self {
            enabled: false,
            target_bpp: None,
            lambda0: None,
            tol: d.tol,
            max_iter: d.max_iter,
            max_expansions: d.max_expansions,
            expansion: d.expansion,
        }
    }
}

impl RateMatchSection {
    pub fn search_config(&self) -> RateMatchConfig {
        RateMatchConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            max_expansions: self.max_expansions,
            expansion: self.expansion,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub center_crop: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSection {
    pub inputs: Vec<PathBuf>,
    pub tie_policy: TiePolicy,
    /// Columns where a smaller value ranks better, besides report `bpp`.
    pub lower_better: Vec<String>,
    /// Published accumulated ranks to reproduce; triggers the tie sweep.
    pub expect: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub sweeps: Vec<Sweep>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        use negtune_core::report::Attack;
        Self {
            sweeps: vec![
                Sweep {
                    attack: Attack::Unsharp { amount: 0.0, radius: 1.5 },
                    strengths: vec![0.0, 0.5, 1.0, 2.0, 3.0],
                },
                Sweep {
                    attack: Attack::Checkerboard { amplitude: 0.0, period: 1 },
                    strengths: vec![0.0, 0.01, 0.02, 0.04],
                },
                Sweep {
                    attack: Attack::Hline {
                        amplitude: 0.0,
                        spacing: 4,
                    },
                    strengths: vec![0.0, 0.02, 0.05, 0.1],
                },
            ],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    /// `$NEGTUNE_OUTPUT_ROOT/<output_dir>`, with `default_dir` when unset.
    pub fn output_path(&self, default_dir: &str) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(self.output_dir.clone().unwrap_or_else(|| PathBuf::from(default_dir)))
    }

    /// Directory of `split`: the explicit entry, else the root.
    pub fn split_dir(&self, split: negtune_core::Split) -> anyhow::Result<PathBuf> {
        use negtune_core::Split;
        let explicit = match split {
            Split::Train => &self.corpus.train,
            Split::Validation => &self.corpus.validation,
            Split::Test => &self.corpus.test,
        };
        explicit
            .clone()
            .or_else(|| self.corpus.root.clone())
            .ok_or_else(|| config_err(format!("no corpus given for the {split} split (set corpus.root or corpus.{split})")))
    }

    pub fn checkpoint_path(&self) -> anyhow::Result<&Path> {
        let p = self
            .codec
            .checkpoint
            .as_deref()
            .ok_or_else(|| config_err("codec.checkpoint is required"))?;
        if !p.is_file() {
            return Err(config_err(format!("checkpoint not found: {}", p.display())));
        }
        Ok(p)
    }
}
