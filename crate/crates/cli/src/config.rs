//! Run configuration files and the error type shared by all commands.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vulgnn::dataset::DatasetError;
use vulgnn::model::{ModelConfig, ModelError};
use vulgnn::protocol::{ProtocolError, Ratio, SplitSpec};
use vulgnn::train::{TrainConfig, TrainError};

/// A failed command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed or incompatible data (exit 2).
    Data(String),
    /// Non-finite values during training (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::BadFraction(_) | ProtocolError::BadRatio(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericalFault { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn data_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Model, optimizer and split settings for `train` and for each experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Use class weights of the whole dataset instead of recomputing them
    /// from each (possibly rebalanced) training set.
    pub freeze_class_weights: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Random 80/10/10 split.
    Test1,
    /// Unseen-project split.
    Test2,
    /// Synthetic training data plus fractions of the real training split.
    Test3 { synthetic: PathBuf, fractions: Vec<f64> },
    /// Real training split downsampled to non-vulnerable:vulnerable ratios.
    Test4 { ratios: Vec<Ratio> },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Test1 => "test1",
            Experiment::Test2 => "test2",
            Experiment::Test3 { .. } => "test3",
            Experiment::Test4 { .. } => "test4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    /// Real-world dataset directory, relative to the plan file.
    pub data: PathBuf,
    #[serde(default)]
    pub config: RunConfig,
    pub experiments: Vec<Experiment>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(data_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Resolves `p` against the directory holding `base_file`.
pub fn relative_to(base_file: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_kinds_parse() {
        let e: Vec<Experiment> = serde_json::from_str(
            r#"[{"kind": "test1"}, {"kind": "test3", "synthetic": "syn", "fractions": [0, 1]},
                {"kind": "test4", "ratios": [1, "inf"]}]"#,
        )
        .unwrap();
        assert_eq!(e[2], Experiment::Test4 { ratios: vec![Ratio::Finite(1), Ratio::All] });
        assert!(serde_json::from_str::<Experiment>(r#"{"kind": "test9"}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 2}, "model": {"dropout": 1.5}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 400);
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.train.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
