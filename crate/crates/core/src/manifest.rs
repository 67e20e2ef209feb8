//! Run manifest: which dataset, which model, and every hyperparameter.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::{ModelKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

/// TOML schema:
///
/// ```toml
/// dataset = "dataset.toml"      # dataset manifest, relative to this file
/// model = "sain"                # or "biasedmf"
/// output_dir = "runs/ml100k"    # relative to this file
/// split_by_time = false
///
/// [model_config]                # every field optional
/// dim = 64
/// top_k = 8
///
/// [train]                       # every field optional
/// seed = 2019
/// max_epochs = 100
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub dataset: PathBuf,
    pub model: ModelKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split_by_time: bool,
    #[serde(default)]
    pub model_config: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Lexical normalization: drops `.` and folds `..` where possible.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

impl RunManifest {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ManifestError> {
        toml::from_str(text).map_err(|e| ManifestError::Parse {
            path: origin.to_path_buf(),
            msg: e.message().to_string(),
        })
    }

    /// Parse and resolve relative paths against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = std::path::absolute(base).map_err(|source| ManifestError::Io {
            path: base.to_path_buf(),
            source,
        })?;
        Ok(manifest.resolved(&base))
    }

    /// Same manifest with `dataset` and `output_dir` made absolute.
    pub fn resolved(mut self, base: &Path) -> Self {
        self.dataset = normalize(&base.join(&self.dataset));
        self.output_dir = normalize(&base.join(&self.output_dir));
        self
    }

    /// TOML with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model_config.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = \"d/dataset.toml\"\nmodel = \"sain\"\noutput_dir = \"../out\"\n";

    #[test]
    fn defaults_materialize() {
        let m = RunManifest::from_toml(MINIMAL, Path::new("x")).unwrap();
        assert_eq!(m.model_config, ModelConfig::default());
        assert_eq!(m.train, TrainConfig::default());
        let text = m.to_toml();
        assert!(text.contains("[model_config]") && text.contains("top_k = 8"));
        assert!(text.contains("batch_size = 256"));
        let again = RunManifest::from_toml(&text, Path::new("x")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn paths_resolve_against_base() {
        let m = RunManifest::from_toml(MINIMAL, Path::new("x"))
            .unwrap()
            .resolved(Path::new("/a/b"));
        assert_eq!(m.dataset, PathBuf::from("/a/b/d/dataset.toml"));
        assert_eq!(m.output_dir, PathBuf::from("/a/out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}bogus = 1\n");
        assert!(matches!(
            RunManifest::from_toml(&text, Path::new("x")),
            Err(ManifestError::Parse { .. })
        ));
        let text = format!("{MINIMAL}[train]\nlearning_rate = 1\n");
        assert!(RunManifest::from_toml(&text, Path::new("x")).is_err());
    }

    #[test]
    fn model_kind_parsed() {
        let text = MINIMAL.replace("sain", "biasedmf");
        let m = RunManifest::from_toml(&text, Path::new("x")).unwrap();
        assert_eq!(m.model, ModelKind::Biasedmf);
        let bad = MINIMAL.replace("sain", "ncf");
        assert!(RunManifest::from_toml(&bad, Path::new("x")).is_err());
    }
}
