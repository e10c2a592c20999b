//! JSON model documents.
//!
//! Every file carries a `kind` tag, a format `version` and the model's own
//! fields, which include its dimensions. Floats are written in the shortest
//! form that parses back to the identical `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uap_sentinel_core::attack::PerturbationBank;
use uap_sentinel_core::baseline::{LinearDetector, PcaModel};
use uap_sentinel_core::classifier::MlpClassifier;
use uap_sentinel_core::detector::DetectorParams;

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Classifier(MlpClassifier),
    Bank(PerturbationBank),
    Detector(DetectorParams),
    Pca(PcaModel),
    Linear(LinearDetector),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Classifier(_) => "classifier",
            Model::Bank(_) => "bank",
            Model::Detector(_) => "detector",
            Model::Pca(_) => "pca",
            Model::Linear(_) => "linear",
        }
    }

    fn validate(&self) -> uap_sentinel_core::Result<()> {
        match self {
            Model::Classifier(m) => m.validate(),
            Model::Bank(m) => m.validate(),
            Model::Detector(m) => m.validate(),
            Model::Pca(m) => m.validate(),
            Model::Linear(m) => {
                if m.weights.iter().chain([&m.bias]).all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(uap_sentinel_core::Error::InvalidArgument(
                        "non-finite linear detector".into(),
                    ))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    #[serde(flatten)]
    pub model: Model,
}

#[derive(Debug)]
pub enum ModelFileError {
    Missing(std::path::PathBuf),
    Io(String),
    Format(String),
}

impl std::fmt::Display for ModelFileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelFileError::Missing(p) => write!(f, "missing model file {}", p.display()),
            ModelFileError::Io(m) | ModelFileError::Format(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for ModelFileError {}

impl ModelFile {
    pub fn new(model: Model) -> Self {
        Self {
            version: MODEL_VERSION,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("models serialize");
        s.push('\n');
        s
    }

    /// Parses and validates a document.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.version != MODEL_VERSION {
            return Err(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                file.version
            ));
        }
        file.model
            .validate()
            .map_err(|e| format!("invalid {} model: {e}", file.model.kind()))?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ModelFileError::Missing(path.to_path_buf()),
            _ => ModelFileError::Io(format!("{}: {e}", path.display())),
        })?;
        Self::from_json(&text)
            .map_err(|e| ModelFileError::Format(format!("{}: {e}", path.display())))
    }
}
