use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dtype;
use crate::error::{Error, Result};

/// One dumped layer. `file_pattern` is relative to the manifest's directory
/// and substitutes `{layer}` and `{sample}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub file_pattern: String,
}

/// JSON description of a set of activation dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub model_name: String,
    pub layers: Vec<LayerEntry>,
    pub num_samples: usize,
    pub dtype: Dtype,
    /// Where in the layer the activations were taken (e.g. after the
    /// nonlinearity). Free-form; recorded, never interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_point: Option<String>,
}

impl DumpManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::InvalidManifest(
                "num_samples must be at least 1".into(),
            ));
        }
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.layer_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate layer_id {}",
                    l.layer_id
                )));
            }
            if l.c == 0 || l.h == 0 || l.w == 0 {
                return Err(Error::InvalidManifest(format!(
                    "layer {} has a zero dimension ({}, {}, {})",
                    l.layer_id, l.c, l.h, l.w
                )));
            }
            if self.num_samples > 1 && !l.file_pattern.contains("{sample}") {
                return Err(Error::InvalidManifest(format!(
                    "file_pattern for {} lacks a {{sample}} placeholder",
                    l.layer_id
                )));
            }
        }
        Ok(())
    }

    /// Reads and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn layer(&self, layer_id: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// File holding `sample_id` of `layer_id`, resolved against `root`.
    pub fn sample_path(&self, root: &Path, layer_id: &str, sample_id: usize) -> Result<PathBuf> {
        let entry = self
            .layer(layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
        if sample_id >= self.num_samples {
            return Err(Error::InvalidInput(format!(
                "sample {sample_id} out of range; manifest has {} samples",
                self.num_samples
            )));
        }
        let rel = entry
            .file_pattern
            .replace("{layer}", layer_id)
            .replace("{sample}", &sample_id.to_string());
        Ok(root.join(rel))
    }
}
