//! JSON checkpoints for MLP parameters.
//!
//! A network document looks like
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "spec": {"layer_sizes": [12, 64, 64, 3], "hidden_activation": "ReLU", "output_activation": "Linear"},
//!   "params": [{"weight": [[...], ...], "bias": [...]}, ...],
//!   "metadata": {"scenario": "TwoLaneOneBlock", "n_agents": 4, "seed": 1, "episode": 200}
//! }
//! ```
//!
//! `weight` rows are indexed by input unit. Numbers are written with
//! shortest round-trip formatting, so a save/load cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Dense, Mlp, MlpSpec, NnError, ParamSet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub scenario: String,
    pub n_agents: usize,
    pub seed: u64,
    pub episode: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDoc {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub format_version: u32,
    pub spec: MlpSpec,
    params: Vec<LayerDoc>,
    pub metadata: CheckpointMetadata,
}

impl NetworkDoc {
    pub fn from_mlp(mlp: &Mlp, metadata: CheckpointMetadata) -> Self {
        let params = mlp
            .params
            .layers
            .iter()
            .map(|l| LayerDoc {
                weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            spec: mlp.spec.clone(),
            params,
            metadata,
        }
    }

    pub fn to_mlp(&self) -> Result<Mlp, NnError> {
        check_version(self.format_version)?;
        self.spec.validate()?;
        let mut layers = Vec::with_capacity(self.params.len());
        for layer in &self.params {
            let rows = layer.weight.len();
            let cols = layer.weight.first().map_or(0, Vec::len);
            if layer.weight.iter().any(|r| r.len() != cols) {
                return Err(NnError::ShapeMismatch("ragged weight matrix".into()));
            }
            let flat: Vec<f64> = layer.weight.iter().flatten().copied().collect();
            let weight = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
            layers.push(Dense {
                weight,
                bias: Array1::from(layer.bias.clone()),
            });
        }
        let params = ParamSet { layers };
        if !params.all_finite() {
            return Err(NnError::FormatVersionMismatch("non-finite parameter".into()));
        }
        Mlp::new(self.spec.clone(), params)
    }
}

/// Several networks saved together, e.g. every agent of a trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBundle {
    pub format_version: u32,
    pub algo: String,
    pub metadata: CheckpointMetadata,
    pub networks: Vec<NetworkDoc>,
}

impl CheckpointBundle {
    pub fn network(&self, role: &str, agent: usize) -> Option<&NetworkDoc> {
        self.networks
            .iter()
            .find(|n| n.metadata.role.as_deref() == Some(role) && n.metadata.agent == Some(agent))
    }

    pub fn count_role(&self, role: &str) -> usize {
        self.networks
            .iter()
            .filter(|n| n.metadata.role.as_deref() == Some(role))
            .count()
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        serde_json::to_string(self).map_err(|e| NnError::FormatVersionMismatch(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let bundle: Self =
            serde_json::from_str(text).map_err(|e| NnError::FormatVersionMismatch(e.to_string()))?;
        check_version(bundle.format_version)?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn check_version(found: u32) -> Result<(), NnError> {
    if found != FORMAT_VERSION {
        return Err(NnError::FormatVersionMismatch(format!(
            "format_version {found}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NnError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_params(mlp: &Mlp, metadata: CheckpointMetadata, path: &Path) -> Result<(), NnError> {
    let doc = NetworkDoc::from_mlp(mlp, metadata);
    let text = serde_json::to_string(&doc).map_err(|e| NnError::FormatVersionMismatch(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Loads a network document. When `expected` is given the stored spec must
/// match it exactly.
pub fn load_params(path: &Path, expected: Option<&MlpSpec>) -> Result<(Mlp, CheckpointMetadata), NnError> {
    let text = fs::read_to_string(path)?;
    let doc: NetworkDoc =
        serde_json::from_str(&text).map_err(|e| NnError::FormatVersionMismatch(e.to_string()))?;
    let mlp = doc.to_mlp()?;
    if let Some(spec) = expected {
        if &mlp.spec != spec {
            return Err(NnError::ShapeMismatch(format!(
                "checkpoint layer sizes {:?}, expected {:?}",
                mlp.spec.layer_sizes, spec.layer_sizes
            )));
        }
    }
    Ok((mlp, doc.metadata))
}
