//! JSON parameter checkpoints.
//!
//! ```json
//! {"format":"overlaydetect-fusion","version":1,"dims":{...},"train_config":{...},
//!  "tensors":[{"name":"embedding","shape":[97,16],"data":[...]}, ...]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{FusionDims, FusionParams, Tensor};
use super::train::TrainConfig;
use super::FusionError;

pub const CHECKPOINT_FORMAT: &str = "overlaydetect-fusion";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dims: FusionDims,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(params: &FusionParams, config: Option<&TrainConfig>) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dims: params.dims.clone(),
        train_config: config.cloned(),
        tensors: FusionParams::tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape.clone(),
                data: t.data.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<(FusionParams, Option<TrainConfig>), FusionError> {
    let bad = |m: String| FusionError::Checkpoint(m);
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    file.dims.validate()?;
    let mut params = FusionParams::zeros(&file.dims);
    let names = FusionParams::tensor_names();
    if file.tensors.len() != names.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            names.len(),
            file.tensors.len()
        )));
    }
    for ((slot, name), stored) in params.tensors_mut().into_iter().zip(&names).zip(file.tensors) {
        if &stored.name != name {
            return Err(bad(format!("expected tensor {name}, found {}", stored.name)));
        }
        let expected_len: usize = slot.shape.iter().product();
        if stored.shape != slot.shape || stored.data.len() != expected_len {
            return Err(FusionError::Shape {
                tensor: stored.name,
                expected: slot.shape.clone(),
                found: stored.shape,
            });
        }
        *slot = Tensor {
            shape: stored.shape,
            data: stored.data,
        };
    }
    Ok((params, file.train_config))
}

pub fn save(path: &Path, params: &FusionParams, config: Option<&TrainConfig>) -> Result<(), FusionError> {
    fs::write(path, to_json(params, config)).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(FusionParams, Option<TrainConfig>), FusionError> {
    let text = fs::read_to_string(path).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let p = FusionParams::init(&FusionDims::default(), 11);
        let (back, cfg) = from_json(&to_json(&p, Some(&TrainConfig::default()))).unwrap();
        assert_eq!(back, p);
        assert_eq!(cfg, Some(TrainConfig::default()));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let p = FusionParams::init(&FusionDims::default(), 1);
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&p, None)).unwrap();
        v["dims"]["text_hidden"] = serde_json::json!(8);
        assert!(matches!(from_json(&v.to_string()), Err(FusionError::Shape { .. })));
    }

    #[test]
    fn rejects_foreign_format() {
        let p = FusionParams::zeros(&FusionDims::default());
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&p, None)).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(matches!(from_json(&v.to_string()), Err(FusionError::Checkpoint(_))));
    }
}
