//! JSON checkpoints. Weight and bias arrays are stored as base64 of their
//! little-endian f64 bytes so that a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Network};
use crate::nn::DenseLayer;
use crate::quant::{QuantSpec, QuantState};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "qdnn-lab-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    in_dim: usize,
    out_dim: usize,
    weight: String,
    bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantRecord {
    weight_bits: Option<u32>,
    activation_bits: Option<u32>,
    quantize_shortcut: bool,
    delta: Vec<f64>,
    alpha: Vec<f64>,
    shortcut_alpha: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    architecture: ModelConfig,
    layers: Vec<LayerRecord>,
    quant: Option<QuantRecord>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64s", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn to_json(model: &Model) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        architecture: model.network.config,
        layers: model
            .network
            .layers
            .iter()
            .map(|l| LayerRecord {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                weight: encode_f64s(l.weight.data()),
                bias: encode_f64s(&l.bias),
            })
            .collect(),
        quant: model.quant.as_ref().map(|q| QuantRecord {
            weight_bits: q.spec.weight_bits,
            activation_bits: q.spec.activation_bits,
            quantize_shortcut: q.spec.quantize_shortcut,
            delta: q.layers.iter().map(|s| s.delta).collect(),
            alpha: q.layers.iter().map(|s| s.alpha).collect(),
            shortcut_alpha: q.layers.iter().map(|s| s.shortcut_alpha).collect(),
        }),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::config(format!("checkpoint encoding: {e}")))
}

pub fn from_json(text: &str, path: &Path) -> Result<Model> {
    let bad = |reason: String| Error::format(path, reason);
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format tag {:?}", file.format)));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, rec) in file.layers.iter().enumerate() {
        let w = decode_f64s(&rec.weight).map_err(|e| bad(format!("layer {i} weight: {e}")))?;
        let b = decode_f64s(&rec.bias).map_err(|e| bad(format!("layer {i} bias: {e}")))?;
        let weight = Matrix::from_vec(rec.out_dim, rec.in_dim, w).map_err(|e| bad(format!("layer {i}: {e}")))?;
        layers.push(DenseLayer::new(weight, b).map_err(|e| bad(format!("layer {i}: {e}")))?);
    }
    let network = Network::from_layers(file.architecture, layers).map_err(|e| bad(e.to_string()))?;
    let quant = match file.quant {
        None => None,
        Some(q) => {
            let n = network.layers.len();
            if q.delta.len() != n || q.alpha.len() != n || q.shortcut_alpha.len() != n {
                return Err(bad(format!("quant metadata does not cover {n} layers")));
            }
            let spec = QuantSpec {
                weight_bits: q.weight_bits,
                activation_bits: q.activation_bits,
                quantize_shortcut: q.quantize_shortcut,
            };
            spec.validate().map_err(|e| bad(e.to_string()))?;
            let layers = (0..n)
                .map(|l| crate::quant::LayerQuantState {
                    delta: q.delta[l],
                    alpha: q.alpha[l],
                    shortcut_alpha: q.shortcut_alpha[l],
                })
                .collect();
            Some(QuantState { spec, layers })
        }
    };
    Ok(Model { network, quant })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_fcdnn;
    use crate::train::init_quant_state;

    #[test]
    fn float_round_trip_is_bit_exact() {
        let model = Model::float(build_fcdnn(ModelConfig::new(16, 4).residual(true), 3).unwrap());
        let back = from_json(&to_json(&model).unwrap(), Path::new("m.json")).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn quant_metadata_round_trips() {
        let net = build_fcdnn(ModelConfig::new(8, 3), 1).unwrap();
        let x = Matrix::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let state = init_quant_state(&net, QuantSpec::both(2, 3), &x).unwrap();
        let model = Model { network: net, quant: Some(state) };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.json");
        save_checkpoint(&model, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), model);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"weight_bits\": 2"));
    }

    #[test]
    fn special_values_survive() {
        let v = [0.0, -0.0, 1e-310, f64::MAX, -1.5];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode_f64s("AAAA").is_err());
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let p = Path::new("x.json");
        assert!(matches!(from_json("{", p), Err(Error::Format { .. })));
        let model = Model::float(build_fcdnn(ModelConfig::new(4, 2), 0).unwrap());
        let text = to_json(&model).unwrap().replace("\"width\": 4", "\"width\": 5");
        assert!(matches!(from_json(&text, p), Err(Error::Format { .. })));
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/c.json")), Err(Error::File { .. })));
    }
}
