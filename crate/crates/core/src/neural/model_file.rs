//! On-disk model format.
//!
//! A model file is a single JSON document:
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "kind": "ffnn" | "lstm",
//!   "norm": { "file": "norm.json", "fingerprint": "<hex>" },
//!   "layers": [ <layer>, ... ]
//! }
//! ```
//!
//! Dense layer: `{"type":"dense","inputs":I,"outputs":O,"activation":"elu|tanh|linear",
//! "weights":<blob O×I>,"bias":<blob O>}`.
//!
//! LSTM layer: `{"type":"lstm","inputs":D,"hidden":H,"gate_order":["input","forget","output","candidate"],
//! "input_weights":<blob 4×H×D>,"recurrent_weights":<blob 4×H×H>,"biases":<blob 4×H>}`;
//! gate blocks are stacked in `gate_order`, each block row-major.
//!
//! A blob is standard base64 (with padding) of consecutive little-endian
//! IEEE-754 `f64` values, row-major. Layers are listed input to output; for
//! an LSTM model the first layer is the recurrent one.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{Activation, DenseLayer, FeedForward, Gate, LstmCell, LstmNetwork, Matrix, NeuralError, GATES};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error("model file json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error("expected a {expected} model, found {found}")]
    Kind { expected: &'static str, found: String },
    #[error("bad weight blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Shape(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormRef {
    pub file: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    kind: String,
    norm: NormRef,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerDoc {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
        weights: String,
        bias: String,
    },
    Lstm {
        inputs: usize,
        hidden: usize,
        gate_order: Vec<String>,
        input_weights: String,
        recurrent_weights: String,
        biases: String,
    },
}

fn encode<S: Scalar>(values: impl IntoIterator<Item = S>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode<S: Scalar>(blob: &str, expected: usize) -> Result<Vec<S>, ModelFileError> {
    let bytes = STANDARD
        .decode(blob)
        .map_err(|e| ModelFileError::Blob(e.to_string()))?;
    if bytes.len() != expected * 8 {
        return Err(ModelFileError::Blob(format!(
            "expected {expected} f64 values ({} bytes), got {} bytes",
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect())
}

fn dense_doc<S: Scalar>(layer: &DenseLayer<S>) -> LayerDoc {
    LayerDoc::Dense {
        inputs: layer.inputs(),
        outputs: layer.outputs(),
        activation: layer.activation,
        weights: encode(layer.weights.as_slice().iter().copied()),
        bias: encode(layer.bias.iter().copied()),
    }
}

fn dense_from_doc<S: Scalar>(doc: &LayerDoc) -> Result<DenseLayer<S>, ModelFileError> {
    match doc {
        LayerDoc::Dense {
            inputs,
            outputs,
            activation,
            weights,
            bias,
        } => Ok(DenseLayer::new(
            Matrix::from_vec(*outputs, *inputs, decode(weights, inputs * outputs)?)?,
            decode(bias, *outputs)?,
            *activation,
        )?),
        LayerDoc::Lstm { .. } => Err(ModelFileError::Kind {
            expected: "dense layer",
            found: "lstm layer".into(),
        }),
    }
}

fn lstm_doc<S: Scalar>(cell: &LstmCell<S>) -> LayerDoc {
    LayerDoc::Lstm {
        inputs: cell.input_size(),
        hidden: cell.hidden_size(),
        gate_order: Gate::ALL.iter().map(|g| g.name().to_owned()).collect(),
        input_weights: encode(cell.input_weights.iter().flat_map(|m| m.as_slice().iter().copied())),
        recurrent_weights: encode(cell.recurrent_weights.iter().flat_map(|m| m.as_slice().iter().copied())),
        biases: encode(cell.biases.iter().flat_map(|b| b.iter().copied())),
    }
}

fn lstm_from_doc<S: Scalar>(doc: &LayerDoc) -> Result<LstmCell<S>, ModelFileError> {
    let LayerDoc::Lstm {
        inputs,
        hidden,
        gate_order,
        input_weights,
        recurrent_weights,
        biases,
    } = doc
    else {
        return Err(ModelFileError::Kind {
            expected: "lstm layer",
            found: "dense layer".into(),
        });
    };
    let expected_order: Vec<&str> = Gate::ALL.iter().map(|g| g.name()).collect();
    if gate_order.iter().map(String::as_str).ne(expected_order.iter().copied()) {
        return Err(ModelFileError::Blob(format!("unsupported gate order {gate_order:?}")));
    }
    let (d, h) = (*inputs, *hidden);
    let w: Vec<S> = decode(input_weights, GATES * h * d)?;
    let u: Vec<S> = decode(recurrent_weights, GATES * h * h)?;
    let b: Vec<S> = decode(biases, GATES * h)?;
    let block = |v: &[S], k: usize, rows: usize, cols: usize| {
        Matrix::from_vec(rows, cols, v[k * rows * cols..(k + 1) * rows * cols].to_vec())
    };
    let mut iw = Vec::with_capacity(GATES);
    let mut rw = Vec::with_capacity(GATES);
    for k in 0..GATES {
        iw.push(block(&w, k, h, d)?);
        rw.push(block(&u, k, h, h)?);
    }
    Ok(LstmCell::from_parts(
        iw.try_into().expect("GATES blocks"),
        rw.try_into().expect("GATES blocks"),
        std::array::from_fn(|k| b[k * h..(k + 1) * h].to_vec()),
    )?)
}

fn write_doc(kind: &str, norm: &NormRef, layers: Vec<LayerDoc>) -> String {
    let doc = ModelDoc {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_owned(),
        norm: norm.clone(),
        layers,
    };
    serde_json::to_string_pretty(&doc).expect("model documents always serialize")
}

fn read_doc(text: &str, kind: &'static str) -> Result<ModelDoc, ModelFileError> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(ModelFileError::Version(doc.schema_version));
    }
    if doc.kind != kind {
        return Err(ModelFileError::Kind {
            expected: kind,
            found: doc.kind,
        });
    }
    Ok(doc)
}

pub fn ffnn_to_string<S: Scalar>(net: &FeedForward<S>, norm: &NormRef) -> String {
    write_doc("ffnn", norm, net.layers.iter().map(dense_doc).collect())
}

pub fn ffnn_from_str<S: Scalar>(text: &str) -> Result<(FeedForward<S>, NormRef), ModelFileError> {
    let doc = read_doc(text, "ffnn")?;
    let layers = doc.layers.iter().map(dense_from_doc).collect::<Result<Vec<_>, _>>()?;
    Ok((FeedForward::new(layers)?, doc.norm))
}

pub fn lstm_to_string<S: Scalar>(net: &LstmNetwork<S>, norm: &NormRef) -> String {
    let mut layers = vec![lstm_doc(&net.cell)];
    layers.extend(net.head.layers.iter().map(dense_doc));
    write_doc("lstm", norm, layers)
}

pub fn lstm_from_str<S: Scalar>(text: &str) -> Result<(LstmNetwork<S>, NormRef), ModelFileError> {
    let doc = read_doc(text, "lstm")?;
    let (first, rest) = doc.layers.split_first().ok_or(NeuralError::Empty)?;
    let cell = lstm_from_doc(first)?;
    let head = rest.iter().map(dense_from_doc).collect::<Result<Vec<_>, _>>()?;
    Ok((LstmNetwork::new(cell, FeedForward::new(head)?)?, doc.norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm() -> NormRef {
        NormRef {
            file: "norm.json".into(),
            fingerprint: "abc".into(),
        }
    }

    #[test]
    fn ffnn_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FeedForward::<f64>::xavier(5, &[7, 3], 1, Activation::Elu, &mut rng);
        let text = ffnn_to_string(&net, &norm());
        let (back, n) = ffnn_from_str::<f64>(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(n, norm());
        assert_eq!(ffnn_to_string(&back, &n), text);
    }

    #[test]
    fn lstm_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LstmNetwork::<f64>::xavier(5, 4, 6, 1, Activation::Elu, &mut rng);
        let (back, _) = lstm_from_str::<f64>(&lstm_to_string(&net, &norm())).unwrap();
        assert_eq!(back.flatten(), net.flatten());
    }

    #[test]
    fn wrong_kind_and_truncated_blob_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FeedForward::<f64>::xavier(2, &[2], 1, Activation::Elu, &mut rng);
        let text = ffnn_to_string(&net, &norm());
        assert!(matches!(lstm_from_str::<f64>(&text), Err(ModelFileError::Kind { .. })));
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["layers"][0]["bias"] = serde_json::Value::String(STANDARD.encode([0u8; 8]));
        assert!(matches!(ffnn_from_str::<f64>(&doc.to_string()), Err(ModelFileError::Blob(_))));
    }
}
