//! Feed-forward ReLU networks with a scalar GLM head.
//!
//! A network with hidden sizes `[n_1, ..., n_L]` is stored as `L + 1` dense
//! layers. Layer `l` maps the ReLU output of layer `l - 1` (or the raw input
//! for `l = 0`) to the pre-activation `z^(l+1) = W^(l) chi^(l) + b^(l)`. The
//! last layer has a single row and produces the linear predictor `eta`; the
//! output link is applied on top of that by [`ReluNetwork::predict`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch: expected input of length {expected}, got {found}")]
    InputShape { expected: usize, found: usize },
    #[error("schema error in field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("shape-chain error at layer {layer}: {reason}")]
    ShapeChain { layer: usize, reason: String },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("output layer must have exactly one unit, found {units}")]
    MultiOutput { units: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Output link of the GLM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// Regression: `E[y] = eta`.
    Identity,
    /// Binary classification: `E[y] = 1 / (1 + exp(-eta))`.
    Logit,
}

impl Link {
    pub fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => sigmoid(eta),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logit => "logit",
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// A dense affine layer with row-major weights of shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Self {
        assert_eq!(weights.len(), in_dim * out_dim, "weight buffer size");
        assert_eq!(biases.len(), out_dim, "bias buffer size");
        Self {
            in_dim,
            out_dim,
            weights,
            biases,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self::new(in_dim, out_dim, vec![0.0; in_dim * out_dim], vec![0.0; out_dim])
    }

    pub fn from_rows(rows: &[Vec<f64>], biases: Vec<f64>) -> Self {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, Vec::len);
        let weights = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(in_dim, out_dim, weights, biases)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.in_dim + j]
    }

    /// `out = W x + b`.
    pub fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim.max(1))
                .take(self.out_dim)
                .zip(&self.biases)
                .map(|(row, b)| dot(row, x) + b),
        );
        if self.in_dim == 0 {
            out.clear();
            out.extend_from_slice(&self.biases);
        }
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.out_dim).map(|i| self.row(i).to_vec()).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of a forward pass: the linear predictor and every hidden layer's
/// pre-activation vector `z^(1..L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub eta: f64,
    pub preactivations: Vec<Vec<f64>>,
}

/// A feed-forward ReLU network with a univariate output.
///
/// Immutable after construction; all evaluation methods take `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    input_dim: usize,
    hidden_sizes: Vec<usize>,
    link: Link,
    layers: Vec<Layer>,
}

impl ReluNetwork {
    /// Assemble a network from its layers, checking the shape chain, the
    /// single-unit head and finiteness of every parameter.
    pub fn new(input_dim: usize, link: Link, layers: Vec<Layer>) -> Result<Self, NetworkError> {
        if input_dim == 0 {
            return Err(NetworkError::Schema {
                field: "input_dim".into(),
                reason: "must be positive".into(),
            });
        }
        if layers.is_empty() {
            return Err(NetworkError::Schema {
                field: "layers".into(),
                reason: "at least one layer is required".into(),
            });
        }
        let mut width = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dim != width {
                return Err(NetworkError::ShapeChain {
                    layer: l,
                    reason: format!("expected {} columns, found {}", width, layer.in_dim),
                });
            }
            if layer.out_dim == 0 {
                return Err(NetworkError::ShapeChain {
                    layer: l,
                    reason: "layer has no units".into(),
                });
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(NetworkError::NonFinite { layer: l });
            }
            width = layer.out_dim;
        }
        if width != 1 {
            return Err(NetworkError::MultiOutput { units: width });
        }
        let hidden_sizes = layers[..layers.len() - 1].iter().map(|l| l.out_dim).collect();
        Ok(Self {
            input_dim,
            hidden_sizes,
            link,
            layers,
        })
    }

    /// A network whose weights and biases are all zero.
    pub fn zeros(input_dim: usize, hidden_sizes: &[usize], link: Link) -> Self {
        let mut layers = Vec::with_capacity(hidden_sizes.len() + 1);
        let mut width = input_dim;
        for &h in hidden_sizes.iter().chain(std::iter::once(&1)) {
            layers.push(Layer::zeros(width, h));
            width = h;
        }
        Self::new(input_dim, link, layers).expect("zero network is well formed")
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    #[inline]
    pub fn num_hidden_layers(&self) -> usize {
        self.hidden_sizes.len()
    }

    pub fn total_hidden(&self) -> usize {
        self.hidden_sizes.iter().sum()
    }

    #[inline]
    pub fn link(&self) -> Link {
        self.link
    }

    #[inline]
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Linear predictor and all hidden pre-activations.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass, NetworkError> {
        self.check_input(x)?;
        let mut preactivations = Vec::with_capacity(self.hidden_sizes.len());
        let mut chi = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.affine_into(&chi, &mut z);
            chi.clear();
            chi.extend(z.iter().map(|&v| v.max(0.0)));
            preactivations.push(z.clone());
        }
        let head = self.layers.last().expect("nonempty");
        let eta = dot(head.row(0), &chi) + head.biases[0];
        Ok(ForwardPass {
            eta,
            preactivations,
        })
    }

    /// Linear predictor only, without keeping the intermediate vectors.
    pub fn eta(&self, x: &[f64]) -> Result<f64, NetworkError> {
        self.check_input(x)?;
        let mut chi = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.affine_into(&chi, &mut z);
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            std::mem::swap(&mut chi, &mut z);
        }
        let head = self.layers.last().expect("nonempty");
        Ok(dot(head.row(0), &chi) + head.biases[0])
    }

    /// Prediction on the response scale (link applied).
    pub fn predict(&self, x: &[f64]) -> Result<f64, NetworkError> {
        Ok(self.link.apply(self.eta(x)?))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetworkError> {
        if x.len() != self.input_dim {
            return Err(NetworkError::InputShape {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json_string();
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("network serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, NetworkError> {
        let value: Value = serde_json::from_str(s)?;
        parse_model_value(&value)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<ReluNetwork, NetworkError> {
    ReluNetwork::load(path)
}

pub fn save_network(net: &ReluNetwork, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    net.save(path)
}

/// On-disk model layout.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    input_dim: usize,
    hidden_sizes: Vec<usize>,
    link: Link,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl From<&ReluNetwork> for ModelFile {
    fn from(net: &ReluNetwork) -> Self {
        ModelFile {
            input_dim: net.input_dim,
            hidden_sizes: net.hidden_sizes.clone(),
            link: net.link,
            layers: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.rows(),
                    b: l.biases.clone(),
                })
                .collect(),
        }
    }
}

fn schema(field: &str, reason: impl Into<String>) -> NetworkError {
    NetworkError::Schema {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_model_value(value: &Value) -> Result<ReluNetwork, NetworkError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema("<root>", "expected a JSON object"))?;
    for field in ["input_dim", "hidden_sizes", "link", "layers"] {
        if !obj.contains_key(field) {
            return Err(schema(field, "missing field"));
        }
    }
    let input_dim = obj["input_dim"]
        .as_u64()
        .ok_or_else(|| schema("input_dim", "expected a non-negative integer"))? as usize;
    let hidden_sizes: Vec<usize> = obj["hidden_sizes"]
        .as_array()
        .ok_or_else(|| schema("hidden_sizes", "expected an array"))?
        .iter()
        .map(|v| v.as_u64().map(|u| u as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| schema("hidden_sizes", "expected integers"))?;
    let link = match obj["link"].as_str() {
        Some("identity") => Link::Identity,
        Some("logit") => Link::Logit,
        _ => return Err(schema("link", "expected \"identity\" or \"logit\"")),
    };
    let layer_values = obj["layers"]
        .as_array()
        .ok_or_else(|| schema("layers", "expected an array"))?;
    if layer_values.len() != hidden_sizes.len() + 1 {
        return Err(schema(
            "layers",
            format!(
                "expected {} layers for hidden_sizes {:?}, found {}",
                hidden_sizes.len() + 1,
                hidden_sizes,
                layer_values.len()
            ),
        ));
    }
    let mut layers = Vec::with_capacity(layer_values.len());
    for (l, lv) in layer_values.iter().enumerate() {
        let field = format!("layers[{l}]");
        let lo = lv
            .as_object()
            .ok_or_else(|| schema(&field, "expected an object"))?;
        let w = lo
            .get("W")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(&format!("{field}.W"), "missing or not an array"))?;
        let b = lo
            .get("b")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(&format!("{field}.b"), "missing or not an array"))?;
        let rows: Vec<Vec<f64>> = w
            .iter()
            .map(|row| {
                row.as_array()
                    .and_then(|r| r.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            })
            .collect::<Option<_>>()
            .ok_or_else(|| schema(&format!("{field}.W"), "expected rows of numbers"))?;
        let biases: Vec<f64> = b
            .iter()
            .map(Value::as_f64)
            .collect::<Option<_>>()
            .ok_or_else(|| schema(&format!("{field}.b"), "expected numbers"))?;
        let expected_in = if l == 0 { input_dim } else { hidden_sizes[l - 1] };
        let expected_out = if l < hidden_sizes.len() { hidden_sizes[l] } else { 1 };
        if l == hidden_sizes.len() && (rows.len() != 1 || biases.len() != 1) {
            return Err(NetworkError::MultiOutput { units: rows.len().max(biases.len()) });
        }
        if rows.len() != expected_out || biases.len() != expected_out {
            return Err(NetworkError::ShapeChain {
                layer: l,
                reason: format!(
                    "expected {} rows and biases, found {} rows and {} biases",
                    expected_out,
                    rows.len(),
                    biases.len()
                ),
            });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != expected_in) {
            return Err(NetworkError::ShapeChain {
                layer: l,
                reason: format!("expected {} columns, found {}", expected_in, bad.len()),
            });
        }
        layers.push(Layer::from_rows(&rows, biases));
    }
    ReluNetwork::new(input_dim, link, layers)
}

/// The two-input toy network with hidden sizes `[2, 4]` whose first layer is a
/// 45 degree rotation. It partitions `[-1, 1]^2` into 22 activation regions.
/// The output layer is not pinned down by the region geometry; it is set to
/// all ones with zero bias.
pub fn toy_network() -> ReluNetwork {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let l0 = Layer::from_rows(&[vec![-s, s], vec![s, s]], vec![0.0, 0.0]);
    let l1 = Layer::from_rows(
        &[
            vec![1.0, 0.25],
            vec![0.5, 1.0 / 3.0],
            vec![1.0 / 3.0, 0.5],
            vec![0.25, 1.0],
        ],
        vec![-0.3; 4],
    );
    let l2 = Layer::from_rows(&[vec![1.0; 4]], vec![0.0]);
    ReluNetwork::new(2, Link::Identity, vec![l0, l1, l2]).expect("toy network is well formed")
}
