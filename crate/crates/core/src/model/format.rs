//! JSON model documents. See `docs/format.md` for the field reference.

use super::{Activation, AxisNames, LayerOp, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Precision, Tensor};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    pub layers: Vec<LayerDocument>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_names: Option<Vec<AxisNames>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_names: Option<Vec<Vec<String>>>,
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

fn last_axis() -> isize {
    -1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerDocument {
    Input {
        id: String,
        shape: Vec<usize>,
    },
    Dense {
        id: String,
        inbound: Vec<String>,
        weight: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default)]
        activation: Activation,
    },
    Conv2D {
        id: String,
        inbound: Vec<String>,
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default = "unit_stride")]
        stride: [usize; 2],
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        activation: Activation,
    },
    AvgPool2D {
        id: String,
        inbound: Vec<String>,
        pool_size: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<[usize; 2]>,
    },
    MaxPool2D {
        id: String,
        inbound: Vec<String>,
        pool_size: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<[usize; 2]>,
    },
    Flatten {
        id: String,
        inbound: Vec<String>,
    },
    Concatenate {
        id: String,
        inbound: Vec<String>,
        #[serde(default = "last_axis")]
        axis: isize,
    },
}

fn nested2(id: &str, what: &str, rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape {
            layer: id.into(),
            message: format!("{what} must be a non-empty rectangular array"),
        });
    }
    Tensor::from_vec(vec![rows.len(), cols], rows.concat())
}

fn nested4(id: &str, k: &[Vec<Vec<Vec<f64>>>]) -> Result<Tensor> {
    let bad = || Error::Shape {
        layer: id.into(),
        message: "kernel must be a non-empty rectangular [out][in][kH][kW] array".into(),
    };
    let o = k.len();
    let c = k.first().map_or(0, Vec::len);
    let h = k.first().and_then(|a| a.first()).map_or(0, Vec::len);
    let w = k
        .first()
        .and_then(|a| a.first())
        .and_then(|a| a.first())
        .map_or(0, Vec::len);
    if o * c * h * w == 0 {
        return Err(bad());
    }
    let mut data = Vec::with_capacity(o * c * h * w);
    for a in k {
        if a.len() != c {
            return Err(bad());
        }
        for b in a {
            if b.len() != h {
                return Err(bad());
            }
            for r in b {
                if r.len() != w {
                    return Err(bad());
                }
                data.extend_from_slice(r);
            }
        }
    }
    Tensor::from_vec(vec![o, c, h, w], data)
}

fn vector(id: &str, v: &Option<Vec<f64>>) -> Result<Option<Tensor>> {
    match v {
        None => Ok(None),
        Some(v) if v.is_empty() => Err(Error::Shape {
            layer: id.into(),
            message: "bias must not be empty".into(),
        }),
        Some(v) => Ok(Some(Tensor::from_vec(vec![v.len()], v.clone())?)),
    }
}

impl LayerDocument {
    pub fn id(&self) -> &str {
        match self {
            LayerDocument::Input { id, .. }
            | LayerDocument::Dense { id, .. }
            | LayerDocument::Conv2D { id, .. }
            | LayerDocument::AvgPool2D { id, .. }
            | LayerDocument::MaxPool2D { id, .. }
            | LayerDocument::Flatten { id, .. }
            | LayerDocument::Concatenate { id, .. } => id,
        }
    }

    fn to_spec(&self) -> Result<LayerSpec> {
        let (inbound, op) = match self {
            LayerDocument::Input { shape, .. } => (
                Vec::new(),
                LayerOp::Input {
                    shape: shape.clone(),
                },
            ),
            LayerDocument::Dense {
                id,
                inbound,
                weight,
                bias,
                activation,
            } => (
                inbound.clone(),
                LayerOp::Dense {
                    weight: nested2(id, "weight", weight)?,
                    bias: vector(id, bias)?,
                    activation: *activation,
                },
            ),
            LayerDocument::Conv2D {
                id,
                inbound,
                kernel,
                bias,
                stride,
                padding,
                activation,
            } => (
                inbound.clone(),
                LayerOp::Conv2D {
                    kernel: nested4(id, kernel)?,
                    bias: vector(id, bias)?,
                    stride: (stride[0], stride[1]),
                    padding: *padding,
                    activation: *activation,
                },
            ),
            LayerDocument::AvgPool2D {
                inbound,
                pool_size,
                stride,
                ..
            } => {
                let s = stride.unwrap_or(*pool_size);
                (
                    inbound.clone(),
                    LayerOp::AvgPool2D {
                        pool: (pool_size[0], pool_size[1]),
                        stride: (s[0], s[1]),
                    },
                )
            }
            LayerDocument::MaxPool2D {
                inbound,
                pool_size,
                stride,
                ..
            } => {
                let s = stride.unwrap_or(*pool_size);
                (
                    inbound.clone(),
                    LayerOp::MaxPool2D {
                        pool: (pool_size[0], pool_size[1]),
                        stride: (s[0], s[1]),
                    },
                )
            }
            LayerDocument::Flatten { inbound, .. } => (inbound.clone(), LayerOp::Flatten),
            LayerDocument::Concatenate { inbound, axis, .. } => {
                (inbound.clone(), LayerOp::Concatenate { axis: *axis })
            }
        };
        Ok(LayerSpec {
            id: self.id().to_string(),
            inbound,
            op,
        })
    }

    fn from_spec(spec: &LayerSpec) -> LayerDocument {
        let id = spec.id.clone();
        let inbound = spec.inbound.clone();
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
        };
        let vec1 = |t: &Option<Tensor>| t.as_ref().map(|b| b.data().to_vec());
        match &spec.op {
            LayerOp::Input { shape } => LayerDocument::Input {
                id,
                shape: shape.clone(),
            },
            LayerOp::Dense {
                weight,
                bias,
                activation,
            } => LayerDocument::Dense {
                id,
                inbound,
                weight: rows(weight),
                bias: vec1(bias),
                activation: *activation,
            },
            LayerOp::Conv2D {
                kernel,
                bias,
                stride,
                padding,
                activation,
            } => {
                let s = kernel.shape();
                let kernel = kernel
                    .data()
                    .chunks(s[1] * s[2] * s[3])
                    .map(|o| {
                        o.chunks(s[2] * s[3])
                            .map(|c| c.chunks(s[3]).map(<[f64]>::to_vec).collect())
                            .collect()
                    })
                    .collect();
                LayerDocument::Conv2D {
                    id,
                    inbound,
                    kernel,
                    bias: vec1(bias),
                    stride: [stride.0, stride.1],
                    padding: *padding,
                    activation: *activation,
                }
            }
            LayerOp::AvgPool2D { pool, stride } => LayerDocument::AvgPool2D {
                id,
                inbound,
                pool_size: [pool.0, pool.1],
                stride: Some([stride.0, stride.1]),
            },
            LayerOp::MaxPool2D { pool, stride } => LayerDocument::MaxPool2D {
                id,
                inbound,
                pool_size: [pool.0, pool.1],
                stride: Some([stride.0, stride.1]),
            },
            LayerOp::Flatten => LayerDocument::Flatten { id, inbound },
            LayerOp::Concatenate { axis } => LayerDocument::Concatenate {
                id,
                inbound,
                axis: *axis,
            },
        }
    }
}

const KNOWN_KINDS: [&str; 7] = [
    "Input",
    "Dense",
    "Conv2D",
    "AvgPool2D",
    "MaxPool2D",
    "Flatten",
    "Concatenate",
];

/// Reports an unknown `kind` with the offending layer id before typed
/// deserialization would fail with a less specific message.
fn check_kinds(value: &serde_json::Value) -> Result<()> {
    let Some(layers) = value.get("layers").and_then(|l| l.as_array()) else {
        return Ok(());
    };
    for (pos, layer) in layers.iter().enumerate() {
        let id = layer
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("#{pos}"), str::to_owned);
        match layer.get("kind").and_then(|k| k.as_str()) {
            Some(kind) if KNOWN_KINDS.contains(&kind) => {}
            Some(kind) => {
                return Err(Error::UnknownLayerKind {
                    layer: id,
                    kind: kind.to_owned(),
                })
            }
            None => {
                return Err(Error::UnknownLayerKind {
                    layer: id,
                    kind: "<missing>".into(),
                })
            }
        }
    }
    Ok(())
}

impl ModelDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        check_kinds(&value)?;
        let doc: ModelDocument = serde_json::from_value(value)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        Ok(doc)
    }

    /// Structural assembly without shape validation (see [`ModelGraph::assemble`]).
    pub fn assemble(&self) -> Result<ModelGraph> {
        let layers = self
            .layers
            .iter()
            .map(LayerDocument::to_spec)
            .collect::<Result<Vec<_>>>()?;
        ModelGraph::assemble(
            layers,
            self.inputs.clone(),
            self.outputs.clone(),
            self.input_names.clone(),
            self.output_names.clone(),
        )
    }

    pub fn from_graph(graph: &ModelGraph) -> Self {
        ModelDocument {
            format_version: FORMAT_VERSION,
            layers: graph
                .layers()
                .iter()
                .map(LayerDocument::from_spec)
                .collect(),
            inputs: graph.input_ids().into_iter().map(String::from).collect(),
            outputs: graph.output_ids().into_iter().map(String::from).collect(),
            input_names: Some(graph.input_names().to_vec()),
            output_names: Some(graph.output_names().to_vec()),
        }
    }
}

/// Parses and fully validates a model document. Parameters are stored at
/// single precision, the engine default; see [`ModelGraph::with_precision`].
pub fn parse_model(text: &str) -> Result<ModelGraph> {
    parse_model_with_precision(text, Precision::Single)
}

pub fn parse_model_with_precision(text: &str, precision: Precision) -> Result<ModelGraph> {
    let doc = ModelDocument::from_json(text)?;
    let graph = doc.assemble()?;
    if let Some(d) = super::validate_model(&graph)
        .into_iter()
        .find(|d| d.severity == super::Severity::Error)
    {
        return Err(d.into_error());
    }
    Ok(graph.with_precision(precision))
}

/// Canonical serialization: every optional field written explicitly, layers
/// in topological order.
pub fn serialize_model(graph: &ModelGraph) -> String {
    serde_json::to_string_pretty(&ModelDocument::from_graph(graph))
        .expect("model documents always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const LINEAR_UNIT: &str = r#"{
        "format_version": 1,
        "layers": [
            {"kind": "Input", "id": "x", "shape": [1]},
            {"kind": "Dense", "id": "out", "inbound": ["x"], "weight": [[1]], "bias": [-0.25]}
        ],
        "inputs": ["x"],
        "outputs": ["out"]
    }"#;

    #[test]
    fn parses_single_unit_model() {
        let g = parse_model(LINEAR_UNIT).unwrap();
        assert_eq!(g.input_dims(), vec![vec![1]]);
        assert_eq!(g.output_dims(), vec![vec![1]]);
        assert_eq!(g.layer(1).op.activation(), Activation::Linear);
    }

    #[test]
    fn dense_weight_shape_mismatch_names_layer() {
        let text = r#"{"format_version":1,
            "layers":[{"kind":"Input","id":"x","shape":[3]},
                      {"kind":"Dense","id":"d","inbound":["x"],"weight":[[1,2],[3,4],[5,6]]}],
            "inputs":["x"],"outputs":["d"]}"#;
        match parse_model(text) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "d"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn concatenate_width_is_inferred() {
        let text = r#"{"format_version":1,
            "layers":[{"kind":"Input","id":"a","shape":[2]},
                      {"kind":"Input","id":"b","shape":[3]},
                      {"kind":"Concatenate","id":"cat","inbound":["a","b"]},
                      {"kind":"Dense","id":"d","inbound":["cat"],"weight":[[1,1,1,1,1],[0,0,0,0,0]]}],
            "inputs":["a","b"],"outputs":["d"]}"#;
        let g = parse_model(text).unwrap();
        assert_eq!(g.shape(g.index_of("cat").unwrap()), &[5]);
        assert_eq!(g.output_dims(), vec![vec![2]]);
    }

    #[test]
    fn unknown_kind_names_layer() {
        let text = r#"{"format_version":1,"layers":[{"kind":"Input","id":"x","shape":[1]},
            {"kind":"Add","id":"sum","inbound":["x","x"]}],"inputs":["x"],"outputs":["sum"]}"#;
        match parse_model(text) {
            Err(Error::UnknownLayerKind { layer, kind }) => {
                assert_eq!(layer, "sum");
                assert_eq!(kind, "Add");
            }
            other => panic!("expected unknown kind, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = LINEAR_UNIT.replace("\"bias\"", "\"dropout\": 0.5, \"bias\"");
        assert!(matches!(parse_model(&text), Err(Error::Json(_))));
        let text = LINEAR_UNIT.replace(
            "\"format_version\": 1",
            "\"format_version\": 1, \"extra\": 1",
        );
        assert!(matches!(parse_model(&text), Err(Error::Json(_))));
    }

    #[test]
    fn ragged_weight_is_rejected() {
        let text = LINEAR_UNIT.replace("[[1]]", "[[1], [1, 2]]");
        assert!(parse_model(&text).is_err());
    }

    #[test]
    fn serialization_round_trip_is_a_fixed_point() {
        let g = parse_model(LINEAR_UNIT).unwrap();
        let once = serialize_model(&g);
        let g2 = parse_model(&once).unwrap();
        assert_eq!(g, g2);
        assert_eq!(once, serialize_model(&g2));
    }
}
