//! Recording forward pass and output selection.

use crate::error::{Error, Result};
use crate::model::{resolve_axis, Activation, Dataset, LayerOp, ModelGraph};
use crate::tensor::{avgpool2d_with_geometry, maxpool2d_with_geometry};
use crate::tensor::{conv2d_with_geometry, matmul, ConvGeometry, PoolGeometry, Precision, Tensor};

/// What one layer produced during a forward pass. All tensors carry a
/// leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// Pre-activation values; `None` when the layer's activation is linear
    /// (the output is then the pre-activation).
    pre_activation: Option<Tensor>,
    output: Tensor,
    /// Max-pooling argmax map, per instance flat input index.
    argmax: Option<Vec<usize>>,
}

/// Per-layer record of one forward pass, indexed like the graph's layers.
/// A layer's inputs are the outputs of its inbound layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    records: Vec<LayerRecord>,
    batch: usize,
    precision: Precision,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.records[layer].output
    }

    pub fn pre_activation(&self, layer: usize) -> &Tensor {
        let r = &self.records[layer];
        r.pre_activation.as_ref().unwrap_or(&r.output)
    }

    pub fn argmax(&self, layer: usize) -> Option<&[usize]> {
        self.records[layer].argmax.as_deref()
    }

    /// Number of real values held by the trace.
    pub fn stored_values(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.output.len() + r.pre_activation.as_ref().map_or(0, Tensor::len))
            .sum()
    }
}

/// Applies an activation to a batched tensor. Softmax normalizes over each
/// instance's flattened values.
pub fn activate(act: Activation, z: &Tensor) -> Tensor {
    match act {
        Activation::Softmax => {
            let n = z.row_len();
            let mut out = Vec::with_capacity(z.len());
            for row in z.data().chunks(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.into_iter().map(|v| v / s));
            }
            Tensor::from_raw(z.shape().to_vec(), out, z.precision())
        }
        a => z.map(|v| a.apply_scalar(v)),
    }
}

fn with_batch(batch: usize, inner: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(inner);
    s
}

/// Dense layer pre-activation `x · Wᵀ + b` for a `[B, in]` input.
pub(crate) fn dense_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let wt = transpose(weight);
    let z = matmul(x, &wt)?;
    match bias {
        None => Ok(z),
        Some(b) => {
            let n = b.len();
            let p = z.precision();
            let mut z = z;
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = p.round(*v + b.data()[i % n]);
            }
            Ok(z)
        }
    }
}

pub(crate) fn transpose(w: &Tensor) -> Tensor {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = w.data()[i * c + j];
        }
    }
    Tensor::from_raw(vec![c, r], out, w.precision())
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    // axis counts per-instance axes; +1 for the batch axis
    let shape0 = parts[0].shape();
    let outer: usize = shape0[..axis + 1].iter().product();
    let inner: usize = shape0[axis + 2..].iter().product();
    let mut out_shape = shape0.to_vec();
    out_shape[axis + 1] = parts.iter().map(|p| p.shape()[axis + 1]).sum();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis + 1] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let precision = parts
        .iter()
        .fold(Precision::Single, |a, p| a.max(p.precision()));
    Tensor::from_raw(out_shape, data, precision)
}

/// Runs the graph on `batch`, recording every layer.
pub fn forward(graph: &ModelGraph, batch: &Dataset) -> Result<ForwardTrace> {
    forward_inputs(graph, batch.inputs())
}

/// Like [`forward`] but takes the batched input tensors directly.
pub fn forward_inputs(graph: &ModelGraph, inputs: &[Tensor]) -> Result<ForwardTrace> {
    if !graph.shapes_known() {
        return Err(Error::InvalidModel(
            "model has unresolved shapes; run validation".into(),
        ));
    }
    if inputs.len() != graph.input_layers().len() {
        return Err(Error::Data(format!(
            "model has {} inputs but {} tensors were given",
            graph.input_layers().len(),
            inputs.len()
        )));
    }
    let precision = graph.precision();
    let batch = inputs[0].shape()[0];
    let mut records: Vec<Option<LayerRecord>> = vec![None; graph.len()];
    for (k, &li) in graph.input_layers().iter().enumerate() {
        let t = &inputs[k];
        if t.shape() != with_batch(batch, graph.shape(li)) {
            return Err(Error::Data(format!(
                "input `{}` expects shape {:?} per instance (batch {batch}) but got {:?}",
                graph.layer(li).id,
                graph.shape(li),
                t.shape()
            )));
        }
        records[li] = Some(LayerRecord {
            pre_activation: None,
            output: t.to_precision(precision),
            argmax: None,
        });
    }

    for (i, layer) in graph.layers().iter().enumerate() {
        if records[i].is_some() {
            continue;
        }
        let ins: Vec<&Tensor> = graph
            .inbound(i)
            .iter()
            .map(|&j| &records[j].as_ref().unwrap().output)
            .collect();
        let in_shape = |k: usize| graph.shape(graph.inbound(i)[k]);
        let mut argmax = None;
        let z = match &layer.op {
            LayerOp::Input { .. } => unreachable!("inputs are recorded first"),
            LayerOp::Dense { weight, bias, .. } => dense_forward(ins[0], weight, bias.as_ref())?,
            LayerOp::Conv2D {
                kernel,
                bias,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeometry::new(in_shape(0), kernel.shape(), *stride, *padding)?;
                conv2d_with_geometry(
                    ins[0],
                    kernel.data(),
                    bias.as_ref().map(Tensor::data),
                    &g,
                    kernel.precision(),
                )?
            }
            LayerOp::AvgPool2D { pool, stride } => {
                let g = PoolGeometry::new(in_shape(0), *pool, *stride)?;
                avgpool2d_with_geometry(ins[0], &g)?
            }
            LayerOp::MaxPool2D { pool, stride } => {
                let g = PoolGeometry::new(in_shape(0), *pool, *stride)?;
                let (y, idx) = maxpool2d_with_geometry(ins[0], &g)?;
                argmax = Some(idx);
                y
            }
            LayerOp::Flatten => ins[0]
                .clone()
                .into_reshaped(with_batch(batch, graph.shape(i))),
            LayerOp::Concatenate { axis } => {
                let ax = resolve_axis(*axis, in_shape(0).len()).map_err(Error::InvalidModel)?;
                concat(&ins, ax)
            }
        };
        let act = layer.op.activation();
        let record = if act == Activation::Linear {
            LayerRecord {
                pre_activation: None,
                output: z,
                argmax,
            }
        } else {
            let y = activate(act, &z);
            LayerRecord {
                pre_activation: Some(z),
                output: y,
                argmax,
            }
        };
        if !record.output.all_finite()
            || !record
                .pre_activation
                .as_ref()
                .is_none_or(Tensor::all_finite)
        {
            return Err(Error::NonFinite {
                layer: layer.id.clone(),
            });
        }
        records[i] = Some(record);
    }
    Ok(ForwardTrace {
        records: records.into_iter().map(Option::unwrap).collect(),
        batch,
        precision,
    })
}

/// One explained output node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedOutput {
    /// Graph index of the output layer.
    pub layer: usize,
    /// Flat (0-based) node index within that layer's output.
    pub node: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputSelection {
    pub entries: Vec<SelectedOutput>,
    /// Explain pre-activation values (logits) instead of activated outputs.
    pub use_pre_activation: bool,
}

impl OutputSelection {
    /// `nodes` are (output layer id, 0-based node) pairs.
    pub fn new(
        graph: &ModelGraph,
        nodes: &[(&str, usize)],
        use_pre_activation: bool,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Argument("output selection is empty".into()));
        }
        let mut entries = Vec::with_capacity(nodes.len());
        for &(id, node) in nodes {
            let pos = graph
                .output_ids()
                .iter()
                .position(|o| *o == id)
                .ok_or_else(|| Error::Argument(format!("`{id}` is not an output layer")))?;
            let layer = graph.output_layers()[pos];
            let n: usize = graph.shape(layer).iter().product();
            if node >= n {
                return Err(Error::Argument(format!(
                    "output index {} is out of range for `{id}` with {n} nodes",
                    node + 1
                )));
            }
            entries.push(SelectedOutput {
                layer,
                node,
                label: graph.output_names()[pos][node].clone(),
            });
        }
        Ok(OutputSelection {
            entries,
            use_pre_activation,
        })
    }

    /// Every node of the first output layer.
    pub fn first_output(graph: &ModelGraph, use_pre_activation: bool) -> Result<Self> {
        let id = graph.output_ids()[0];
        let n: usize = graph.shape(graph.output_layers()[0]).iter().product();
        let nodes: Vec<(&str, usize)> = (0..n).map(|k| (id, k)).collect();
        Self::new(graph, &nodes, use_pre_activation)
    }

    /// Parses a comma-separated list of 1-based node indices into the first
    /// output layer, or `layer:index` entries for any output layer.
    pub fn parse(graph: &ModelGraph, text: &str, use_pre_activation: bool) -> Result<Self> {
        let first = graph.output_ids()[0];
        let mut nodes = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (layer, idx) = match part.rsplit_once(':') {
                Some((l, i)) => (l, i),
                None => (first, part),
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Argument(format!("invalid output index `{part}`")))?;
            if idx == 0 {
                return Err(Error::Argument("output indices are 1-based".into()));
            }
            let layer = graph
                .output_ids()
                .into_iter()
                .find(|o| *o == layer)
                .ok_or_else(|| Error::Argument(format!("`{layer}` is not an output layer")))?;
            nodes.push((layer, idx - 1));
        }
        Self::new(graph, &nodes, use_pre_activation)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Selected output values, `[batch, n_selected]`.
pub fn select_outputs(trace: &ForwardTrace, selection: &OutputSelection) -> Result<Tensor> {
    let b = trace.batch_size();
    let n = selection.len();
    let mut data = vec![0.0; b * n];
    for (k, e) in selection.entries.iter().enumerate() {
        let t = if selection.use_pre_activation {
            trace.pre_activation(e.layer)
        } else {
            trace.output(e.layer)
        };
        if e.node >= t.row_len() {
            return Err(Error::Argument(format!(
                "output index {} out of range",
                e.node + 1
            )));
        }
        for i in 0..b {
            data[i * n + k] = t.row(i)[e.node];
        }
    }
    Ok(Tensor::from_raw(vec![b, n], data, trace.precision()))
}
