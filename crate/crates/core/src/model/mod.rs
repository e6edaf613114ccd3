//! The layer graph the engine executes, its JSON file format and validation,
//! and input data ingestion.

mod dataset;
mod format;
mod validate;

pub use dataset::{load_dataset, load_dataset_path, DataFormat, Dataset};
pub use format::{parse_model, parse_model_with_precision, serialize_model, ModelDocument};
pub use validate::{validate_model, Diagnostic, Severity};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Padding, PoolGeometry, Precision, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    /// Elementwise activations; softmax is handled per instance by the caller.
    #[inline]
    pub fn apply_scalar(self, z: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Softmax => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative of an elementwise activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Softmax => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// Layer kinds; also the keys of per-kind rule maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Input,
    Dense,
    Conv2D,
    AvgPool2D,
    MaxPool2D,
    Flatten,
    Concatenate,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Input,
        LayerKind::Dense,
        LayerKind::Conv2D,
        LayerKind::AvgPool2D,
        LayerKind::MaxPool2D,
        LayerKind::Flatten,
        LayerKind::Concatenate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Dense => "Dense",
            LayerKind::Conv2D => "Conv2D",
            LayerKind::AvgPool2D => "AvgPool2D",
            LayerKind::MaxPool2D => "MaxPool2D",
            LayerKind::Flatten => "Flatten",
            LayerKind::Concatenate => "Concatenate",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown layer kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input {
        shape: Vec<usize>,
    },
    /// `weight` is `[out, in]`.
    Dense {
        weight: Tensor,
        bias: Option<Tensor>,
        activation: Activation,
    },
    /// `kernel` is `[out, in, kH, kW]`; cross-correlation.
    Conv2D {
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    AvgPool2D {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool2D {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
    /// `axis` counts per-instance axes; negative values count from the end.
    Concatenate {
        axis: isize,
    },
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Input { .. } => LayerKind::Input,
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv2D { .. } => LayerKind::Conv2D,
            LayerOp::AvgPool2D { .. } => LayerKind::AvgPool2D,
            LayerOp::MaxPool2D { .. } => LayerKind::MaxPool2D,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::Concatenate { .. } => LayerKind::Concatenate,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerOp::Dense { activation, .. } | LayerOp::Conv2D { activation, .. } => *activation,
            _ => Activation::Linear,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            LayerOp::Dense { bias, .. } | LayerOp::Conv2D { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    fn to_precision(&self, p: Precision) -> LayerOp {
        match self {
            LayerOp::Dense {
                weight,
                bias,
                activation,
            } => LayerOp::Dense {
                weight: weight.to_precision(p),
                bias: bias.as_ref().map(|b| b.to_precision(p)),
                activation: *activation,
            },
            LayerOp::Conv2D {
                kernel,
                bias,
                stride,
                padding,
                activation,
            } => LayerOp::Conv2D {
                kernel: kernel.to_precision(p),
                bias: bias.as_ref().map(|b| b.to_precision(p)),
                stride: *stride,
                padding: *padding,
                activation: *activation,
            },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub inbound: Vec<String>,
    pub op: LayerOp,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, inbound: &[&str], op: LayerOp) -> Self {
        LayerSpec {
            id: id.into(),
            inbound: inbound.iter().map(|s| s.to_string()).collect(),
            op,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }
}

/// Axis labels of one input layer: one label list per per-instance axis.
pub type AxisNames = Vec<Vec<String>>;

/// A validated, topologically ordered layer DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    inbound: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    input_names: Vec<AxisNames>,
    output_names: Vec<Vec<String>>,
    /// Per-instance output shape of each layer; `None` where inference failed.
    shapes: Vec<Option<Vec<usize>>>,
    precision: Precision,
}

impl ModelGraph {
    /// Assembles a graph from layers in any order and validates it fully.
    pub fn new(
        layers: Vec<LayerSpec>,
        inputs: Vec<String>,
        outputs: Vec<String>,
        input_names: Option<Vec<AxisNames>>,
        output_names: Option<Vec<Vec<String>>>,
    ) -> Result<Self> {
        let graph = Self::assemble(layers, inputs, outputs, input_names, output_names)?;
        if let Some(d) = validate_model(&graph)
            .into_iter()
            .find(|d| d.severity == Severity::Error)
        {
            return Err(d.into_error());
        }
        Ok(graph)
    }

    /// Structural assembly only: ids, references, arity, acyclicity and
    /// ordering. Shape problems are left for [`validate_model`] to report.
    pub fn assemble(
        layers: Vec<LayerSpec>,
        inputs: Vec<String>,
        outputs: Vec<String>,
        input_names: Option<Vec<AxisNames>>,
        output_names: Option<Vec<Vec<String>>>,
    ) -> Result<Self> {
        let mut position = HashMap::new();
        for (i, l) in layers.iter().enumerate() {
            if position.insert(l.id.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!(
                    "duplicate layer id `{}`",
                    l.id
                )));
            }
        }
        for l in &layers {
            for src in &l.inbound {
                if !position.contains_key(src) {
                    return Err(Error::DanglingReference {
                        layer: l.id.clone(),
                        missing: src.clone(),
                    });
                }
            }
            let n = l.inbound.len();
            let arity_ok = match l.kind() {
                LayerKind::Input => n == 0,
                LayerKind::Concatenate => n >= 2,
                _ => n == 1,
            };
            if !arity_ok {
                let want = match l.kind() {
                    LayerKind::Input => "no inbound layers",
                    LayerKind::Concatenate => "at least two inbound layers",
                    _ => "exactly one inbound layer",
                };
                return Err(Error::InvalidModel(format!(
                    "layer `{}` ({}) needs {want} but has {n}",
                    l.id,
                    l.kind()
                )));
            }
        }
        if inputs.is_empty() {
            return Err(Error::InvalidModel("model declares no inputs".into()));
        }
        if outputs.is_empty() {
            return Err(Error::InvalidModel("model declares no outputs".into()));
        }
        for id in &inputs {
            match position.get(id) {
                None => {
                    return Err(Error::InvalidModel(format!(
                        "declared input `{id}` does not exist"
                    )))
                }
                Some(&i) if layers[i].kind() != LayerKind::Input => {
                    return Err(Error::InvalidModel(format!(
                        "declared input `{id}` is not an Input layer"
                    )))
                }
                _ => {}
            }
        }
        let declared: HashSet<&String> = inputs.iter().collect();
        if declared.len() != inputs.len() {
            return Err(Error::InvalidModel("an input is declared twice".into()));
        }
        for l in &layers {
            if l.kind() == LayerKind::Input && !declared.contains(&l.id) {
                return Err(Error::InvalidModel(format!(
                    "Input layer `{}` is not listed in `inputs`",
                    l.id
                )));
            }
        }
        for id in &outputs {
            if !position.contains_key(id) {
                return Err(Error::InvalidModel(format!(
                    "declared output `{id}` does not exist"
                )));
            }
        }
        if outputs.iter().collect::<HashSet<_>>().len() != outputs.len() {
            return Err(Error::InvalidModel("an output is declared twice".into()));
        }

        let order = topological_order(&layers, &position)?;
        let mut slot = vec![None; layers.len()];
        for (new, &old) in order.iter().enumerate() {
            slot[old] = Some(new);
        }
        let mut by_old: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
        let layers: Vec<LayerSpec> = order
            .iter()
            .map(|&old| by_old[old].take().unwrap())
            .collect();
        let index: HashMap<String, usize> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();
        let inbound: Vec<Vec<usize>> = layers
            .iter()
            .map(|l| l.inbound.iter().map(|s| index[s]).collect())
            .collect();
        let mut consumers = vec![Vec::new(); layers.len()];
        for (i, ins) in inbound.iter().enumerate() {
            for &src in ins {
                consumers[src].push(i);
            }
        }
        let inputs: Vec<usize> = inputs.iter().map(|s| index[s]).collect();
        let outputs: Vec<usize> = outputs.iter().map(|s| index[s]).collect();

        let mut graph = ModelGraph {
            layers,
            inbound,
            consumers,
            index,
            inputs,
            outputs,
            input_names: Vec::new(),
            output_names: Vec::new(),
            shapes: Vec::new(),
            precision: Precision::default(),
        };
        graph.shapes = graph.infer_shapes().into_iter().map(|r| r.ok()).collect();
        graph.input_names = match input_names {
            Some(n) => n,
            None => graph.default_input_names(),
        };
        graph.output_names = match output_names {
            Some(n) => n,
            None => graph.default_output_names(),
        };
        for l in &mut graph.layers {
            l.op = l.op.to_precision(graph.precision);
        }
        Ok(graph)
    }

    /// Shape inference in topological order. Each entry is the layer's output
    /// shape or the reason it could not be computed.
    pub(crate) fn infer_shapes(&self) -> Vec<std::result::Result<Vec<usize>, String>> {
        let mut out: Vec<std::result::Result<Vec<usize>, String>> =
            Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<&Vec<usize>> = match self.inbound[i]
                .iter()
                .map(|&j| out[j].as_ref().map_err(|_| ()))
                .collect::<std::result::Result<Vec<_>, ()>>()
            {
                Ok(v) => v,
                Err(()) => {
                    out.push(Err("an inbound layer has no valid shape".into()));
                    continue;
                }
            };
            out.push(layer_output_shape(&layer.op, &ins));
        }
        out
    }

    fn default_input_names(&self) -> Vec<AxisNames> {
        self.inputs
            .iter()
            .map(|&i| match &self.shapes[i] {
                Some(shape) => default_axis_names(shape),
                None => Vec::new(),
            })
            .collect()
    }

    fn default_output_names(&self) -> Vec<Vec<String>> {
        self.outputs
            .iter()
            .map(|&i| match &self.shapes[i] {
                Some(shape) => (1..=shape.iter().product::<usize>())
                    .map(|k| format!("Y{k}"))
                    .collect(),
                None => Vec::new(),
            })
            .collect()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn inbound(&self, idx: usize) -> &[usize] {
        &self.inbound[idx]
    }

    pub fn consumers(&self, idx: usize) -> &[usize] {
        &self.consumers[idx]
    }

    /// Indices of input layers in declaration order.
    pub fn input_layers(&self) -> &[usize] {
        &self.inputs
    }

    /// Indices of output layers in declaration order.
    pub fn output_layers(&self) -> &[usize] {
        &self.outputs
    }

    pub fn input_ids(&self) -> Vec<&str> {
        self.inputs
            .iter()
            .map(|&i| self.layers[i].id.as_str())
            .collect()
    }

    pub fn output_ids(&self) -> Vec<&str> {
        self.outputs
            .iter()
            .map(|&i| self.layers[i].id.as_str())
            .collect()
    }

    pub fn input_names(&self) -> &[AxisNames] {
        &self.input_names
    }

    pub fn output_names(&self) -> &[Vec<String>] {
        &self.output_names
    }

    /// Per-instance output shape of a layer.
    ///
    /// Panics if shape inference failed for it; graphs built with
    /// [`ModelGraph::new`] or [`parse_model`] always have every shape.
    pub fn shape(&self, idx: usize) -> &[usize] {
        self.shapes[idx]
            .as_deref()
            .expect("layer shape was not inferred")
    }

    pub fn shapes_known(&self) -> bool {
        self.shapes.iter().all(Option::is_some)
    }

    pub fn input_dims(&self) -> Vec<Vec<usize>> {
        self.inputs
            .iter()
            .map(|&i| self.shape(i).to_vec())
            .collect()
    }

    pub fn output_dims(&self) -> Vec<Vec<usize>> {
        self.outputs
            .iter()
            .map(|&i| self.shape(i).to_vec())
            .collect()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Copy of the graph with all parameters rounded to `precision`.
    pub fn with_precision(&self, precision: Precision) -> ModelGraph {
        let mut g = self.clone();
        for l in &mut g.layers {
            l.op = l.op.to_precision(precision);
        }
        g.precision = precision;
        g
    }

    /// Whether every layer on some input→output path can be reached from an output.
    pub(crate) fn reaches_output(&self) -> Vec<bool> {
        let mut live = vec![false; self.layers.len()];
        for &o in &self.outputs {
            live[o] = true;
        }
        for i in (0..self.layers.len()).rev() {
            if live[i] {
                for &j in &self.inbound[i] {
                    live[j] = true;
                }
            }
        }
        live
    }
}

pub(crate) fn default_axis_names(shape: &[usize]) -> AxisNames {
    let prefixes: &[&str] = match shape.len() {
        1 => &["X"],
        2 => &["H", "W"],
        3 => &["C", "H", "W"],
        _ => &[],
    };
    shape
        .iter()
        .enumerate()
        .map(|(axis, &n)| {
            let p = prefixes
                .get(axis)
                .map_or_else(|| format!("D{}_", axis + 1), |s| s.to_string());
            (1..=n).map(|k| format!("{p}{k}")).collect()
        })
        .collect()
}

/// Kahn's algorithm, stable with respect to declaration order.
fn topological_order(
    layers: &[LayerSpec],
    position: &HashMap<String, usize>,
) -> Result<Vec<usize>> {
    let n = layers.len();
    let mut indegree: Vec<usize> = layers.iter().map(|l| l.inbound.len()).collect();
    let mut consumers = vec![Vec::new(); n];
    for (i, l) in layers.iter().enumerate() {
        for src in &l.inbound {
            consumers[position[src]].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Walk inbound edges among the unordered layers until a node repeats.
    let stuck: HashSet<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
    let mut node = *stuck.iter().min().unwrap();
    let mut path = Vec::new();
    let mut seen = HashMap::new();
    loop {
        if let Some(&start) = seen.get(&node) {
            let mut cycle: Vec<String> = path[start..]
                .iter()
                .map(|&i: &usize| layers[i].id.clone())
                .collect();
            cycle.reverse();
            cycle.push(cycle[0].clone());
            return Err(Error::Cycle(cycle));
        }
        seen.insert(node, path.len());
        path.push(node);
        node = layers[node]
            .inbound
            .iter()
            .map(|s| position[s])
            .find(|j| stuck.contains(j))
            .expect("a stuck layer has a stuck predecessor");
    }
}

fn layer_output_shape(
    op: &LayerOp,
    ins: &[&Vec<usize>],
) -> std::result::Result<Vec<usize>, String> {
    let check_bias = |bias: &Option<Tensor>, out: usize| -> std::result::Result<(), String> {
        match bias {
            Some(b) if b.shape() != [out] => Err(format!(
                "bias has shape {:?} but the layer has {out} output features",
                b.shape()
            )),
            _ => Ok(()),
        }
    };
    match op {
        LayerOp::Input { shape } => {
            if shape.is_empty() || shape.contains(&0) {
                Err(format!(
                    "input shape {shape:?} must be non-empty with positive sizes"
                ))
            } else {
                Ok(shape.clone())
            }
        }
        LayerOp::Dense { weight, bias, .. } => {
            let input = ins[0];
            if weight.rank() != 2 {
                return Err(format!(
                    "weight must be [out, in], got {:?}",
                    weight.shape()
                ));
            }
            if input.len() != 1 {
                return Err(format!(
                    "dense layers need a flat input but receive {input:?}"
                ));
            }
            if weight.shape()[1] != input[0] {
                return Err(format!(
                    "weight {:?} expects {} input features but the input has {}",
                    weight.shape(),
                    weight.shape()[1],
                    input[0]
                ));
            }
            check_bias(bias, weight.shape()[0])?;
            Ok(vec![weight.shape()[0]])
        }
        LayerOp::Conv2D {
            kernel,
            bias,
            stride,
            padding,
            ..
        } => {
            let g = ConvGeometry::new(ins[0], kernel.shape(), *stride, *padding)
                .map_err(|e| e.to_string())?;
            check_bias(bias, g.out_c)?;
            Ok(g.output_shape().to_vec())
        }
        LayerOp::AvgPool2D { pool, stride } | LayerOp::MaxPool2D { pool, stride } => {
            let g = PoolGeometry::new(ins[0], *pool, *stride).map_err(|e| e.to_string())?;
            Ok(g.output_shape().to_vec())
        }
        LayerOp::Flatten => Ok(vec![ins[0].iter().product()]),
        LayerOp::Concatenate { axis } => {
            let rank = ins[0].len();
            let ax = resolve_axis(*axis, rank)?;
            let mut out = ins[0].clone();
            for s in &ins[1..] {
                if s.len() != rank {
                    return Err(format!("cannot concatenate shapes {:?} and {s:?}", ins[0]));
                }
                for d in 0..rank {
                    if d != ax && s[d] != out[d] {
                        return Err(format!(
                            "cannot concatenate shapes {:?} and {s:?} along axis {axis}",
                            ins[0]
                        ));
                    }
                }
                out[ax] += s[ax];
            }
            Ok(out)
        }
    }
}

pub(crate) fn resolve_axis(axis: isize, rank: usize) -> std::result::Result<usize, String> {
    let r = rank as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if (0..r).contains(&a) {
        Ok(a as usize)
    } else {
        Err(format!("axis {axis} is out of range for rank {rank}"))
    }
}
