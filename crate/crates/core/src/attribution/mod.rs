//! Attribution methods as modified backward passes over a [`ForwardTrace`].
//!
//! Every method shares one reverse sweep: starting from a selected output
//! node, a per-method signal (gradient, relevance or multiplier) is pushed
//! from each layer to its inbound layers in reverse topological order and
//! accumulated where a layer feeds several consumers. Each selected output
//! gets its own sweep; the results are stacked on the last axis.

mod connection;
mod deeplift;
mod gradient;
mod linear;
mod lrp;

pub use connection::connection_weights;
pub use deeplift::{deeplift, multiplier_rescale, multiplier_reveal_cancel};
pub use gradient::{gradient, smoothgrad, times_input};
pub use linear::{LinearMap, Part};
pub use lrp::{lrp, lrp_message_alpha_beta, lrp_message_epsilon, lrp_message_simple};

use crate::error::{Error, Result};
use crate::forward::{ForwardTrace, OutputSelection};
use crate::model::{resolve_axis, AxisNames, Dataset, LayerKind, LayerOp, ModelGraph};
use crate::tensor::{Precision, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradient,
    SmoothGrad,
    Lrp,
    DeepLift,
    ConnectionWeights,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::SmoothGrad => "smoothgrad",
            Method::Lrp => "lrp",
            Method::DeepLift => "deeplift",
            Method::ConnectionWeights => "connection_weights",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gradient" | "grad" => Ok(Method::Gradient),
            "smoothgrad" => Ok(Method::SmoothGrad),
            "lrp" => Ok(Method::Lrp),
            "deeplift" => Ok(Method::DeepLift),
            "connection_weights" | "connectionweights" | "cw" => Ok(Method::ConnectionWeights),
            _ => Err(Error::Argument(format!("unknown method `{s}`"))),
        }
    }
}

/// LRP rule for one layer kind. The alpha-beta rule stores α; β = 1 − α.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrpRule {
    Simple,
    Epsilon(f64),
    AlphaBeta(f64),
}

impl LrpRule {
    /// Builds a rule from its name and optional parameter.
    pub fn from_name(name: &str, param: Option<f64>) -> Result<Self> {
        let rule = match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "simple" => LrpRule::Simple,
            "epsilon" => LrpRule::Epsilon(param.unwrap_or(DEFAULT_EPSILON)),
            "alpha_beta" | "alphabeta" => LrpRule::AlphaBeta(param.unwrap_or(DEFAULT_ALPHA)),
            _ => return Err(Error::Argument(format!("unknown LRP rule `{name}`"))),
        };
        rule.check()?;
        Ok(rule)
    }

    pub fn check(self) -> Result<()> {
        match self {
            LrpRule::Epsilon(e) if !(e > 0.0 && e.is_finite()) => Err(Error::Argument(format!(
                "epsilon must be positive, got {e}"
            ))),
            LrpRule::AlphaBeta(a) if !a.is_finite() => {
                Err(Error::Argument(format!("alpha must be finite, got {a}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LrpRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrpRule::Simple => write!(f, "simple"),
            LrpRule::Epsilon(e) => write!(f, "epsilon({e})"),
            LrpRule::AlphaBeta(a) => write!(f, "alpha_beta({a})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepLiftRule {
    #[default]
    Rescale,
    RevealCancel,
}

impl FromStr for DeepLiftRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rescale" => Ok(DeepLiftRule::Rescale),
            "reveal_cancel" | "revealcancel" => Ok(DeepLiftRule::RevealCancel),
            _ => Err(Error::Argument(format!("unknown DeepLift rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttributionConfig {
    pub method: Method,
    pub times_input: bool,
    /// SmoothGrad sample count.
    pub n: usize,
    /// SmoothGrad noise level λ; σ = λ·(max − min) of each input over the batch.
    pub noise_level: f64,
    pub seed: u64,
    /// LRP rule per layer kind; unmapped kinds use the simple rule.
    pub rules: BTreeMap<LayerKind, LrpRule>,
    pub deeplift_rule: DeepLiftRule,
    /// DeepLift reference; zeros when absent. Batch 1 is broadcast.
    pub x_ref: Option<Dataset>,
    pub winner_takes_all: bool,
    pub selection: OutputSelection,
    /// Overrides the model's precision when set.
    pub precision: Option<Precision>,
}

impl AttributionConfig {
    pub fn new(method: Method, selection: OutputSelection) -> Self {
        AttributionConfig {
            method,
            times_input: false,
            n: 50,
            noise_level: 0.1,
            seed: 42,
            rules: BTreeMap::new(),
            deeplift_rule: DeepLiftRule::Rescale,
            x_ref: None,
            winner_takes_all: true,
            selection,
            precision: None,
        }
    }

    pub fn rule_for(&self, kind: LayerKind) -> LrpRule {
        self.rules.get(&kind).copied().unwrap_or(LrpRule::Simple)
    }

    pub fn with_rule(mut self, kind: LayerKind, rule: LrpRule) -> Self {
        self.rules.insert(kind, rule);
        self
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Argument(
                "SmoothGrad needs at least one sample".into(),
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Argument(format!(
                "noise level must be non-negative, got {}",
                self.noise_level
            )));
        }
        for rule in self.rules.values() {
            rule.check()?;
        }
        if self.selection.is_empty() {
            return Err(Error::Argument("output selection is empty".into()));
        }
        Ok(())
    }

    fn describe(&self) -> String {
        let mut s = self.method.name().to_string();
        match self.method {
            Method::SmoothGrad => {
                s += &format!(
                    "(n={}, noise_level={}, seed={})",
                    self.n, self.noise_level, self.seed
                )
            }
            Method::Lrp => {
                let rules: Vec<String> =
                    self.rules.iter().map(|(k, r)| format!("{k}={r}")).collect();
                s += &format!(
                    "({}; winner_takes_all={})",
                    rules.join(", "),
                    self.winner_takes_all
                );
            }
            Method::DeepLift => {
                s += &format!(
                    "({:?}; winner_takes_all={})",
                    self.deeplift_rule, self.winner_takes_all
                )
            }
            _ => {}
        }
        if self.times_input {
            s += " x input";
        }
        s
    }
}

/// Relevances of one input layer, `[batch, input shape..., n_selected]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputRelevance {
    pub layer_id: String,
    pub axis_names: AxisNames,
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLabel {
    pub layer_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceResult {
    pub inputs: Vec<InputRelevance>,
    pub instance_ids: Vec<String>,
    pub outputs: Vec<OutputLabel>,
    pub method: String,
}

impl RelevanceResult {
    pub fn batch_size(&self) -> usize {
        self.instance_ids.len()
    }

    /// Sum over all inputs of instance `b` for selected output `k`.
    pub fn total(&self, b: usize, k: usize) -> f64 {
        let n = self.outputs.len();
        self.inputs
            .iter()
            .map(|r| r.values.row(b).iter().skip(k).step_by(n).sum::<f64>())
            .sum()
    }

    pub(crate) fn assemble(
        graph: &ModelGraph,
        selection: &OutputSelection,
        per_output: Vec<Vec<Tensor>>,
        instance_ids: Vec<String>,
        method: String,
    ) -> Result<Self> {
        let inputs = graph
            .input_layers()
            .iter()
            .enumerate()
            .map(|(k, &li)| {
                let parts: Vec<&Tensor> = per_output.iter().map(|p| &p[k]).collect();
                Ok(InputRelevance {
                    layer_id: graph.layer(li).id.clone(),
                    axis_names: graph.input_names()[k].clone(),
                    values: stack_last(&parts)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = selection
            .entries
            .iter()
            .map(|e| OutputLabel {
                layer_id: graph.layer(e.layer).id.clone(),
                label: e.label.clone(),
            })
            .collect();
        Ok(RelevanceResult {
            inputs,
            instance_ids,
            outputs,
            method,
        })
    }
}

/// Stacks equally-shaped tensors along a new trailing axis.
pub(crate) fn stack_last(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("nothing to stack"))?;
    let n = parts.len();
    let mut data = vec![0.0; first.len() * n];
    for (k, p) in parts.iter().enumerate() {
        if p.shape() != first.shape() {
            return Err(Error::dim(format!(
                "cannot stack {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
        for (i, &v) in p.data().iter().enumerate() {
            data[i * n + k] = v;
        }
    }
    let mut shape = first.shape().to_vec();
    shape.push(n);
    Tensor::new(shape, data, first.precision())
}

pub(crate) fn batched(batch: usize, inner: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(inner.len() + 1);
    s.push(batch);
    s.extend_from_slice(inner);
    s
}

/// Per-layer step of a reverse sweep.
pub(crate) trait Backward {
    /// Maps the signal at layer `idx` to one signal per inbound layer.
    /// `at_pre` marks a signal that already refers to the pre-activation.
    fn step(&self, idx: usize, signal: Tensor, at_pre: bool) -> Result<Vec<Tensor>>;
}

/// Runs one sweep from `start` and returns the signal reaching every input
/// layer (zeros for inputs the start layer does not depend on).
pub(crate) fn sweep(
    graph: &ModelGraph,
    method: &impl Backward,
    start: usize,
    seed: Tensor,
    seed_at_pre: bool,
) -> Result<Vec<Tensor>> {
    let batch = seed.shape()[0];
    let precision = seed.precision();
    let mut signals: Vec<Option<Tensor>> = vec![None; graph.len()];
    signals[start] = Some(seed);
    for idx in (0..=start).rev() {
        if graph.layer(idx).kind() == LayerKind::Input {
            continue;
        }
        let Some(signal) = signals[idx].take() else {
            continue;
        };
        let lower = method.step(idx, signal, idx == start && seed_at_pre)?;
        for (&j, t) in graph.inbound(idx).iter().zip(lower) {
            match &mut signals[j] {
                Some(acc) => acc.add_assign(&t)?,
                slot => *slot = Some(t),
            }
        }
    }
    Ok(graph
        .input_layers()
        .iter()
        .map(|&li| {
            signals[li]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&batched(batch, graph.shape(li)), precision))
        })
        .collect())
}

/// Seed for a sweep from output `node` of `layer`: `values[b]` at the node of
/// instance `b`, zero elsewhere.
pub(crate) fn seed(
    graph: &ModelGraph,
    layer: usize,
    node: usize,
    values: &[f64],
    precision: Precision,
) -> Tensor {
    let shape = batched(values.len(), graph.shape(layer));
    let n: usize = graph.shape(layer).iter().product();
    let mut data = vec![0.0; values.len() * n];
    for (b, &v) in values.iter().enumerate() {
        data[b * n + node] = v;
    }
    Tensor::from_raw(shape, data, precision)
}

/// Backward routing for the layers that only move values around.
pub(crate) fn route_structural(
    graph: &ModelGraph,
    idx: usize,
    signal: Tensor,
) -> Result<Vec<Tensor>> {
    let batch = signal.shape()[0];
    match &graph.layer(idx).op {
        LayerOp::Flatten => {
            let inb = graph.inbound(idx)[0];
            Ok(vec![signal.into_reshaped(batched(batch, graph.shape(inb)))])
        }
        LayerOp::Concatenate { axis } => {
            let shapes: Vec<&[usize]> =
                graph.inbound(idx).iter().map(|&j| graph.shape(j)).collect();
            let ax = resolve_axis(*axis, shapes[0].len()).map_err(Error::InvalidModel)?;
            let inner: usize = shapes[0][ax + 1..].iter().product();
            let outer: usize = batch * shapes[0][..ax].iter().product::<usize>();
            let total: usize = shapes.iter().map(|s| s[ax]).sum::<usize>() * inner;
            let mut parts: Vec<Vec<f64>> = shapes
                .iter()
                .map(|s| Vec::with_capacity(outer * s[ax] * inner))
                .collect();
            for o in 0..outer {
                let mut off = o * total;
                for (k, s) in shapes.iter().enumerate() {
                    let len = s[ax] * inner;
                    parts[k].extend_from_slice(&signal.data()[off..off + len]);
                    off += len;
                }
            }
            Ok(parts
                .into_iter()
                .zip(shapes)
                .map(|(d, s)| Tensor::from_raw(batched(batch, s), d, signal.precision()))
                .collect())
        }
        op => Err(Error::Unsupported(format!(
            "no structural routing for {}",
            op.kind()
        ))),
    }
}

/// Broadcasts a batch-1 dataset to `batch` rows, or checks batch sizes agree.
pub(crate) fn broadcast_inputs(reference: &[Tensor], batch: usize) -> Result<Vec<Tensor>> {
    reference
        .iter()
        .map(|t| {
            let b = t.shape()[0];
            if b == batch {
                Ok(t.clone())
            } else if b == 1 {
                Ok(t.select_rows(&vec![0; batch]))
            } else {
                Err(Error::Data(format!(
                    "reference has {b} instances but the data has {batch}"
                )))
            }
        })
        .collect()
}

/// Prepares graph and data for an attribution call.
pub(crate) fn prepare(
    graph: &ModelGraph,
    data: &Dataset,
    precision: Option<Precision>,
) -> Result<(ModelGraph, Dataset)> {
    let g = match precision {
        Some(p) if p != graph.precision() => graph.with_precision(p),
        _ => graph.clone(),
    };
    data.check_against(&g)?;
    let d = data.to_precision(g.precision());
    Ok((g, d))
}

/// Runs the method selected in `config`. `data` is optional only for the
/// global Connection Weights variant.
pub fn attribute(
    graph: &ModelGraph,
    data: Option<&Dataset>,
    config: &AttributionConfig,
) -> Result<RelevanceResult> {
    config.check()?;
    let need =
        || data.ok_or_else(|| Error::Argument(format!("{} needs data", config.method.name())));
    let mut result = match config.method {
        Method::Gradient => {
            let r = gradient(graph, need()?, &config.selection, config.precision)?;
            if config.times_input {
                times_input(&r, need()?)?
            } else {
                r
            }
        }
        Method::SmoothGrad => smoothgrad(graph, need()?, config)?,
        Method::Lrp => lrp(graph, need()?, config)?,
        Method::DeepLift => deeplift(graph, need()?, config)?,
        Method::ConnectionWeights => connection_weights(
            graph,
            &config.selection,
            config.times_input,
            data,
            config.precision,
        )?,
    };
    result.method = config.describe();
    Ok(result)
}

pub(crate) fn forward_for(graph: &ModelGraph, inputs: &[Tensor]) -> Result<ForwardTrace> {
    crate::forward::forward_inputs(graph, inputs)
}
