use super::{LayerKind, ModelGraph};
use crate::error::Error;
use crate::model::Activation;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub layer: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn error(layer: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            layer: layer.map(str::to_owned),
            message: message.into(),
        }
    }

    fn warning(layer: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            layer: layer.map(str::to_owned),
            message: message.into(),
        }
    }

    pub(crate) fn into_error(self) -> Error {
        match self.layer {
            Some(layer) => Error::Shape {
                layer,
                message: self.message,
            },
            None => Error::InvalidModel(self.message),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.layer {
            Some(l) => write!(f, "{sev}: layer `{l}`: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

/// Checks shapes, names and layer placement rules.
///
/// | rule                                         | severity |
/// |----------------------------------------------|----------|
/// | parameter or inbound shape mismatch          | error    |
/// | name list does not match an input/output     | error    |
/// | softmax on a layer that is not an output     | warning  |
/// | layer that no output depends on              | warning  |
pub fn validate_model(graph: &ModelGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let shapes = graph.infer_shapes();
    for (i, r) in shapes.iter().enumerate() {
        if let Err(msg) = r {
            let inbound_ok = graph.inbound(i).iter().all(|&j| shapes[j].is_ok());
            if inbound_ok {
                out.push(Diagnostic::error(Some(&graph.layer(i).id), msg.clone()));
            }
        }
    }

    let outputs = graph.output_layers();
    for (i, layer) in graph.layers().iter().enumerate() {
        if layer.op.activation() == Activation::Softmax && !outputs.contains(&i) {
            out.push(Diagnostic::warning(
                Some(&layer.id),
                "softmax is only supported on output layers",
            ));
        }
    }
    let live = graph.reaches_output();
    for (i, layer) in graph.layers().iter().enumerate() {
        if !live[i] && layer.kind() != LayerKind::Input {
            out.push(Diagnostic::warning(
                Some(&layer.id),
                "layer does not contribute to any output",
            ));
        }
    }

    if graph.input_names().len() != graph.input_layers().len() {
        out.push(Diagnostic::error(
            None,
            format!(
                "{} input name lists given for {} input layers",
                graph.input_names().len(),
                graph.input_layers().len()
            ),
        ));
    } else {
        for (names, &idx) in graph.input_names().iter().zip(graph.input_layers()) {
            let Ok(shape) = &shapes[idx] else { continue };
            let id = &graph.layer(idx).id;
            if names.len() != shape.len() {
                out.push(Diagnostic::error(
                    Some(id),
                    format!(
                        "{} axis label lists given for an input of rank {}",
                        names.len(),
                        shape.len()
                    ),
                ));
                continue;
            }
            for (axis, (labels, &n)) in names.iter().zip(shape).enumerate() {
                if labels.len() != n {
                    out.push(Diagnostic::error(
                        Some(id),
                        format!("axis {axis} has {n} entries but {} labels", labels.len()),
                    ));
                }
            }
        }
    }
    if graph.output_names().len() != outputs.len() {
        out.push(Diagnostic::error(
            None,
            format!(
                "{} output name lists given for {} output layers",
                graph.output_names().len(),
                outputs.len()
            ),
        ));
    } else {
        for (labels, &idx) in graph.output_names().iter().zip(outputs) {
            let Ok(shape) = &shapes[idx] else { continue };
            let n: usize = shape.iter().product();
            if labels.len() != n {
                out.push(Diagnostic::error(
                    Some(&graph.layer(idx).id),
                    format!("output has {n} nodes but {} labels", labels.len()),
                ));
            }
        }
    }
    out
}
