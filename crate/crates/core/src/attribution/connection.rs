use super::linear::{LinearMap, Part};
use super::{route_structural, seed, sweep, Backward, RelevanceResult};
use crate::error::{Error, Result};
use crate::forward::OutputSelection;
use crate::model::{Dataset, LayerOp, ModelGraph};
use crate::tensor::{Precision, Tensor};

struct PathStep<'a> {
    graph: &'a ModelGraph,
}

impl Backward for PathStep<'_> {
    fn step(&self, idx: usize, signal: Tensor, _at_pre: bool) -> Result<Vec<Tensor>> {
        match &self.graph.layer(idx).op {
            LayerOp::Flatten | LayerOp::Concatenate { .. } => {
                route_structural(self.graph, idx, signal)
            }
            _ => {
                // max pooling has no argmax here and uses uniform window weights
                let map = LinearMap::of_layer(self.graph, idx)?.expect("layer has a linear part");
                Ok(vec![map.adjoint(&signal, Part::All)?])
            }
        }
    }
}

/// Sum over all paths of the product of weights, ignoring biases and
/// activations. Without data the result holds one instance, `global`.
/// With data and `times_input` the global map is multiplied by each
/// instance; with data alone it is repeated per instance.
pub fn connection_weights(
    graph: &ModelGraph,
    selection: &OutputSelection,
    times_input: bool,
    data: Option<&Dataset>,
    precision: Option<Precision>,
) -> Result<RelevanceResult> {
    let graph = match precision {
        Some(p) if p != graph.precision() => graph.with_precision(p),
        _ => graph.clone(),
    };
    let step = PathStep { graph: &graph };
    let per_output = selection
        .entries
        .iter()
        .map(|e| {
            let s = seed(&graph, e.layer, e.node, &[1.0], graph.precision());
            sweep(&graph, &step, e.layer, s, true)
        })
        .collect::<Result<Vec<_>>>()?;
    let global = RelevanceResult::assemble(
        &graph,
        selection,
        per_output,
        vec!["global".into()],
        "connection_weights".into(),
    )?;
    match data {
        None if times_input => Err(Error::Argument(
            "the local Connection Weights variant (times input) needs data".into(),
        )),
        None => Ok(global),
        Some(d) => {
            d.check_against(&graph)?;
            let d = d.to_precision(graph.precision());
            let rows = vec![0; d.batch_size()];
            let mut repeated = global.clone();
            repeated.instance_ids = d.ids().to_vec();
            for r in &mut repeated.inputs {
                r.values = r.values.select_rows(&rows);
            }
            if times_input {
                super::times_input(&repeated, &d)
            } else {
                Ok(repeated)
            }
        }
    }
}
