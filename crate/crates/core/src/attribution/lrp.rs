use super::linear::{LinearMap, Part};
use super::{
    forward_for, prepare, route_structural, seed, sweep, AttributionConfig, Backward, LrpRule,
    RelevanceResult,
};
use crate::error::{Error, Result};
use crate::forward::{select_outputs, ForwardTrace};
use crate::model::{Dataset, LayerKind, LayerOp, ModelGraph};
use crate::tensor::{maxpool2d_adjoint, Tensor};

fn positive(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn negative(x: &Tensor) -> Tensor {
    x.map(|v| if v < 0.0 { v } else { 0.0 })
}

/// Relevance message of one linear layer followed by the sum over upper
/// neurons. `z` is the layer's full pre-activation for `x`.
pub(crate) fn message(
    map: &LinearMap,
    x: &Tensor,
    z: &Tensor,
    r: &Tensor,
    rule: LrpRule,
    layer: &str,
) -> Result<Tensor> {
    match rule {
        LrpRule::Simple => {
            if r.data()
                .iter()
                .zip(z.data())
                .any(|(&r, &z)| r != 0.0 && z == 0.0)
            {
                return Err(Error::ZeroDenominator {
                    layer: layer.to_string(),
                });
            }
            let s = r.zip_map(z, |r, z| if r == 0.0 { 0.0 } else { r / z })?;
            x.mul(&map.adjoint(&s, Part::All)?)
        }
        LrpRule::Epsilon(eps) => {
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::Argument(format!(
                    "epsilon must be positive, got {eps}"
                )));
            }
            let s = r.zip_map(z, |r, z| r / (z + if z >= 0.0 { eps } else { -eps }))?;
            x.mul(&map.adjoint(&s, Part::All)?)
        }
        LrpRule::AlphaBeta(alpha) => {
            let beta = 1.0 - alpha;
            let (xp, xn) = (positive(x), negative(x));
            let mut zp = map
                .forward(&xp, Part::Pos)?
                .add(&map.forward(&xn, Part::Neg)?)?;
            map.add_bias(&mut zp, Part::Pos);
            let mut zn = map
                .forward(&xn, Part::Pos)?
                .add(&map.forward(&xp, Part::Neg)?)?;
            map.add_bias(&mut zn, Part::Neg);
            let ratio = |coef: f64| {
                move |r: f64, z: f64| {
                    if z == 0.0 || coef == 0.0 {
                        0.0
                    } else {
                        coef * r / z
                    }
                }
            };
            let sp = r.zip_map(&zp, ratio(alpha))?;
            let sn = r.zip_map(&zn, ratio(beta))?;
            let pos_terms = xp
                .mul(&map.adjoint(&sp, Part::Pos)?)?
                .add(&xn.mul(&map.adjoint(&sp, Part::Neg)?)?)?;
            let neg_terms = xn
                .mul(&map.adjoint(&sn, Part::Pos)?)?
                .add(&xp.mul(&map.adjoint(&sn, Part::Neg)?)?)?;
            pos_terms.add(&neg_terms)
        }
    }
}

/// Simple-rule relevance of the layer input `x` given upper relevance `r`.
pub fn lrp_message_simple(map: &LinearMap, x: &Tensor, r: &Tensor) -> Result<Tensor> {
    message(map, x, &map.pre_activation(x)?, r, LrpRule::Simple, "layer")
}

pub fn lrp_message_epsilon(
    map: &LinearMap,
    x: &Tensor,
    r: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    message(
        map,
        x,
        &map.pre_activation(x)?,
        r,
        LrpRule::Epsilon(epsilon),
        "layer",
    )
}

pub fn lrp_message_alpha_beta(
    map: &LinearMap,
    x: &Tensor,
    r: &Tensor,
    alpha: f64,
) -> Result<Tensor> {
    message(
        map,
        x,
        &map.pre_activation(x)?,
        r,
        LrpRule::AlphaBeta(alpha),
        "layer",
    )
}

struct LrpStep<'a> {
    graph: &'a ModelGraph,
    trace: &'a ForwardTrace,
    config: &'a AttributionConfig,
}

impl Backward for LrpStep<'_> {
    // activations pass relevance through unchanged, so `at_pre` is irrelevant
    fn step(&self, idx: usize, r: Tensor, _at_pre: bool) -> Result<Vec<Tensor>> {
        let layer = self.graph.layer(idx);
        let inb = self.graph.inbound(idx);
        let rule_kind = match &layer.op {
            LayerOp::Flatten | LayerOp::Concatenate { .. } => {
                return route_structural(self.graph, idx, r)
            }
            LayerOp::MaxPool2D { .. } if self.config.winner_takes_all => {
                let argmax = self
                    .trace
                    .argmax(idx)
                    .expect("max pooling records its argmax");
                let shape = self.graph.shape(inb[0]);
                return Ok(vec![maxpool2d_adjoint(&r, argmax, shape)?]);
            }
            LayerOp::MaxPool2D { .. } => LayerKind::AvgPool2D,
            op => op.kind(),
        };
        let map = LinearMap::of_layer(self.graph, idx)?.expect("layer has a linear part");
        let x = self.trace.output(inb[0]);
        let recomputed;
        let z = match &layer.op {
            LayerOp::MaxPool2D { .. } => {
                recomputed = map.pre_activation(x)?;
                &recomputed
            }
            _ => self.trace.pre_activation(idx),
        };
        Ok(vec![message(
            &map,
            x,
            z,
            &r,
            self.config.rule_for(rule_kind),
            &layer.id,
        )?])
    }
}

/// Layer-wise relevance propagation starting from the selected output values.
pub fn lrp(
    graph: &ModelGraph,
    data: &Dataset,
    config: &AttributionConfig,
) -> Result<RelevanceResult> {
    let (graph, data) = prepare(graph, data, config.precision)?;
    let trace = forward_for(&graph, data.inputs())?;
    let start = select_outputs(&trace, &config.selection)?;
    let step = LrpStep {
        graph: &graph,
        trace: &trace,
        config,
    };
    let n = config.selection.len();
    let per_output = config
        .selection
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let values: Vec<f64> = (0..trace.batch_size())
                .map(|b| start.data()[b * n + k])
                .collect();
            let s = seed(&graph, e.layer, e.node, &values, trace.precision());
            sweep(
                &graph,
                &step,
                e.layer,
                s,
                config.selection.use_pre_activation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    RelevanceResult::assemble(
        &graph,
        &config.selection,
        per_output,
        data.ids().to_vec(),
        "lrp".into(),
    )
}
