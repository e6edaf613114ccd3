use super::linear::{LinearMap, Part};
use super::{
    batched, broadcast_inputs, forward_for, prepare, route_structural, seed, sweep,
    AttributionConfig, Backward, DeepLiftRule, RelevanceResult,
};
use crate::error::{Error, Result};
use crate::forward::ForwardTrace;
use crate::model::{Activation, Dataset, LayerOp, ModelGraph};
use crate::tensor::{PoolGeometry, Tensor};

/// Rescale multiplier Δσ/Δz, falling back to σ′(z) when |Δz| < `tau`.
pub fn multiplier_rescale(act: Activation, z: f64, z_ref: f64, tau: f64) -> f64 {
    let dz = z - z_ref;
    if dz.abs() < tau {
        act.derivative(z)
    } else {
        (act.apply_scalar(z) - act.apply_scalar(z_ref)) / dz
    }
}

/// RevealCancel multipliers `(m⁺, m⁻)` for the positive and negative parts
/// `d_pos`, `d_neg` of the difference-from-reference pre-activation.
///
/// Δy⁺ = ½[σ(z̃+Δ⁺) − σ(z̃)] + ½[σ(z̃+Δ⁻+Δ⁺) − σ(z̃+Δ⁻)], Δy⁻ symmetric,
/// m± = Δy±/Δ±. A part below `tau` uses the limit of that ratio.
pub fn multiplier_reveal_cancel(
    act: Activation,
    z_ref: f64,
    d_pos: f64,
    d_neg: f64,
    tau: f64,
) -> (f64, f64) {
    let s = |v: f64| act.apply_scalar(v);
    let ds = |v: f64| act.derivative(v);
    let m_pos = if d_pos.abs() < tau {
        0.5 * (ds(z_ref) + ds(z_ref + d_neg))
    } else {
        let dy = 0.5 * (s(z_ref + d_pos) - s(z_ref))
            + 0.5 * (s(z_ref + d_neg + d_pos) - s(z_ref + d_neg));
        dy / d_pos
    };
    let m_neg = if d_neg.abs() < tau {
        0.5 * (ds(z_ref) + ds(z_ref + d_pos))
    } else {
        let dy = 0.5 * (s(z_ref + d_neg) - s(z_ref))
            + 0.5 * (s(z_ref + d_pos + d_neg) - s(z_ref + d_pos));
        dy / d_neg
    };
    (m_pos, m_neg)
}

struct DeepLiftStep<'a> {
    graph: &'a ModelGraph,
    trace: &'a ForwardTrace,
    reference: &'a ForwardTrace,
    rule: DeepLiftRule,
    winner_takes_all: bool,
    tau: f64,
}

impl DeepLiftStep<'_> {
    fn reveal_cancel(
        &self,
        idx: usize,
        map: &LinearMap,
        act: Activation,
        m: &Tensor,
    ) -> Result<Tensor> {
        let inb = self.graph.inbound(idx)[0];
        let dx = self.trace.output(inb).sub(self.reference.output(inb))?;
        let dxp = dx.map(|v| if v > 0.0 { v } else { 0.0 });
        let dxn = dx.map(|v| if v < 0.0 { v } else { 0.0 });
        let dpos = map
            .forward(&dxp, Part::Pos)?
            .add(&map.forward(&dxn, Part::Neg)?)?;
        let dneg = map
            .forward(&dxn, Part::Pos)?
            .add(&map.forward(&dxp, Part::Neg)?)?;
        let zr = self.reference.pre_activation(idx);
        let p = m.precision();
        let (mut up, mut un) = (Vec::with_capacity(m.len()), Vec::with_capacity(m.len()));
        for i in 0..m.len() {
            let (mp, mn) = multiplier_reveal_cancel(
                act,
                zr.data()[i],
                dpos.data()[i],
                dneg.data()[i],
                self.tau,
            );
            up.push(m.data()[i] * mp);
            un.push(m.data()[i] * mn);
        }
        let up = Tensor::from_raw(m.shape().to_vec(), up, p);
        let un = Tensor::from_raw(m.shape().to_vec(), un, p);
        // an input term w·Δx lands in Δz⁺ or Δz⁻ by the sign of w·Δx
        let rising = map
            .adjoint(&up, Part::Pos)?
            .add(&map.adjoint(&un, Part::Neg)?)?;
        let falling = map
            .adjoint(&un, Part::Pos)?
            .add(&map.adjoint(&up, Part::Neg)?)?;
        let data = dx
            .data()
            .iter()
            .zip(rising.data().iter().zip(falling.data()))
            .map(|(&d, (&r, &f))| if d < 0.0 { f } else { r })
            .collect();
        Ok(Tensor::from_raw(rising.shape().to_vec(), data, p))
    }

    /// Winner-takes-all max pooling: the multiplier goes to the argmax of
    /// the actual input, scaled so that m·Δx reproduces Δy of the window.
    fn max_pool(
        &self,
        idx: usize,
        pool: (usize, usize),
        stride: (usize, usize),
        m: &Tensor,
    ) -> Result<Tensor> {
        let inb = self.graph.inbound(idx)[0];
        let g = PoolGeometry::new(self.graph.shape(inb), pool, stride)?;
        let argmax = self
            .trace
            .argmax(idx)
            .expect("max pooling records its argmax");
        let (x, xr) = (self.trace.output(inb), self.reference.output(inb));
        let (y, yr) = (self.trace.output(idx), self.reference.output(idx));
        let batch = m.shape()[0];
        let il: usize = g.c * g.in_h * g.in_w;
        let ol: usize = g.c * g.out_h * g.out_w;
        let mut out = vec![0.0; batch * il];
        for b in 0..batch {
            let dx = |i: usize| x.data()[b * il + i] - xr.data()[b * il + i];
            for c in 0..g.c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let o = (c * g.out_h + oy) * g.out_w + ox;
                        let mo = m.data()[b * ol + o];
                        if mo == 0.0 {
                            continue;
                        }
                        let dy = y.data()[b * ol + o] - yr.data()[b * ol + o];
                        let mut target = argmax[b * ol + o];
                        if dx(target).abs() < self.tau {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let i = (c * g.in_h + oy * g.sh + ky) * g.in_w + ox * g.sw + kx;
                                    if dx(i).abs() > dx(target).abs() {
                                        target = i;
                                    }
                                }
                            }
                        }
                        let d = dx(target);
                        let ratio = if d.abs() < self.tau { 1.0 } else { dy / d };
                        out[b * il + target] += mo * ratio;
                    }
                }
            }
        }
        Ok(Tensor::from_raw(
            batched(batch, self.graph.shape(inb)),
            out,
            m.precision(),
        ))
    }
}

impl Backward for DeepLiftStep<'_> {
    fn step(&self, idx: usize, m: Tensor, at_pre: bool) -> Result<Vec<Tensor>> {
        let layer = self.graph.layer(idx);
        let act = layer.op.activation();
        let nonlinear = !at_pre && act != Activation::Linear;
        if nonlinear && act == Activation::Softmax {
            return Err(Error::Unsupported(format!(
                "DeepLift through the softmax of layer `{}`; explain the logits instead",
                layer.id
            )));
        }
        match &layer.op {
            LayerOp::Flatten | LayerOp::Concatenate { .. } => {
                return route_structural(self.graph, idx, m)
            }
            LayerOp::MaxPool2D { pool, stride } if self.winner_takes_all => {
                return Ok(vec![self.max_pool(idx, *pool, *stride, &m)?]);
            }
            _ => {}
        }
        let map = LinearMap::of_layer(self.graph, idx)?.expect("layer has a linear part");
        if !nonlinear {
            return Ok(vec![map.adjoint(&m, Part::All)?]);
        }
        match self.rule {
            DeepLiftRule::Rescale => {
                let z = self.trace.pre_activation(idx);
                let zr = self.reference.pre_activation(idx);
                let data = m
                    .data()
                    .iter()
                    .zip(z.data().iter().zip(zr.data()))
                    .map(|(&u, (&z, &zr))| u * multiplier_rescale(act, z, zr, self.tau))
                    .collect();
                let mz = Tensor::from_raw(m.shape().to_vec(), data, m.precision());
                Ok(vec![map.adjoint(&mz, Part::All)?])
            }
            DeepLiftRule::RevealCancel => Ok(vec![self.reveal_cancel(idx, &map, act, &m)?]),
        }
    }
}

/// DeepLift contributions `m·(x − x̃)` against `config.x_ref` (zeros when absent).
pub fn deeplift(
    graph: &ModelGraph,
    data: &Dataset,
    config: &AttributionConfig,
) -> Result<RelevanceResult> {
    let (graph, data) = prepare(graph, data, config.precision)?;
    let batch = data.batch_size();
    let reference = match &config.x_ref {
        Some(r) => {
            r.check_against(&graph)?;
            broadcast_inputs(r.to_precision(graph.precision()).inputs(), batch)?
        }
        None => data
            .inputs()
            .iter()
            .map(|x| Tensor::zeros(x.shape(), graph.precision()))
            .collect(),
    };
    let trace = forward_for(&graph, data.inputs())?;
    let rtrace = forward_for(&graph, &reference)?;
    let step = DeepLiftStep {
        graph: &graph,
        trace: &trace,
        reference: &rtrace,
        rule: config.deeplift_rule,
        winner_takes_all: config.winner_takes_all,
        tau: graph.precision().rescale_threshold(),
    };
    let ones = vec![1.0; batch];
    let deltas: Vec<Tensor> = data
        .inputs()
        .iter()
        .zip(&reference)
        .map(|(x, r)| x.sub(r))
        .collect::<Result<_>>()?;
    let per_output = config
        .selection
        .entries
        .iter()
        .map(|e| {
            let s = seed(&graph, e.layer, e.node, &ones, graph.precision());
            let mult = sweep(
                &graph,
                &step,
                e.layer,
                s,
                config.selection.use_pre_activation,
            )?;
            mult.iter()
                .zip(&deltas)
                .map(|(m, d)| m.mul(d))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    RelevanceResult::assemble(
        &graph,
        &config.selection,
        per_output,
        data.ids().to_vec(),
        "deeplift".into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_cases() {
        assert_eq!(
            multiplier_rescale(Activation::Linear, 3.0, -1.0, 1e-10),
            1.0
        );
        assert_eq!(multiplier_rescale(Activation::Relu, 2.0, 0.0, 1e-10), 1.0);
        assert_eq!(
            multiplier_rescale(Activation::Tanh, 0.3, 0.3, 1e-10),
            1.0 - 0.3f64.tanh().powi(2)
        );
    }

    #[test]
    fn reveal_cancel_hand_values() {
        let (mp, mn) = multiplier_reveal_cancel(Activation::Relu, 0.0, 1.0, -0.5, 1e-10);
        assert_eq!((mp, mn), (0.75, 0.5));
        assert_eq!(mp * 1.0 + mn * -0.5, 0.5);
    }

    #[test]
    fn reveal_cancel_without_negative_part_is_rescale() {
        let (mp, _) = multiplier_reveal_cancel(Activation::Tanh, 0.2, 0.7, 0.0, 1e-10);
        let rescale = ((0.9f64).tanh() - (0.2f64).tanh()) / 0.7;
        assert!((mp - rescale).abs() < 1e-15);
    }
}
