use super::linear::{LinearMap, Part};
use super::{
    forward_for, prepare, route_structural, seed, sweep, AttributionConfig, Backward,
    RelevanceResult,
};
use crate::error::{Error, Result};
use crate::forward::{ForwardTrace, OutputSelection};
use crate::model::{Activation, Dataset, LayerOp, ModelGraph};
use crate::tensor::{maxpool2d_adjoint, Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) struct GradientStep<'a> {
    pub graph: &'a ModelGraph,
    pub trace: &'a ForwardTrace,
}

/// Vector-Jacobian product of a per-instance softmax with output `s`.
pub(crate) fn softmax_vjp(s: &Tensor, g: &Tensor) -> Tensor {
    let n = s.row_len();
    let mut out = Vec::with_capacity(s.len());
    for (sr, gr) in s.data().chunks(n).zip(g.data().chunks(n)) {
        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(sr.iter().zip(gr).map(|(a, b)| a * (b - dot)));
    }
    Tensor::from_raw(s.shape().to_vec(), out, s.precision())
}

impl Backward for GradientStep<'_> {
    fn step(&self, idx: usize, signal: Tensor, at_pre: bool) -> Result<Vec<Tensor>> {
        let layer = self.graph.layer(idx);
        let act = layer.op.activation();
        let g = if at_pre || act == Activation::Linear {
            signal
        } else if act == Activation::Softmax {
            softmax_vjp(self.trace.output(idx), &signal)
        } else {
            signal.zip_map(self.trace.pre_activation(idx), |u, z| u * act.derivative(z))?
        };
        match &layer.op {
            LayerOp::MaxPool2D { .. } => {
                let inb = self.graph.inbound(idx)[0];
                let argmax = self
                    .trace
                    .argmax(idx)
                    .expect("max pooling records its argmax");
                Ok(vec![maxpool2d_adjoint(&g, argmax, self.graph.shape(inb))?])
            }
            LayerOp::Flatten | LayerOp::Concatenate { .. } => route_structural(self.graph, idx, g),
            _ => {
                let map = LinearMap::of_layer(self.graph, idx)?.expect("layer has a linear part");
                Ok(vec![map.adjoint(&g, Part::All)?])
            }
        }
    }
}

/// Gradients for every selected output: one sweep per output.
pub(crate) fn gradients_of_trace(
    graph: &ModelGraph,
    trace: &ForwardTrace,
    selection: &OutputSelection,
) -> Result<Vec<Vec<Tensor>>> {
    let step = GradientStep { graph, trace };
    let ones = vec![1.0; trace.batch_size()];
    selection
        .entries
        .iter()
        .map(|e| {
            let s = seed(graph, e.layer, e.node, &ones, trace.precision());
            sweep(graph, &step, e.layer, s, selection.use_pre_activation)
        })
        .collect()
}

/// Derivative of each selected output with respect to every input entry.
pub fn gradient(
    graph: &ModelGraph,
    data: &Dataset,
    selection: &OutputSelection,
    precision: Option<Precision>,
) -> Result<RelevanceResult> {
    let (graph, data) = prepare(graph, data, precision)?;
    let trace = forward_for(&graph, data.inputs())?;
    let per_output = gradients_of_trace(&graph, &trace, selection)?;
    RelevanceResult::assemble(
        &graph,
        selection,
        per_output,
        data.ids().to_vec(),
        "gradient".into(),
    )
}

/// Multiplies a result elementwise by the inputs it was computed for.
pub fn times_input(result: &RelevanceResult, data: &Dataset) -> Result<RelevanceResult> {
    if data.inputs().len() != result.inputs.len() || data.batch_size() != result.batch_size() {
        return Err(Error::dim("data does not match the result's inputs"));
    }
    let n = result.outputs.len();
    let mut out = result.clone();
    for (r, x) in out.inputs.iter_mut().zip(data.inputs()) {
        if r.values.len() != x.len() * n {
            return Err(Error::dim(format!(
                "relevance {:?} does not match input {:?}",
                r.values.shape(),
                x.shape()
            )));
        }
        let p = r.values.precision();
        for (i, v) in r.values.data_mut().iter_mut().enumerate() {
            *v = p.round(*v * x.data()[i / n]);
        }
    }
    Ok(out)
}

/// Per-input noise scale λ·(max − min) over the whole batch.
fn noise_scale(x: &Tensor, lambda: f64) -> f64 {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    lambda * (hi - lo)
}

/// Mean gradient over `config.n` Gaussian perturbations of the inputs. With
/// `times_input`, each sample's gradient is multiplied by its own perturbed
/// input before averaging.
pub fn smoothgrad(
    graph: &ModelGraph,
    data: &Dataset,
    config: &AttributionConfig,
) -> Result<RelevanceResult> {
    let (graph, data) = prepare(graph, data, config.precision)?;
    let p = graph.precision();
    let sigmas: Vec<f64> = data
        .inputs()
        .iter()
        .map(|x| noise_scale(x, config.noise_level))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_sel = config.selection.len();
    let mut mean: Vec<Vec<Vec<f64>>> =
        vec![data.inputs().iter().map(|x| vec![0.0; x.len()]).collect(); n_sel];
    for k in 1..=config.n {
        let noisy: Vec<Tensor> = data
            .inputs()
            .iter()
            .zip(&sigmas)
            .map(|(x, &s)| {
                let d = x
                    .data()
                    .iter()
                    .map(|&v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v + s * e
                    })
                    .collect();
                Tensor::from_raw(x.shape().to_vec(), d, p)
            })
            .collect();
        let trace = forward_for(&graph, &noisy)?;
        let grads = gradients_of_trace(&graph, &trace, &config.selection)?;
        let kf = k as f64;
        for (acc_o, g_o) in mean.iter_mut().zip(&grads) {
            for ((acc, g), x) in acc_o.iter_mut().zip(g_o).zip(&noisy) {
                for ((m, &gv), &xv) in acc.iter_mut().zip(g.data()).zip(x.data()) {
                    let v = if config.times_input {
                        p.round(gv * xv)
                    } else {
                        gv
                    };
                    *m = p.round(*m + (v - *m) / kf);
                }
            }
        }
    }
    let per_output: Vec<Vec<Tensor>> = mean
        .into_iter()
        .map(|o| {
            o.into_iter()
                .zip(data.inputs())
                .map(|(d, x)| Tensor::from_raw(x.shape().to_vec(), d, p))
                .collect()
        })
        .collect();
    RelevanceResult::assemble(
        &graph,
        &config.selection,
        per_output,
        data.ids().to_vec(),
        "smoothgrad".into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;

    fn tanh_unit() -> ModelGraph {
        ModelGraph::new(
            vec![
                LayerSpec::new("x", &[], LayerOp::Input { shape: vec![1] }),
                LayerSpec::new(
                    "y",
                    &["x"],
                    LayerOp::Dense {
                        weight: Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap(),
                        bias: None,
                        activation: Activation::Tanh,
                    },
                ),
            ],
            vec!["x".into()],
            vec!["y".into()],
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn tanh_unit_at_zero() {
        let g = tanh_unit();
        let sel = OutputSelection::first_output(&g, false).unwrap();
        let d = Dataset::single(Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let r = gradient(&g, &d, &sel, None).unwrap();
        assert_eq!(r.inputs[0].values.data(), &[1.0]);
    }

    #[test]
    fn softmax_vjp_rows_sum_to_zero() {
        let s = Tensor::from_vec(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let g = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let v = softmax_vjp(&s, &g);
        assert!(v.sum().abs() < 1e-15);
        assert!((v.data()[0] - 0.2 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn noise_scale_uses_global_range() {
        let x = Tensor::from_vec(vec![2, 2], vec![-1.0, 0.0, 3.0, 1.0]).unwrap();
        assert_eq!(noise_scale(&x, 0.1), 0.4);
    }
}
