#![allow(dead_code)]

use attrib_core::model::{Activation, Dataset, LayerOp, LayerSpec, ModelGraph};
use attrib_core::tensor::{Precision, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data, Precision::Double).unwrap()
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Chain of Dense layers `widths[0] → widths[1] → …`; hidden layers use
/// `act`, the last one is linear.
pub fn dense_chain(weights: Vec<Tensor>, biases: Vec<Option<Tensor>>, act: Activation) -> ModelGraph {
    let n = weights.len();
    let in_width = weights[0].shape()[1];
    let mut layers = vec![LayerSpec::new("x", &[], LayerOp::Input { shape: vec![in_width] })];
    let mut prev = "x".to_string();
    for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
        let id = format!("d{i}");
        let activation = if i + 1 == n { Activation::Linear } else { act };
        layers.push(LayerSpec::new(&id, &[&prev], LayerOp::Dense { weight: w, bias: b, activation }));
        prev = id;
    }
    ModelGraph::new(layers, vec!["x".into()], vec![prev], None, None)
        .unwrap()
        .with_precision(Precision::Double)
}

pub fn random_dense(rng: &mut ChaCha8Rng, widths: &[usize], bias: bool, act: Activation) -> ModelGraph {
    let weights = widths.windows(2).map(|w| normal(rng, &[w[1], w[0]])).collect();
    let biases = widths.windows(2).map(|w| bias.then(|| normal(rng, &[w[1]]))).collect();
    dense_chain(weights, biases, act)
}

pub fn data(x: Tensor) -> Dataset {
    Dataset::single(x).unwrap()
}
