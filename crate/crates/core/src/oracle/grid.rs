use crate::error::Result;
use crate::model::{serialize_model, Activation, Dataset, LayerOp, LayerSpec, ModelGraph};
use std::path::{Path, PathBuf};
use crate::tensor::{Padding, Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GRID_INSTANCES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridBody {
    /// 10 inputs, 32 hidden units.
    Dense,
    /// 3×10×10 input, five 4×4 filters, then 3×3 average pooling.
    ConvAvgPool,
    /// As [`GridBody::ConvAvgPool`] with 3×3 max pooling.
    ConvMaxPool,
    /// Stride-2 convolution and no pooling.
    ConvStrided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub body: GridBody,
    pub activation: Activation,
    pub bias: bool,
    pub outputs: usize,
}

impl GridSpec {
    pub fn name(&self) -> String {
        let body = match self.body {
            GridBody::Dense => "dense",
            GridBody::ConvAvgPool => "conv_avgpool",
            GridBody::ConvMaxPool => "conv_maxpool",
            GridBody::ConvStrided => "conv_stride2",
        };
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            a => return format!("{body}_{a:?}"),
        };
        format!(
            "{body}_{act}_{}_out{}",
            if self.bias { "bias" } else { "nobias" },
            self.outputs
        )
    }
}

#[derive(Debug, Clone)]
pub struct GridCase {
    pub spec: GridSpec,
    pub name: String,
    pub graph: ModelGraph,
    pub data: Dataset,
}

impl GridCase {
    /// Writes `<name>.model.json` and `<name>.data.json` into `dir` and
    /// returns both paths.
    pub fn write_files(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let model = dir.join(format!("{}.model.json", self.name));
        let data = dir.join(format!("{}.data.json", self.name));
        std::fs::write(&model, serialize_model(&self.graph))?;
        std::fs::write(&data, self.data.to_json())?;
        Ok((model, data))
    }
}

/// The 32 architectures: four bodies × {ReLU, tanh} × {bias, none} × {1, 5}
/// outputs.
pub fn architecture_specs() -> Vec<GridSpec> {
    let mut out = Vec::with_capacity(32);
    for body in [
        GridBody::Dense,
        GridBody::ConvAvgPool,
        GridBody::ConvMaxPool,
        GridBody::ConvStrided,
    ] {
        for activation in [Activation::Relu, Activation::Tanh] {
            for bias in [true, false] {
                for outputs in [1, 5] {
                    out.push(GridSpec {
                        body,
                        activation,
                        bias,
                        outputs,
                    });
                }
            }
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data, Precision::Double).expect("shape matches data")
}

/// Builds one grid model and its data from `rng`. Parameters and inputs
/// are standard normal.
pub fn build_case(spec: GridSpec, rng: &mut ChaCha8Rng) -> GridCase {
    let bias = |rng: &mut ChaCha8Rng, n: usize| spec.bias.then(|| normal(rng, &[n]));
    let act = spec.activation;
    let (layers, input_shape) = match spec.body {
        GridBody::Dense => {
            let w1 = normal(rng, &[32, 10]);
            let b1 = bias(rng, 32);
            let w2 = normal(rng, &[spec.outputs, 32]);
            let b2 = bias(rng, spec.outputs);
            (
                vec![
                    LayerSpec::new("input", &[], LayerOp::Input { shape: vec![10] }),
                    LayerSpec::new(
                        "hidden",
                        &["input"],
                        LayerOp::Dense {
                            weight: w1,
                            bias: b1,
                            activation: act,
                        },
                    ),
                    LayerSpec::new(
                        "output",
                        &["hidden"],
                        LayerOp::Dense {
                            weight: w2,
                            bias: b2,
                            activation: Activation::Linear,
                        },
                    ),
                ],
                vec![10],
            )
        }
        body => {
            let stride = if body == GridBody::ConvStrided {
                (2, 2)
            } else {
                (1, 1)
            };
            let k = normal(rng, &[5, 3, 4, 4]);
            let kb = bias(rng, 5);
            let mut layers = vec![
                LayerSpec::new(
                    "input",
                    &[],
                    LayerOp::Input {
                        shape: vec![3, 10, 10],
                    },
                ),
                LayerSpec::new(
                    "conv",
                    &["input"],
                    LayerOp::Conv2D {
                        kernel: k,
                        bias: kb,
                        stride,
                        padding: Padding::Valid,
                        activation: act,
                    },
                ),
            ];
            let (last, flat) = match body {
                GridBody::ConvAvgPool => {
                    layers.push(LayerSpec::new(
                        "pool",
                        &["conv"],
                        LayerOp::AvgPool2D {
                            pool: (3, 3),
                            stride: (3, 3),
                        },
                    ));
                    ("pool", 5 * 2 * 2)
                }
                GridBody::ConvMaxPool => {
                    layers.push(LayerSpec::new(
                        "pool",
                        &["conv"],
                        LayerOp::MaxPool2D {
                            pool: (3, 3),
                            stride: (3, 3),
                        },
                    ));
                    ("pool", 5 * 2 * 2)
                }
                _ => ("conv", 5 * 4 * 4),
            };
            layers.push(LayerSpec::new("flatten", &[last], LayerOp::Flatten));
            let w = normal(rng, &[spec.outputs, flat]);
            let b = bias(rng, spec.outputs);
            layers.push(LayerSpec::new(
                "output",
                &["flatten"],
                LayerOp::Dense {
                    weight: w,
                    bias: b,
                    activation: Activation::Linear,
                },
            ));
            (layers, vec![3, 10, 10])
        }
    };
    let graph = ModelGraph::new(
        layers,
        vec!["input".into()],
        vec!["output".into()],
        None,
        None,
    )
    .expect("grid models are valid")
    .with_precision(Precision::Double);
    let mut shape = vec![GRID_INSTANCES];
    shape.extend(input_shape);
    let data = Dataset::single(normal(rng, &shape)).expect("non-empty batch");
    GridCase {
        spec,
        name: spec.name(),
        graph,
        data,
    }
}

/// Deterministic grid for one seed. Each architecture draws from its own
/// stream, so a case does not depend on which other cases are built.
pub fn architecture_grid(seed: u64) -> Vec<GridCase> {
    architecture_specs()
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            build_case(spec, &mut rng)
        })
        .collect()
}
