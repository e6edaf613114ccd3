//! Per-neuron loop implementations. Nothing here calls the tensor kernels or
//! the attribution sweeps.

use crate::attribution::LrpRule;
use crate::error::{Error, Result};
use crate::model::{Activation, LayerOp, ModelGraph};
use crate::tensor::Padding;

/// Values of one instance at every layer, in `f64`.
#[derive(Debug, Clone)]
pub struct NaiveTrace {
    pub z: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// Which side of each ReLU kink the pre-activations are on, and every
    /// max-pooling argmax. Two inputs with the same regime see the same
    /// piecewise-smooth branch of the network. One entry per layer.
    pub regime: Vec<Vec<usize>>,
}

fn activate(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Linear => z.to_vec(),
        Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
        Activation::Sigmoid => z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        Activation::Softmax => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    }
}

fn padding_before(len: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((len - k) / s + 1, 0),
        Padding::Same => {
            let out = len.div_ceil(s);
            let need = ((out - 1) * s + k) as isize - len as isize;
            (out, need.max(0) as usize / 2)
        }
    }
}

/// Forward pass of one instance with plain loops.
pub fn naive_forward(graph: &ModelGraph, inputs: &[&[f64]]) -> Result<NaiveTrace> {
    let n = graph.len();
    let mut t = NaiveTrace {
        z: vec![Vec::new(); n],
        y: vec![Vec::new(); n],
        regime: vec![Vec::new(); n],
    };
    for (k, &li) in graph.input_layers().iter().enumerate() {
        t.y[li] = inputs[k].to_vec();
        t.z[li] = inputs[k].to_vec();
    }
    for i in 0..n {
        if !graph.input_layers().contains(&i) {
            eval_layer(graph, i, &mut t, true);
        }
    }
    Ok(t)
}

/// Re-runs the layers after `layer` with its pre-activation replaced by `z`.
/// Requires a trace from [`naive_forward`] on the same graph.
pub(crate) fn naive_resume(
    graph: &ModelGraph,
    base: &NaiveTrace,
    layer: usize,
    z: Vec<f64>,
) -> NaiveTrace {
    let mut t = base.clone();
    let act = graph.layer(layer).op.activation();
    t.regime[layer] = relu_regime(act, &z);
    t.y[layer] = activate(act, &z);
    t.z[layer] = z;
    for i in layer + 1..graph.len() {
        if !graph.input_layers().contains(&i) {
            eval_layer(graph, i, &mut t, true);
        }
    }
    t
}

/// Pre-activation of `layer` without bias for the input `x`.
pub(crate) fn naive_linear(graph: &ModelGraph, layer: usize, x: &[f64]) -> Vec<f64> {
    let src = graph.inbound(layer)[0];
    let mut t = NaiveTrace {
        z: vec![Vec::new(); graph.len()],
        y: vec![Vec::new(); graph.len()],
        regime: vec![Vec::new(); graph.len()],
    };
    t.y[src] = x.to_vec();
    eval_layer(graph, layer, &mut t, false);
    t.z[layer].clone()
}

fn relu_regime(act: Activation, z: &[f64]) -> Vec<usize> {
    if act == Activation::Relu {
        z.iter().map(|&v| usize::from(v > 0.0)).collect()
    } else {
        Vec::new()
    }
}

fn eval_layer(graph: &ModelGraph, i: usize, t: &mut NaiveTrace, with_bias: bool) {
    let layer = graph.layer(i);
    let src = graph.inbound(i)[0];
    let x = &t.y[src];
    let y = &t.y;
    let in_shape = graph.shape(src);
    let mut regime = Vec::new();
    let bias_of = |b: &Option<crate::tensor::Tensor>, j: usize| {
        if with_bias {
            b.as_ref().map_or(0.0, |b| b.data()[j])
        } else {
            0.0
        }
    };
    let out: Vec<f64> = match &layer.op {
        LayerOp::Input { .. } => unreachable!(),
        LayerOp::Dense { weight, bias, .. } => {
            let (o, inn) = (weight.shape()[0], weight.shape()[1]);
            let w = weight.data();
            (0..o)
                .map(|j| {
                    let mut acc = bias_of(bias, j);
                    for (k, &xv) in x.iter().enumerate().take(inn) {
                        acc += w[j * inn + k] * xv;
                    }
                    acc
                })
                .collect()
        }
        LayerOp::Conv2D {
            kernel,
            bias,
            stride,
            padding,
            ..
        } => {
            let ks = kernel.shape();
            let (oc, ic, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, pt) = padding_before(h, kh, stride.0, *padding);
            let (ow, pl) = padding_before(w, kw, stride.1, *padding);
            let kd = kernel.data();
            let mut out = vec![0.0; oc * oh * ow];
            for o in 0..oc {
                let b = bias_of(bias, o);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for c in 0..ic {
                            for ky in 0..kh {
                                let iy = (oy * stride.0 + ky) as isize - pt as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow =
                                    &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                                let krow = &kd[((o * ic + c) * kh + ky) * kw
                                    ..((o * ic + c) * kh + ky + 1) * kw];
                                for (kx, &kv) in krow.iter().enumerate() {
                                    let ix = (ox * stride.1 + kx) as isize - pl as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += kv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            out
        }
        LayerOp::AvgPool2D { pool, stride } | LayerOp::MaxPool2D { pool, stride } => {
            let is_max = matches!(layer.op, LayerOp::MaxPool2D { .. });
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let oh = (h - pool.0) / stride.0 + 1;
            let ow = (w - pool.1) / stride.1 + 1;
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (f64::NEG_INFINITY, usize::MAX);
                        let mut sum = 0.0;
                        for ky in 0..pool.0 {
                            for kx in 0..pool.1 {
                                let idx = (ch * h + oy * stride.0 + ky) * w + ox * stride.1 + kx;
                                sum += x[idx];
                                if best.1 == usize::MAX || x[idx] > best.0 {
                                    best = (x[idx], idx);
                                }
                            }
                        }
                        if is_max {
                            regime.push(best.1);
                            out.push(best.0);
                        } else {
                            out.push(sum / (pool.0 * pool.1) as f64);
                        }
                    }
                }
            }
            out
        }
        LayerOp::Flatten => x.clone(),
        LayerOp::Concatenate { axis } => {
            let rank = in_shape.len() as isize;
            let ax = if *axis < 0 {
                (rank + axis) as usize
            } else {
                *axis as usize
            };
            let outer: usize = in_shape[..ax].iter().product();
            let inner: usize = in_shape[ax + 1..].iter().product();
            let mut out = Vec::new();
            for o in 0..outer {
                for &j in graph.inbound(i) {
                    let chunk = graph.shape(j)[ax] * inner;
                    out.extend_from_slice(&y[j][o * chunk..(o + 1) * chunk]);
                }
            }
            out
        }
    };
    let act = layer.op.activation();
    regime.extend(relu_regime(act, &out));
    t.regime[i] = regime;
    t.y[i] = activate(act, &out);
    t.z[i] = out;
}

/// LRP on a graph of Dense layers, one instance, one output node, with the
/// same rule for every layer. Starts from the pre-activation of the output
/// when `from_pre_activation`, else from its activated value.
pub fn naive_lrp(
    graph: &ModelGraph,
    x: &[f64],
    output_layer: usize,
    node: usize,
    rule: LrpRule,
    from_pre_activation: bool,
) -> Result<Vec<f64>> {
    for l in graph.layers() {
        if !matches!(l.op, LayerOp::Input { .. } | LayerOp::Dense { .. }) {
            return Err(Error::Unsupported(format!(
                "naive LRP handles Dense layers only, found {}",
                l.kind()
            )));
        }
    }
    if graph.input_layers().len() != 1 {
        return Err(Error::Unsupported(
            "naive LRP handles single-input graphs only".into(),
        ));
    }
    let t = naive_forward(graph, &[x])?;
    let mut rel: Vec<Vec<f64>> = (0..graph.len()).map(|i| vec![0.0; t.y[i].len()]).collect();
    rel[output_layer][node] = if from_pre_activation {
        t.z[output_layer][node]
    } else {
        t.y[output_layer][node]
    };
    for i in (0..=output_layer).rev() {
        let LayerOp::Dense { weight, bias, .. } = &graph.layer(i).op else {
            continue;
        };
        let src = graph.inbound(i)[0];
        let xin = &t.y[src];
        let (o, inn) = (weight.shape()[0], weight.shape()[1]);
        let w = |j: usize, k: usize| weight.data()[j * inn + k];
        let b = |j: usize| bias.as_ref().map_or(0.0, |b| b.data()[j]);
        let mut lower = vec![0.0; inn];
        for j in 0..o {
            let r = rel[i][j];
            let zj = t.z[i][j];
            match rule {
                LrpRule::Simple => {
                    if r == 0.0 {
                        continue;
                    }
                    if zj == 0.0 {
                        return Err(Error::ZeroDenominator {
                            layer: graph.layer(i).id.clone(),
                        });
                    }
                    for k in 0..inn {
                        lower[k] += xin[k] * w(j, k) / zj * r;
                    }
                }
                LrpRule::Epsilon(eps) => {
                    let sign = if zj >= 0.0 { 1.0 } else { -1.0 };
                    for k in 0..inn {
                        lower[k] += xin[k] * w(j, k) / (zj + eps * sign) * r;
                    }
                }
                LrpRule::AlphaBeta(alpha) => {
                    let beta = 1.0 - alpha;
                    let mut zp = b(j).max(0.0);
                    let mut zn = b(j).min(0.0);
                    for k in 0..inn {
                        let c = xin[k] * w(j, k);
                        if c > 0.0 {
                            zp += c;
                        } else {
                            zn += c;
                        }
                    }
                    for k in 0..inn {
                        let c = xin[k] * w(j, k);
                        if c > 0.0 && zp != 0.0 {
                            lower[k] += alpha * c / zp * r;
                        } else if c < 0.0 && zn != 0.0 {
                            lower[k] += beta * c / zn * r;
                        }
                    }
                }
            }
        }
        for (acc, v) in rel[src].iter_mut().zip(lower) {
            *acc += v;
        }
    }
    Ok(rel[graph.input_layers()[0]].clone())
}
