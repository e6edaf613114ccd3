mod common;

use attrib_core::attribution::{
    attribute, connection_weights, deeplift, gradient, lrp, smoothgrad, times_input, AttributionConfig,
    DeepLiftRule, LrpRule, Method,
};
use attrib_core::forward::OutputSelection;
use attrib_core::model::{parse_model, Activation, Dataset, LayerKind, LayerOp, LayerSpec, ModelGraph};
use attrib_core::oracle::{finite_diff_gradient, naive_forward, naive_lrp};
use attrib_core::tensor::{Precision, Tensor};
use attrib_core::Error;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn unit_bias() -> ModelGraph {
    parse_model(include_str!("fixtures/unit_bias.json")).unwrap()
}

fn logits(g: &ModelGraph) -> OutputSelection {
    OutputSelection::first_output(g, true).unwrap()
}

fn scalar(v: f64) -> Dataset {
    data(tensor(&[1, 1], vec![v]))
}

#[test]
fn epsilon_rule_on_unit_model() {
    let g = unit_bias();
    let cfg = AttributionConfig::new(Method::Lrp, logits(&g)).with_rule(LayerKind::Dense, LrpRule::Epsilon(0.01));
    let r = lrp(&g, &scalar(1.0), &cfg).unwrap();
    assert!((r.inputs[0].values.data()[0] - 0.75 / 0.76).abs() < 1e-6);
}

#[test]
fn loop_oracle_reproduces_unit_model() {
    let g = unit_bias().with_precision(Precision::Double);
    let out = g.output_layers()[0];
    assert_eq!(naive_lrp(&g, &[1.0], out, 0, LrpRule::AlphaBeta(1.0), true).unwrap(), vec![0.75]);
    assert_eq!(naive_lrp(&g, &[1.0], out, 0, LrpRule::AlphaBeta(2.0), true).unwrap(), vec![1.5]);
}

#[test]
fn loop_oracle_conserves_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_dense(&mut rng, &[6, 9, 7, 2], false, Activation::Relu);
    let out = g.output_layers()[0];
    for _ in 0..20 {
        let x: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = naive_forward(&g, &[&x]).unwrap();
        for node in 0..2 {
            let r = naive_lrp(&g, &x, out, node, LrpRule::Simple, true).unwrap();
            let total: f64 = r.iter().sum();
            assert!((total - t.z[out][node]).abs() <= 1e-12 * t.z[out][node].abs().max(1.0));
        }
    }
}

#[test]
fn identity_gradient_is_one_hot() {
    let g = dense_chain(vec![tensor(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])], vec![None], Activation::Linear);
    let sel = OutputSelection::parse(&g, "2", true).unwrap();
    let r = gradient(&g, &data(tensor(&[1, 3], vec![4.0, -2.0, 7.0])), &sel, None).unwrap();
    assert_eq!(r.inputs[0].values.shape(), &[1, 3, 1]);
    assert_eq!(r.inputs[0].values.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn finite_differences_exact_on_affine_models() {
    let w = tensor(&[2, 3], vec![0.5, -1.25, 2.0, 3.0, 0.25, -0.75]);
    let g = dense_chain(vec![w.clone()], vec![Some(tensor(&[2], vec![0.1, -0.3]))], Activation::Linear);
    let x = data(tensor(&[1, 3], vec![0.3, -0.2, 1.7]));
    for h in [1e-1, 1e-3] {
        let fd = finite_diff_gradient(&g, &x, &logits(&g), h).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert!((fd[0].data()[i * 2 + c] - w.data()[c * 3 + i]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn finite_differences_on_tanh_unit() {
    let g = ModelGraph::new(
        vec![
            LayerSpec::new("x", &[], LayerOp::Input { shape: vec![1] }),
            LayerSpec::new(
                "y",
                &["x"],
                LayerOp::Dense { weight: tensor(&[1, 1], vec![1.0]), bias: None, activation: Activation::Tanh },
            ),
        ],
        vec!["x".into()],
        vec!["y".into()],
        None,
        None,
    )
    .unwrap();
    let sel = OutputSelection::first_output(&g, false).unwrap();
    let fd = finite_diff_gradient(&g, &scalar(0.0), &sel, 1e-3).unwrap();
    assert!((fd[0].data()[0] - 1.0).abs() < 1e-6);
}

#[test]
fn gradient_times_input_decomposes_linear_models() {
    let w = tensor(&[1, 4], vec![0.5, -2.0, 1.5, 0.25]);
    let g = dense_chain(vec![w.clone()], vec![None], Activation::Linear);
    let x = data(tensor(&[2, 4], vec![1.0, 2.0, -3.0, 4.0, 0.0, 0.0, 0.0, 0.0]));
    let r = times_input(&gradient(&g, &x, &logits(&g), None).unwrap(), &x).unwrap();
    let y: f64 = (0..4).map(|i| w.data()[i] * x.inputs()[0].data()[i]).sum();
    assert_eq!(r.total(0, 0), y);
    assert!(r.inputs[0].values.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn smoothgrad_on_affine_models_is_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_dense(&mut rng, &[5, 8, 3], true, Activation::Linear);
    let x = data(normal(&mut rng, &[6, 5]));
    let sel = logits(&g);
    let plain = gradient(&g, &x, &sel, None).unwrap();
    for (n, noise, seed) in [(1, 0.5, 1), (13, 0.1, 2), (40, 2.0, 3)] {
        let mut cfg = AttributionConfig::new(Method::SmoothGrad, sel.clone());
        (cfg.n, cfg.noise_level, cfg.seed) = (n, noise, seed);
        let s = smoothgrad(&g, &x, &cfg).unwrap();
        assert!(s.inputs[0].values.max_abs_diff(&plain.inputs[0].values).unwrap() < 1e-12);
    }
}

/// d tanh(w·x + b)/dx for one hidden tanh layer and a linear read-out.
fn tanh_net_gradient(w1: &Tensor, b1: &Tensor, w2: &Tensor, x: &[f64]) -> Vec<f64> {
    let (h, d) = (w1.shape()[0], w1.shape()[1]);
    let mut g = vec![0.0; d];
    for j in 0..h {
        let z: f64 = b1.data()[j] + (0..d).map(|i| w1.data()[j * d + i] * x[i]).sum::<f64>();
        let s = 1.0 - z.tanh().powi(2);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += w2.data()[j] * s * w1.data()[j * d + i];
        }
    }
    g
}

#[test]
fn smoothgrad_matches_large_sample_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (w1, b1, w2) = (normal(&mut rng, &[6, 3]), normal(&mut rng, &[6]), normal(&mut rng, &[1, 6]));
    let g = dense_chain(vec![w1.clone(), w2.clone()], vec![Some(b1.clone()), None], Activation::Tanh);
    // graph construction rounds parameters, so read them back
    let (w1, b1, w2) = match (&g.layer(1).op, &g.layer(2).op) {
        (LayerOp::Dense { weight, bias, .. }, LayerOp::Dense { weight: v, .. }) => {
            (weight.clone(), bias.clone().unwrap(), v.clone())
        }
        _ => unreachable!(),
    };
    let x = data(normal(&mut rng, &[4, 3]));
    let mut cfg = AttributionConfig::new(Method::SmoothGrad, logits(&g));
    (cfg.n, cfg.noise_level) = (500, 0.1);
    cfg.precision = Some(Precision::Double);
    let s = smoothgrad(&g, &x, &cfg).unwrap();

    let xs = x.inputs()[0].data();
    let sigma = 0.1 * (xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min));
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(999);
    const M: usize = 50_000;
    for b in 0..4 {
        let row = x.inputs()[0].row(b);
        let (mut sum, mut sq) = (vec![0.0; 3], vec![0.0; 3]);
        for _ in 0..M {
            let noisy: Vec<f64> = row.iter().map(|&v| v + sigma * Distribution::<f64>::sample(&StandardNormal, &mut oracle_rng)).collect();
            for (i, gi) in tanh_net_gradient(&w1, &b1, &w2, &noisy).into_iter().enumerate() {
                sum[i] += gi;
                sq[i] += gi * gi;
            }
        }
        for i in 0..3 {
            let mean = sum[i] / M as f64;
            let var = sq[i] / M as f64 - mean * mean;
            let se = (var / 500.0 + var / M as f64).sqrt();
            let got = s.inputs[0].values.row(b)[i];
            assert!((got - mean).abs() <= 3.0 * se, "instance {b} input {i}: {got} vs {mean} (se {se})");
        }
    }
}

#[test]
fn epsilon_rule_approaches_simple_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // positive parameters and inputs keep every |z| well above 0.1
    let w = vec![uniform(&mut rng, &[7, 5], 0.1, 1.0), uniform(&mut rng, &[3, 7], 0.1, 1.0)];
    let b = vec![Some(uniform(&mut rng, &[7], 0.1, 0.5)), Some(uniform(&mut rng, &[3], 0.1, 0.5))];
    let g = dense_chain(w, b, Activation::Tanh);
    let x = data(uniform(&mut rng, &[8, 5], 0.2, 1.0));
    let sel = logits(&g);
    let simple = lrp(&g, &x, &AttributionConfig::new(Method::Lrp, sel.clone())).unwrap();
    let eps = AttributionConfig::new(Method::Lrp, sel).with_rule(LayerKind::Dense, LrpRule::Epsilon(1e-8));
    let eps = lrp(&g, &x, &eps).unwrap();
    assert!(simple.inputs[0].values.max_abs_diff(&eps.inputs[0].values).unwrap() <= 1e-5);
}

#[test]
fn alpha_one_on_nonnegative_nets_is_simple_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = vec![uniform(&mut rng, &[6, 4], 0.0, 1.0), uniform(&mut rng, &[2, 6], 0.0, 1.0)];
    let b = vec![Some(uniform(&mut rng, &[6], 0.0, 0.3)), Some(uniform(&mut rng, &[2], 0.0, 0.3))];
    let g = dense_chain(w, b, Activation::Relu);
    let x = data(uniform(&mut rng, &[10, 4], 0.0, 2.0));
    let sel = logits(&g);
    let simple = lrp(&g, &x, &AttributionConfig::new(Method::Lrp, sel.clone())).unwrap();
    let ab = AttributionConfig::new(Method::Lrp, sel).with_rule(LayerKind::Dense, LrpRule::AlphaBeta(1.0));
    let ab = lrp(&g, &x, &ab).unwrap();
    assert!(simple.inputs[0].values.max_abs_diff(&ab.inputs[0].values).unwrap() <= 1e-6);
}

#[test]
fn simple_rule_error_suggests_epsilon() {
    let g = dense_chain(vec![tensor(&[1, 2], vec![1.0, -1.0])], vec![None], Activation::Linear);
    let cfg = AttributionConfig::new(Method::Lrp, logits(&g));
    // z = 0 gives R = 0 at the output, so nothing is divided
    assert!(lrp(&g, &data(tensor(&[1, 2], vec![1.0, 1.0])), &cfg).is_ok());
    let g2 = dense_chain(
        vec![tensor(&[1, 2], vec![1.0, -1.0]), tensor(&[1, 1], vec![1.0])],
        vec![None, Some(tensor(&[1], vec![1.0]))],
        Activation::Sigmoid,
    );
    // the hidden unit has z = 0 but outputs 0.5, so it receives relevance
    let err = lrp(&g2, &data(tensor(&[1, 2], vec![1.0, 1.0])), &AttributionConfig::new(Method::Lrp, logits(&g2)))
        .unwrap_err();
    assert!(matches!(err, Error::ZeroDenominator { .. }));
    assert!(err.to_string().contains("epsilon"));
}

#[test]
fn composite_rules_apply_per_layer_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_dense(&mut rng, &[4, 5, 2], true, Activation::Relu);
    let x = data(normal(&mut rng, &[3, 4]));
    let base = AttributionConfig::new(Method::Lrp, logits(&g));
    let dense_eps = base.clone().with_rule(LayerKind::Dense, LrpRule::Epsilon(0.01));
    let pool_eps = base.clone().with_rule(LayerKind::AvgPool2D, LrpRule::Epsilon(0.01));
    let a = lrp(&g, &x, &base).unwrap();
    // no pooling layers: a rule for them changes nothing
    assert_eq!(a.inputs[0].values, lrp(&g, &x, &pool_eps).unwrap().inputs[0].values);
    assert_ne!(a.inputs[0].values, lrp(&g, &x, &dense_eps).unwrap().inputs[0].values);
}

#[test]
fn deeplift_single_relu_unit() {
    let g = ModelGraph::new(
        vec![
            LayerSpec::new("x", &[], LayerOp::Input { shape: vec![1] }),
            LayerSpec::new(
                "y",
                &["x"],
                LayerOp::Dense { weight: tensor(&[1, 1], vec![1.0]), bias: None, activation: Activation::Relu },
            ),
        ],
        vec!["x".into()],
        vec!["y".into()],
        None,
        None,
    )
    .unwrap();
    let sel = OutputSelection::first_output(&g, false).unwrap();
    for rule in [DeepLiftRule::Rescale, DeepLiftRule::RevealCancel] {
        let mut cfg = AttributionConfig::new(Method::DeepLift, sel.clone());
        cfg.deeplift_rule = rule;
        assert_eq!(deeplift(&g, &scalar(2.0), &cfg).unwrap().inputs[0].values.data(), &[2.0]);
    }
}

#[test]
fn deeplift_at_the_reference_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_dense(&mut rng, &[5, 6, 3], true, Activation::Tanh);
    let x = data(normal(&mut rng, &[4, 5]));
    for rule in [DeepLiftRule::Rescale, DeepLiftRule::RevealCancel] {
        let mut cfg = AttributionConfig::new(Method::DeepLift, logits(&g));
        cfg.deeplift_rule = rule;
        cfg.x_ref = Some(x.clone());
        let r = deeplift(&g, &x, &cfg).unwrap();
        assert!(r.inputs[0].values.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn deeplift_through_softmax_is_unsupported() {
    let g = parse_model(include_str!("fixtures/penguin_model.json")).unwrap();
    let sel = OutputSelection::first_output(&g, false).unwrap();
    let x = data(Tensor::filled(&[1, 4], 0.5, Precision::Single));
    let err = deeplift(&g, &x, &AttributionConfig::new(Method::DeepLift, sel)).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
    // the logits are fine
    let sel = logits(&g);
    assert!(deeplift(&g, &x, &AttributionConfig::new(Method::DeepLift, sel)).is_ok());
}

#[test]
fn connection_weights_single_layer_and_identity_chain() {
    let w = tensor(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let g = dense_chain(vec![w], vec![Some(tensor(&[2], vec![9.0, 9.0]))], Activation::Tanh);
    let r = connection_weights(&g, &logits(&g), false, None, None).unwrap();
    assert_eq!(r.instance_ids, vec!["global"]);
    assert_eq!(r.inputs[0].values.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

    let eye = tensor(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let g = dense_chain(vec![eye.clone(), eye], vec![None, None], Activation::Relu);
    let r = connection_weights(&g, &logits(&g), false, None, None).unwrap();
    assert_eq!(r.inputs[0].values.data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn connection_weights_times_input_needs_data() {
    let g = unit_bias();
    let sel = logits(&g);
    assert!(matches!(connection_weights(&g, &sel, true, None, None), Err(Error::Argument(_))));
    let mut cfg = AttributionConfig::new(Method::ConnectionWeights, sel);
    cfg.times_input = true;
    assert!(attribute(&g, None, &cfg).is_err());
    let r = attribute(&g, Some(&scalar(3.0)), &cfg).unwrap();
    assert_eq!(r.inputs[0].values.data(), &[3.0]);
}

#[test]
fn gradient_matches_finite_differences_on_concatenated_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = ModelGraph::new(
        vec![
            LayerSpec::new("a", &[], LayerOp::Input { shape: vec![3] }),
            LayerSpec::new("b", &[], LayerOp::Input { shape: vec![2] }),
            LayerSpec::new("ab", &["a", "b"], LayerOp::Concatenate { axis: -1 }),
            LayerSpec::new(
                "h",
                &["ab"],
                LayerOp::Dense { weight: normal(&mut rng, &[4, 5]), bias: Some(normal(&mut rng, &[4])), activation: Activation::Tanh },
            ),
            LayerSpec::new(
                "y",
                &["h"],
                LayerOp::Dense { weight: normal(&mut rng, &[2, 4]), bias: None, activation: Activation::Sigmoid },
            ),
        ],
        vec!["a".into(), "b".into()],
        vec!["y".into()],
        None,
        None,
    )
    .unwrap()
    .with_precision(Precision::Double);
    let x = Dataset::new(vec![normal(&mut rng, &[5, 3]), normal(&mut rng, &[5, 2])], None).unwrap();
    for pre in [true, false] {
        let sel = OutputSelection::first_output(&g, pre).unwrap();
        let r = gradient(&g, &x, &sel, None).unwrap();
        let fd = finite_diff_gradient(&g, &x, &sel, 1e-5).unwrap();
        for k in 0..2 {
            assert!(r.inputs[k].values.max_abs_diff(&fd[k]).unwrap() < 1e-8);
        }
        // summation to delta across both inputs
        let mut cfg = AttributionConfig::new(Method::DeepLift, sel.clone());
        cfg.deeplift_rule = DeepLiftRule::RevealCancel;
        let d = deeplift(&g, &x, &cfg).unwrap();
        let zero: Vec<f64> = vec![0.0; 3];
        let zero2: Vec<f64> = vec![0.0; 2];
        let r0 = naive_forward(&g, &[&zero, &zero2]).unwrap();
        for b in 0..5 {
            let t = naive_forward(&g, &[x.inputs()[0].row(b), x.inputs()[1].row(b)]).unwrap();
            let out = g.output_layers()[0];
            for k in 0..2 {
                let (f, f0) = if pre { (t.z[out][k], r0.z[out][k]) } else { (t.y[out][k], r0.y[out][k]) };
                assert!((d.total(b, k) - (f - f0)).abs() <= 1e-9 * (f - f0).abs().max(1.0));
            }
        }
    }
}
