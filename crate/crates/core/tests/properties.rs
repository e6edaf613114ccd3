mod common;

use attrib_core::attribution::{deeplift, gradient, lrp, smoothgrad, AttributionConfig, DeepLiftRule, LrpRule, Method};
use attrib_core::forward::OutputSelection;
use attrib_core::model::{
    parse_model_with_precision, serialize_model, Activation, Dataset, LayerKind, LayerOp, LayerSpec, ModelGraph,
};
use attrib_core::oracle::naive_forward;
use attrib_core::results::{
    aggregate_channels, from_records, summarize, to_array, to_records, ChannelAggregation, Preprocess,
};
use attrib_core::tensor::{Padding, Precision};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Tanh), Just(Activation::Sigmoid)]
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..7, 2..5)
}

/// Small conv net on `[c, 6, 6]` images.
fn conv_net(rng: &mut ChaCha8Rng, c: usize, max_pool: bool, bias: bool) -> ModelGraph {
    let pool = if max_pool {
        LayerOp::MaxPool2D { pool: (2, 2), stride: (2, 2) }
    } else {
        LayerOp::AvgPool2D { pool: (2, 2), stride: (2, 2) }
    };
    ModelGraph::new(
        vec![
            LayerSpec::new("img", &[], LayerOp::Input { shape: vec![c, 6, 6] }),
            LayerSpec::new(
                "conv",
                &["img"],
                LayerOp::Conv2D {
                    kernel: normal(rng, &[3, c, 3, 3]),
                    bias: bias.then(|| normal(rng, &[3])),
                    stride: (1, 1),
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
            ),
            LayerSpec::new("pool", &["conv"], pool),
            LayerSpec::new("flat", &["pool"], LayerOp::Flatten),
            LayerSpec::new(
                "out",
                &["flat"],
                LayerOp::Dense { weight: normal(rng, &[2, 27]), bias: bias.then(|| normal(rng, &[2])), activation: Activation::Linear },
            ),
        ],
        vec!["img".into()],
        vec!["out".into()],
        None,
        None,
    )
    .unwrap()
    .with_precision(Precision::Double)
}

fn selected(g: &ModelGraph, x: &[f64], pre: bool) -> Vec<f64> {
    let t = naive_forward(g, &[x]).unwrap();
    let out = g.output_layers()[0];
    if pre { t.z[out].clone() } else { t.y[out].clone() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lrp_simple_conserves_without_bias(seed in any::<u64>(), w in widths(), act in prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dense(&mut rng, &w, false, act);
        let x = data(normal(&mut rng, &[4, w[0]]));
        let sel = OutputSelection::first_output(&g, true).unwrap();
        let r = lrp(&g, &x, &AttributionConfig::new(Method::Lrp, sel).with_rule(LayerKind::Dense, LrpRule::Simple)).unwrap();
        for b in 0..4 {
            let y = selected(&g, x.inputs()[0].row(b), true);
            for (k, yk) in y.iter().enumerate() {
                prop_assert!((r.total(b, k) - yk).abs() <= 1e-9 * yk.abs().max(1.0));
            }
        }
    }

    #[test]
    fn lrp_simple_conserves_through_conv_and_avgpool(seed in any::<u64>(), c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = conv_net(&mut rng, c, false, false);
        let x = data(normal(&mut rng, &[3, c, 6, 6]));
        let sel = OutputSelection::first_output(&g, true).unwrap();
        let r = lrp(&g, &x, &AttributionConfig::new(Method::Lrp, sel)).unwrap();
        for b in 0..3 {
            let y = selected(&g, x.inputs()[0].row(b), true);
            for (k, yk) in y.iter().enumerate() {
                prop_assert!((r.total(b, k) - yk).abs() <= 1e-9 * yk.abs().max(1.0));
            }
        }
    }

    #[test]
    fn deeplift_sums_to_delta(
        seed in any::<u64>(),
        w in widths(),
        act in activation(),
        reveal in any::<bool>(),
        pre in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dense(&mut rng, &w, true, act);
        let x = data(normal(&mut rng, &[3, w[0]]));
        let x_ref = data(normal(&mut rng, &[1, w[0]]));
        let mut cfg = AttributionConfig::new(Method::DeepLift, OutputSelection::first_output(&g, pre).unwrap());
        cfg.deeplift_rule = if reveal { DeepLiftRule::RevealCancel } else { DeepLiftRule::Rescale };
        cfg.x_ref = Some(x_ref.clone());
        let r = deeplift(&g, &x, &cfg).unwrap();
        let f0 = selected(&g, x_ref.inputs()[0].row(0), pre);
        for b in 0..3 {
            let f = selected(&g, x.inputs()[0].row(b), pre);
            for k in 0..f.len() {
                let delta = f[k] - f0[k];
                prop_assert!((r.total(b, k) - delta).abs() <= 1e-9 * delta.abs().max(1.0));
            }
        }
    }

    #[test]
    fn deeplift_sums_to_delta_through_pooling(seed in any::<u64>(), max_pool in any::<bool>(), wta in any::<bool>(), reveal in any::<bool>()) {
        // averaging a max-pooling layer changes the function, not the bookkeeping
        prop_assume!(!max_pool || wta);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = conv_net(&mut rng, 2, max_pool, true);
        let x = data(normal(&mut rng, &[2, 2, 6, 6]));
        let mut cfg = AttributionConfig::new(Method::DeepLift, OutputSelection::first_output(&g, true).unwrap());
        cfg.deeplift_rule = if reveal { DeepLiftRule::RevealCancel } else { DeepLiftRule::Rescale };
        cfg.winner_takes_all = wta;
        let r = deeplift(&g, &x, &cfg).unwrap();
        let zero = vec![0.0; 72];
        let f0 = selected(&g, &zero, true);
        for b in 0..2 {
            let f = selected(&g, x.inputs()[0].row(b), true);
            for k in 0..2 {
                let delta = f[k] - f0[k];
                prop_assert!((r.total(b, k) - delta).abs() <= 1e-9 * delta.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_noise_smoothgrad_is_gradient(seed in any::<u64>(), n in 1usize..6, w in widths(), act in activation()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dense(&mut rng, &w, true, act).with_precision(Precision::Single);
        let x = data(normal(&mut rng, &[3, w[0]]));
        let sel = OutputSelection::first_output(&g, true).unwrap();
        let mut cfg = AttributionConfig::new(Method::SmoothGrad, sel.clone());
        (cfg.n, cfg.noise_level, cfg.seed) = (n, 0.0, seed);
        let s = smoothgrad(&g, &x, &cfg).unwrap();
        prop_assert_eq!(&s.inputs[0].values, &gradient(&g, &x, &sel, None).unwrap().inputs[0].values);
    }

    #[test]
    fn records_and_arrays_are_a_bijection(seed in any::<u64>(), c in 1usize..4, batch in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = conv_net(&mut rng, c, true, true);
        let x = data(normal(&mut rng, &[batch, c, 6, 6]));
        let r = gradient(&g, &x, &OutputSelection::first_output(&g, true).unwrap(), None).unwrap();
        let records = to_records(&r);
        prop_assert_eq!(records.len(), batch * c * 36 * 2);
        prop_assert!(records.iter().all(|r| r.channel.is_some() && r.feature_2.is_some()));
        prop_assert_eq!(from_records(&records).unwrap(), to_array(&r));
    }

    #[test]
    fn channel_sum_commutes_with_record_grouping(seed in any::<u64>(), c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = conv_net(&mut rng, c, false, true);
        let x = data(normal(&mut rng, &[2, c, 6, 6]));
        let r = gradient(&g, &x, &OutputSelection::first_output(&g, true).unwrap(), None).unwrap();
        let mut grouped: BTreeMap<(String, String, Option<String>, String), f64> = BTreeMap::new();
        for rec in to_records(&r) {
            *grouped.entry((rec.data, rec.feature, rec.feature_2, rec.output_node)).or_default() += rec.value;
        }
        let agg = to_records(&aggregate_channels(&r, ChannelAggregation::Sum).unwrap());
        prop_assert_eq!(agg.len(), grouped.len());
        for rec in agg {
            let want = grouped[&(rec.data, rec.feature, rec.feature_2, rec.output_node)];
            prop_assert!((rec.value - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn odd_median_is_an_observed_value(seed in any::<u64>(), half in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dense(&mut rng, &[4, 5, 2], true, Activation::Tanh);
        let batch = 2 * half + 1;
        let x = data(normal(&mut rng, &[batch, 4]));
        let r = gradient(&g, &x, &OutputSelection::first_output(&g, true).unwrap(), None).unwrap();
        let subset: Vec<usize> = (0..batch).collect();
        let t = summarize(&r, 0, &subset, 0.5, Preprocess::Identity, None).unwrap();
        for (i, cell) in t.cells.iter().enumerate() {
            prop_assert!(subset.iter().any(|&b| r.inputs[0].values.row(b)[i] == cell.median));
            prop_assert!(cell.min <= cell.q25 && cell.q25 <= cell.median && cell.median <= cell.q75 && cell.q75 <= cell.max);
        }
    }

    #[test]
    fn model_documents_round_trip(seed in any::<u64>(), w in widths(), bias in any::<bool>(), act in activation()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dense(&mut rng, &w, bias, act);
        let text = serialize_model(&g);
        let again = parse_model_with_precision(&text, Precision::Double).unwrap();
        prop_assert_eq!(serialize_model(&again), text);
        let conv = conv_net(&mut rng, 2, true, bias);
        let text = serialize_model(&conv);
        prop_assert_eq!(serialize_model(&parse_model_with_precision(&text, Precision::Double).unwrap()), text);
    }

    #[test]
    fn dataset_json_round_trips(seed in any::<u64>(), batch in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = conv_net(&mut rng, 3, false, false);
        let x = Dataset::new(vec![normal(&mut rng, &[batch, 3, 6, 6])], None).unwrap();
        let back = attrib_core::model::load_dataset(
            x.to_json().as_bytes(), attrib_core::model::DataFormat::Json, true, &g,
        ).unwrap();
        prop_assert_eq!(back, x);
    }
}
