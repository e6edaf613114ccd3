mod common;

use attrib_core::attribution::{gradient, lrp, AttributionConfig, Method};
use attrib_core::forward::{forward, select_outputs, OutputSelection};
use attrib_core::model::{
    load_dataset, load_dataset_path, parse_model, parse_model_with_precision, serialize_model, validate_model,
    Activation, DataFormat, Dataset,
};
use attrib_core::oracle::{architecture_grid, architecture_specs, naive_forward, GridBody, GRID_INSTANCES};
use attrib_core::results::{
    from_records, read_records_csv, summarize, to_array, to_records, write_records_csv, Preprocess,
};
use attrib_core::tensor::{Precision, Tensor};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn penguins() -> (attrib_core::model::ModelGraph, Dataset) {
    let g = parse_model(include_str!("fixtures/penguin_model.json")).unwrap();
    let d = load_dataset_path(&fixture("penguin_data.csv"), None, true, &g).unwrap();
    (g, d)
}

#[test]
fn grid_has_32_valid_architectures() {
    assert_eq!(architecture_specs().len(), 32);
    let grid = architecture_grid(0);
    assert_eq!(grid.len(), 32);
    let names: std::collections::BTreeSet<_> = grid.iter().map(|c| c.name.clone()).collect();
    assert_eq!(names.len(), 32);
    for case in &grid {
        assert!(validate_model(&case.graph).is_empty(), "{}", case.name);
        assert_eq!(case.data.batch_size(), GRID_INSTANCES);
    }
}

#[test]
fn grid_is_deterministic_per_seed() {
    let a: Vec<String> = architecture_grid(7).iter().map(|c| serialize_model(&c.graph) + &c.data.to_json()).collect();
    let b: Vec<String> = architecture_grid(7).iter().map(|c| serialize_model(&c.graph) + &c.data.to_json()).collect();
    let c: Vec<String> = architecture_grid(8).iter().map(|c| serialize_model(&c.graph) + &c.data.to_json()).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn grid_files_replay_through_the_loaders() {
    let dir = std::env::temp_dir().join(format!("attrib-grid-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for case in architecture_grid(1).into_iter().step_by(5) {
        let (m, d) = case.write_files(&dir).unwrap();
        let g = parse_model_with_precision(&std::fs::read_to_string(m).unwrap(), Precision::Double).unwrap();
        let data = load_dataset_path(&d, None, true, &g).unwrap();
        assert_eq!(serialize_model(&g), serialize_model(&case.graph));
        assert_eq!(data, case.data);
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn forward_matches_loop_oracle_on_grid() {
    for case in architecture_grid(2) {
        let t = forward(&case.graph, &case.data).unwrap();
        let out = case.graph.output_layers()[0];
        for b in 0..case.data.batch_size() {
            let n = naive_forward(&case.graph, &[case.data.inputs()[0].row(b)]).unwrap();
            for (e, o) in t.pre_activation(out).row(b).iter().zip(&n.z[out]) {
                assert!((e - o).abs() <= 1e-10 * o.abs().max(1.0), "{}", case.name);
            }
        }
    }
}

#[test]
fn single_precision_forward_is_close_to_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_dense(&mut rng, &[10, 32, 3], true, Activation::Tanh).with_precision(Precision::Single);
    let x = data(normal(&mut rng, &[16, 10]).to_precision(Precision::Single));
    let t = forward(&g, &x).unwrap();
    let out = g.output_layers()[0];
    for b in 0..16 {
        let n = naive_forward(&g, &[x.inputs()[0].row(b)]).unwrap();
        for (e, o) in t.output(out).row(b).iter().zip(&n.y[out]) {
            assert!((e - o).abs() <= 1e-6 * o.abs().max(1.0));
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let case = architecture_grid(3).into_iter().find(|c| c.spec.body == GridBody::ConvMaxPool).unwrap();
    let a = forward(&case.graph, &case.data).unwrap();
    let b = forward(&case.graph, &case.data).unwrap();
    for i in 0..case.graph.len() {
        assert_eq!(a.output(i), b.output(i));
        assert_eq!(a.pre_activation(i), b.pre_activation(i));
    }
}

#[test]
fn trace_memory_is_linear_in_batch() {
    let case = architecture_grid(4).into_iter().find(|c| c.spec.body == GridBody::ConvAvgPool).unwrap();
    let per_instance: usize = (0..case.graph.len())
        .map(|i| {
            let n: usize = case.graph.shape(i).iter().product();
            let has_pre = case.graph.layer(i).op.activation() != Activation::Linear;
            n * (1 + usize::from(has_pre))
        })
        .sum();
    for batch in [1, 4, 32] {
        let rows: Vec<usize> = (0..batch).collect();
        let t = forward(&case.graph, &case.data.select(&rows)).unwrap();
        assert_eq!(t.stored_values(), batch * per_instance);
    }
}

#[test]
fn inferred_shapes_match_a_zero_forward_pass() {
    for text in [include_str!("fixtures/penguin_model.json"), include_str!("fixtures/unit_bias.json")] {
        let g = parse_model(text).unwrap();
        let x: Vec<Tensor> = g
            .input_dims()
            .iter()
            .map(|d| {
                let mut s = vec![2];
                s.extend(d);
                Tensor::zeros(&s, Precision::Single)
            })
            .collect();
        let t = forward(&g, &Dataset::new(x, None).unwrap()).unwrap();
        for i in 0..g.len() {
            assert_eq!(&t.output(i).shape()[1..], g.shape(i));
        }
    }
    for case in architecture_grid(0) {
        let t = forward(&case.graph, &case.data.select(&[0])).unwrap();
        for i in 0..case.graph.len() {
            assert_eq!(&t.output(i).shape()[1..], case.graph.shape(i));
        }
    }
}

#[test]
fn sigmoid_selection_modes() {
    let g = dense_chain(vec![tensor(&[1, 1], vec![1.0])], vec![None], Activation::Linear);
    let mut doc: serde_json::Value = serde_json::from_str(&serialize_model(&g)).unwrap();
    doc["layers"][1]["activation"] = "sigmoid".into();
    let g = parse_model(&doc.to_string()).unwrap();
    let t = forward(&g, &data(tensor(&[1, 1], vec![0.0]))).unwrap();
    let post = select_outputs(&t, &OutputSelection::first_output(&g, false).unwrap()).unwrap();
    let pre = select_outputs(&t, &OutputSelection::first_output(&g, true).unwrap()).unwrap();
    assert_eq!(post.data(), &[0.5]);
    assert_eq!(pre.data(), &[0.0]);
}

#[test]
fn penguin_fixture_shapes_and_labels() {
    let (g, d) = penguins();
    assert_eq!(d.batch_size(), 10);
    assert_eq!(d.ids()[0], "P01");
    let sel = OutputSelection::parse(&g, "1,3", true).unwrap();
    let cfg = AttributionConfig::new(Method::Lrp, sel);
    let r = lrp(&g, &d, &cfg).unwrap();
    let arrays = to_array(&r);
    assert_eq!(arrays[0].shape, vec![10, 4, 2]);
    assert_eq!(arrays[0].dim_names[2], vec!["Adelie", "Gentoo"]);
    let records = to_records(&r);
    assert_eq!(records.len(), 80);
    assert_eq!(records[0].data, "P01");
    assert_eq!(records[0].feature, "bill_length");
    assert_eq!(records[0].output_node, "Adelie");
    assert_eq!(records[1].output_node, "Gentoo");
}

#[test]
fn records_survive_csv_and_rebuild_the_arrays() {
    let (g, d) = penguins();
    let r = gradient(&g, &d, &OutputSelection::first_output(&g, true).unwrap(), None).unwrap();
    let mut buf = Vec::new();
    write_records_csv(&to_records(&r), &mut buf).unwrap();
    let back = read_records_csv(&buf[..]).unwrap();
    assert_eq!(from_records(&back).unwrap(), to_array(&r));
}

#[test]
fn summary_median_matches_sorting() {
    let (g, d) = penguins();
    let r = gradient(&g, &d, &OutputSelection::first_output(&g, true).unwrap(), None).unwrap();
    let subset: Vec<usize> = (0..9).collect();
    let table = summarize(&r, 0, &subset, 0.5, Preprocess::Identity, Some(9)).unwrap();
    let n_out = 3;
    for (cell_idx, cell) in table.cells.iter().enumerate() {
        let (i, k) = (cell_idx / n_out, cell_idx % n_out);
        let mut vals: Vec<f64> = subset.iter().map(|&b| r.inputs[0].values.row(b)[i * n_out + k]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cell.median, vals[4]);
        assert_eq!(cell.quantile, vals[4]);
        assert!(cell.q25 <= cell.median && cell.median <= cell.q75);
        assert_eq!(cell.reference, Some(r.inputs[0].values.row(9)[i * n_out + k]));
    }
    let abs = summarize(&r, 0, &subset, 0.9, Preprocess::Abs, None).unwrap();
    assert!(abs.cells.iter().all(|c| c.min >= 0.0 && c.quantile >= 0.0));
    let one = summarize(&r, 0, &[3], 0.5, Preprocess::Square, None).unwrap();
    assert_eq!(one.cells[0].median, r.inputs[0].values.row(3)[0].powi(2));
    assert!(summarize(&r, 0, &[], 0.5, Preprocess::Abs, None).is_err());
    assert!(summarize(&r, 0, &[0], 1.5, Preprocess::Abs, None).is_err());
}

#[test]
fn channels_last_csv_matches_channels_first_json() {
    let case = architecture_grid(5).into_iter().find(|c| c.spec.body == GridBody::ConvStrided).unwrap();
    let x = &case.data.inputs()[0];
    let last = attrib_core::tensor::permute_channels_last(x).unwrap();
    let mut csv = String::from("id");
    for i in 0..last.row_len() {
        csv.push_str(&format!(",v{i}"));
    }
    csv.push('\n');
    for b in 0..x.shape()[0] {
        csv.push_str(&case.data.ids()[b]);
        for v in last.row(b) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let from_csv = load_dataset(csv.as_bytes(), DataFormat::Csv, false, &case.graph).unwrap();
    let from_json = load_dataset(case.data.to_json().as_bytes(), DataFormat::Json, true, &case.graph).unwrap();
    assert_eq!(from_csv.inputs(), from_json.inputs());
    assert_eq!(from_csv.ids(), from_json.ids());
}
