//! Reshaping, aggregation and export of relevance results.

mod export;
mod summary;

pub use export::{
    read_records_csv, read_records_jsonl, write_arrays_json, write_records_csv, write_records_jsonl,
};
pub use summary::{quantile_type1, summarize, Preprocess, SummaryCell, SummaryTable};

use crate::attribution::{InputRelevance, OutputLabel, RelevanceResult};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::str::FromStr;

/// One relevance value in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub data: String,
    pub model_input: String,
    pub model_output: String,
    pub feature: String,
    pub feature_2: Option<String>,
    pub channel: Option<String>,
    pub output_node: String,
    pub value: f64,
}

/// An array with labels for every axis: instances, the input axes, then the
/// selected outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub model_input: String,
    pub shape: Vec<usize>,
    pub dim_names: Vec<Vec<String>>,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// One named array per input layer.
pub fn to_array(result: &RelevanceResult) -> Vec<NamedArray> {
    result
        .inputs
        .iter()
        .map(|r| {
            let mut dim_names = vec![result.instance_ids.clone()];
            dim_names.extend(r.axis_names.iter().cloned());
            dim_names.push(result.outputs.iter().map(|o| o.label.clone()).collect());
            NamedArray {
                model_input: r.layer_id.clone(),
                shape: r.values.shape().to_vec(),
                dim_names,
                values: r.values.data().to_vec(),
            }
        })
        .collect()
}

/// `(feature, feature_2, channel)` labels for flat index `i` of an input
/// with the given per-axis labels.
fn entry_labels(
    names: &[Vec<String>],
    shape: &[usize],
    i: usize,
) -> (String, Option<String>, Option<String>) {
    let mut idx = vec![0; shape.len()];
    let mut rem = i;
    for a in (0..shape.len()).rev() {
        idx[a] = rem % shape[a];
        rem /= shape[a];
    }
    let label = |a: usize| names[a][idx[a]].clone();
    match shape.len() {
        1 => (label(0), None, None),
        2 => (label(0), Some(label(1)), None),
        3 => (label(1), Some(label(2)), Some(label(0))),
        _ => (
            (0..shape.len()).map(label).collect::<Vec<_>>().join(":"),
            None,
            None,
        ),
    }
}

/// Long format, ordered by instance, then input layer, then input entry in
/// row-major order, then selected output.
pub fn to_records(result: &RelevanceResult) -> Vec<RelevanceRecord> {
    let n_out = result.outputs.len();
    let mut out = Vec::with_capacity(result.inputs.iter().map(|r| r.values.len()).sum());
    for (b, id) in result.instance_ids.iter().enumerate() {
        for r in &result.inputs {
            let shape = &r.values.shape()[1..r.values.rank() - 1];
            let row = r.values.row(b);
            for i in 0..row.len() / n_out {
                let (feature, feature_2, channel) = entry_labels(&r.axis_names, shape, i);
                for (k, o) in result.outputs.iter().enumerate() {
                    out.push(RelevanceRecord {
                        data: id.clone(),
                        model_input: r.layer_id.clone(),
                        model_output: o.layer_id.clone(),
                        feature: feature.clone(),
                        feature_2: feature_2.clone(),
                        channel: channel.clone(),
                        output_node: o.label.clone(),
                        value: row[i * n_out + k],
                    });
                }
            }
        }
    }
    out
}

fn push_unique(list: &mut Vec<String>, pos: &mut HashMap<String, usize>, v: &str) -> usize {
    *pos.entry(v.to_string()).or_insert_with(|| {
        list.push(v.to_string());
        list.len() - 1
    })
}

/// Rebuilds named arrays from records. Axis labels keep their order of first
/// appearance, so records produced by [`to_records`] give back the arrays of
/// [`to_array`] exactly.
pub fn from_records(records: &[RelevanceRecord]) -> Result<Vec<NamedArray>> {
    let mut inputs: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&RelevanceRecord>> = HashMap::new();
    for r in records {
        if !groups.contains_key(&r.model_input) {
            inputs.push(r.model_input.clone());
        }
        groups.entry(r.model_input.clone()).or_default().push(r);
    }
    inputs
        .into_iter()
        .map(|name| {
            let recs = &groups[&name];
            let image = recs[0].channel.is_some();
            let planar = recs[0].feature_2.is_some();
            // axes: instance, [channel], feature, [feature_2], output
            let mut axes: Vec<(Vec<String>, HashMap<String, usize>)> = Vec::new();
            let n_axes = 3 + usize::from(image) + usize::from(planar);
            axes.resize_with(n_axes, Default::default);
            let mut cells = Vec::with_capacity(recs.len());
            for r in recs {
                if r.channel.is_some() != image || r.feature_2.is_some() != planar {
                    return Err(Error::Data(format!(
                        "records of input `{name}` mix tabular and image layouts"
                    )));
                }
                let mut keys: Vec<&str> = vec![&r.data];
                if let Some(c) = &r.channel {
                    keys.push(c);
                }
                keys.push(&r.feature);
                if let Some(f2) = &r.feature_2 {
                    keys.push(f2);
                }
                keys.push(&r.output_node);
                let idx: Vec<usize> = keys
                    .iter()
                    .zip(axes.iter_mut())
                    .map(|(k, (list, pos))| push_unique(list, pos, k))
                    .collect();
                cells.push((idx, r.value));
            }
            let shape: Vec<usize> = axes.iter().map(|(l, _)| l.len()).collect();
            let total: usize = shape.iter().product();
            if cells.len() != total {
                return Err(Error::Data(format!(
                    "input `{name}` has {} records but its labels span {total} cells",
                    cells.len()
                )));
            }
            let mut values = vec![f64::NAN; total];
            let mut seen = vec![false; total];
            for (idx, v) in cells {
                let flat = idx.iter().zip(&shape).fold(0, |acc, (&i, &n)| acc * n + i);
                if std::mem::replace(&mut seen[flat], true) {
                    return Err(Error::Data(format!("input `{name}` has duplicate records")));
                }
                values[flat] = v;
            }
            Ok(NamedArray {
                model_input: name,
                shape,
                dim_names: axes.into_iter().map(|(l, _)| l).collect(),
                values,
            })
        })
        .collect()
}

/// Rebuilds a result from long records, for example to plot an exported
/// file. The method is recorded as `records`.
pub fn result_from_records(records: &[RelevanceRecord]) -> Result<RelevanceResult> {
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    let arrays = from_records(records)?;
    let ids = arrays[0].dim_names[0].clone();
    let labels = arrays[0].dim_names.last().expect("arrays have an output axis").clone();
    if arrays.iter().any(|a| a.dim_names[0] != ids || a.dim_names.last() != Some(&labels)) {
        return Err(Error::Data("input layers disagree on instances or outputs".into()));
    }
    let outputs = labels
        .iter()
        .map(|l| OutputLabel {
            layer_id: records
                .iter()
                .find(|r| &r.output_node == l)
                .map(|r| r.model_output.clone())
                .expect("label comes from a record"),
            label: l.clone(),
        })
        .collect();
    let inputs = arrays
        .into_iter()
        .map(|a| {
            let axis_names = a.dim_names[1..a.dim_names.len() - 1].to_vec();
            Ok(InputRelevance {
                layer_id: a.model_input,
                axis_names,
                values: Tensor::new(a.shape, a.values, Precision::Double)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelevanceResult {
        inputs,
        instance_ids: ids,
        outputs,
        method: "records".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelAggregation {
    #[default]
    Sum,
    Mean,
    L2Norm,
}

impl FromStr for ChannelAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(ChannelAggregation::Sum),
            "mean" => Ok(ChannelAggregation::Mean),
            "l2norm" | "norm" => Ok(ChannelAggregation::L2Norm),
            _ => Err(Error::Argument(format!(
                "unknown channel aggregation `{s}`"
            ))),
        }
    }
}

fn aggregate_input(r: &InputRelevance, mode: ChannelAggregation) -> InputRelevance {
    let s = r.values.shape();
    let (batch, c, hw, n) = (s[0], s[1], s[2] * s[3], s[4]);
    let mut out = vec![0.0; batch * hw * n];
    for b in 0..batch {
        for p in 0..hw * n {
            let vals = (0..c).map(|ch| r.values.data()[((b * c + ch) * hw * n) + p]);
            out[b * hw * n + p] = match mode {
                ChannelAggregation::Sum => vals.sum(),
                ChannelAggregation::Mean => vals.sum::<f64>() / c as f64,
                ChannelAggregation::L2Norm => vals.map(|v| v * v).sum::<f64>().sqrt(),
            };
        }
    }
    InputRelevance {
        layer_id: r.layer_id.clone(),
        axis_names: r.axis_names[1..].to_vec(),
        values: Tensor::new(vec![batch, s[2], s[3], n], out, r.values.precision())
            .expect("shape is consistent"),
    }
}

/// Collapses the channel axis of every image input. Inputs without a
/// channel axis are left as they are; it is an error if no input has one.
pub fn aggregate_channels(
    result: &RelevanceResult,
    mode: ChannelAggregation,
) -> Result<RelevanceResult> {
    if !result.inputs.iter().any(|r| r.values.rank() == 5) {
        return Err(Error::Argument(
            "no channel axis: the result has no image input".into(),
        ));
    }
    let mut out = result.clone();
    for r in &mut out.inputs {
        if r.values.rank() == 5 {
            *r = aggregate_input(r, mode);
        }
    }
    Ok(out)
}
