use super::entry_labels;
use crate::attribution::RelevanceResult;
use crate::error::{Error, Result};
use serde::Serialize;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preprocess {
    #[default]
    Abs,
    Identity,
    Square,
}

impl Preprocess {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Preprocess::Abs => v.abs(),
            Preprocess::Identity => v,
            Preprocess::Square => v * v,
        }
    }
}

impl FromStr for Preprocess {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abs" => Ok(Preprocess::Abs),
            "identity" | "none" => Ok(Preprocess::Identity),
            "square" => Ok(Preprocess::Square),
            _ => Err(Error::Argument(format!("unknown preprocessing `{s}`"))),
        }
    }
}

/// Lower (type 1) quantile: the `max(1, ceil(n·p))`-th smallest value.
/// Sorts `values` in place.
pub fn quantile_type1(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let k = ((n as f64 * p).ceil() as usize).clamp(1, n);
    values[k - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryCell {
    pub feature: String,
    pub feature_2: Option<String>,
    pub channel: Option<String>,
    pub output_node: String,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// The requested quantile.
    pub quantile: f64,
    /// Raw (unpreprocessed) relevance of the reference instance.
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub model_input: String,
    pub quantile_level: f64,
    pub instances: Vec<String>,
    pub cells: Vec<SummaryCell>,
}

/// Per-entry statistics of preprocessed relevances of input layer `input`
/// over the instances `subset` (row indices).
pub fn summarize(
    result: &RelevanceResult,
    input: usize,
    subset: &[usize],
    q: f64,
    preprocess: Preprocess,
    reference: Option<usize>,
) -> Result<SummaryTable> {
    if subset.is_empty() {
        return Err(Error::Argument("instance subset is empty".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!(
            "quantile must lie in [0, 1], got {q}"
        )));
    }
    let r = result
        .inputs
        .get(input)
        .ok_or_else(|| Error::Argument(format!("no input layer {}", input + 1)))?;
    let batch = result.batch_size();
    if let Some(&bad) = subset
        .iter()
        .chain(reference.as_ref())
        .find(|&&i| i >= batch)
    {
        return Err(Error::Argument(format!(
            "instance {} out of range (batch {batch})",
            bad + 1
        )));
    }
    let n_out = result.outputs.len();
    let shape = &r.values.shape()[1..r.values.rank() - 1];
    let row_len = r.values.row_len();
    let mut cells = Vec::with_capacity(row_len);
    let mut buf = Vec::with_capacity(subset.len());
    for i in 0..row_len / n_out {
        let (feature, feature_2, channel) = entry_labels(&r.axis_names, shape, i);
        for (k, o) in result.outputs.iter().enumerate() {
            buf.clear();
            buf.extend(
                subset
                    .iter()
                    .map(|&b| preprocess.apply(r.values.row(b)[i * n_out + k])),
            );
            let mean = buf.iter().sum::<f64>() / buf.len() as f64;
            cells.push(SummaryCell {
                feature: feature.clone(),
                feature_2: feature_2.clone(),
                channel: channel.clone(),
                output_node: o.label.clone(),
                q25: quantile_type1(&mut buf, 0.25),
                median: quantile_type1(&mut buf, 0.5),
                q75: quantile_type1(&mut buf, 0.75),
                mean,
                min: buf[0],
                max: buf[buf.len() - 1],
                quantile: quantile_type1(&mut buf, q),
                reference: reference.map(|b| r.values.row(b)[i * n_out + k]),
            });
        }
    }
    Ok(SummaryTable {
        model_input: r.layer_id.clone(),
        quantile_level: q,
        instances: subset
            .iter()
            .map(|&b| result.instance_ids[b].clone())
            .collect(),
        cells,
    })
}
