use super::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::{permute_channels_first, Precision, Tensor};
use serde_json::Value;
use std::io::Read;
use std::path::Path;

/// Input instances, one batched tensor per model input layer, in the
/// engine's channels-first layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(DataFormat::Csv),
            "json" => Some(DataFormat::Json),
            _ => None,
        }
    }
}

impl Dataset {
    /// `ids` defaults to "1".."B".
    pub fn new(inputs: Vec<Tensor>, ids: Option<Vec<String>>) -> Result<Self> {
        let batch = inputs
            .first()
            .ok_or_else(|| Error::Data("a dataset needs at least one input tensor".into()))?
            .shape()[0];
        if inputs.iter().any(|t| t.rank() < 2 || t.shape()[0] != batch) {
            return Err(Error::Data(
                "input tensors must be batched with equal batch sizes".into(),
            ));
        }
        let ids = match ids {
            Some(ids) if ids.len() != batch => {
                return Err(Error::Data(format!(
                    "{} ids given for {batch} instances",
                    ids.len()
                )))
            }
            Some(ids) => ids,
            None => (1..=batch).map(|i| i.to_string()).collect(),
        };
        Ok(Dataset { inputs, ids })
    }

    /// Builds a dataset from channels-last image tensors (`[B,H,W,C]`);
    /// other ranks are passed through.
    pub fn from_channels_last(inputs: Vec<Tensor>, ids: Option<Vec<String>>) -> Result<Self> {
        let inputs = inputs
            .into_iter()
            .map(|t| {
                if t.rank() == 4 {
                    permute_channels_first(&t)
                } else {
                    Ok(t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(inputs, ids)
    }

    pub fn single(input: Tensor) -> Result<Self> {
        Self::new(vec![input], None)
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    /// Instances `rows` (0-based), keeping ids.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.iter().map(|t| t.select_rows(rows)).collect(),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
        }
    }

    pub fn to_precision(&self, p: Precision) -> Dataset {
        Dataset {
            inputs: self.inputs.iter().map(|t| t.to_precision(p)).collect(),
            ids: self.ids.clone(),
        }
    }

    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        let dims = graph.input_dims();
        if dims.len() != self.inputs.len() {
            return Err(Error::Data(format!(
                "model has {} inputs but the data provides {}",
                dims.len(),
                self.inputs.len()
            )));
        }
        for ((t, d), id) in self.inputs.iter().zip(&dims).zip(graph.input_ids()) {
            if &t.shape()[1..] != d.as_slice() {
                return Err(Error::Data(format!(
                    "input `{id}` expects instances of shape {d:?} but the data has {:?}",
                    &t.shape()[1..]
                )));
            }
        }
        Ok(())
    }
}

/// Shape an instance takes in the file: channels last when requested.
fn file_shape(dims: &[usize], channels_first: bool) -> Vec<usize> {
    if dims.len() == 3 && !channels_first {
        vec![dims[1], dims[2], dims[0]]
    } else {
        dims.to_vec()
    }
}

fn to_internal(t: Tensor, channels_first: bool) -> Result<Tensor> {
    if t.rank() == 4 && !channels_first {
        permute_channels_first(&t)
    } else {
        Ok(t)
    }
}

fn nest(data: &[f64], shape: &[usize]) -> Value {
    match shape {
        [] | [_] => Value::Array(data.iter().map(|&v| Value::from(v)).collect()),
        [n, rest @ ..] => Value::Array(data.chunks(data.len() / n).map(|c| nest(c, rest)).collect()),
    }
}

impl Dataset {
    /// The object form read by [`load_dataset`], channels first. Numbers are
    /// written so that they parse back to the same `f64`.
    pub fn to_json(&self) -> String {
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|x| Value::Array((0..self.batch_size()).map(|b| nest(x.row(b), &x.shape()[1..])).collect()))
            .collect();
        serde_json::json!({ "ids": self.ids, "inputs": inputs }).to_string()
    }
}

pub fn load_dataset_path(
    path: &Path,
    format: Option<DataFormat>,
    channels_first: bool,
    graph: &ModelGraph,
) -> Result<Dataset> {
    let format = format
        .or_else(|| DataFormat::from_path(path))
        .ok_or_else(|| {
            Error::Argument(format!(
                "cannot infer data format of `{}`; use .csv or .json",
                path.display()
            ))
        })?;
    let file = std::fs::File::open(path)?;
    load_dataset(file, format, channels_first, graph)
}

/// Reads instances for `graph` from CSV or JSON.
///
/// CSV: a header row, then one instance per row. A column named `id` holds
/// instance ids; all other columns are the flattened inputs of every input
/// layer in declaration order (channels last per image when
/// `channels_first` is false).
///
/// JSON: either one nested array `[B, ...]` for single-input models, or
/// `{"ids": [...], "inputs": [array, ...]}`.
pub fn load_dataset(
    reader: impl Read,
    format: DataFormat,
    channels_first: bool,
    graph: &ModelGraph,
) -> Result<Dataset> {
    let ds = match format {
        DataFormat::Csv => read_csv(reader, channels_first, graph)?,
        DataFormat::Json => read_json(reader, channels_first, graph)?,
    };
    ds.check_against(graph)?;
    Ok(ds)
}

fn read_csv(reader: impl Read, channels_first: bool, graph: &ModelGraph) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if is_empty_input(&e) => return Err(Error::Data("no instances".into())),
        Err(e) => return Err(e.into()),
    };
    if headers.is_empty() {
        return Err(Error::Data("no instances".into()));
    }
    let id_col = headers.iter().position(|h| h == "id");
    let width = headers.len() - usize::from(id_col.is_some());
    let dims = graph.input_dims();
    let expected: usize = dims.iter().map(|d| d.iter().product::<usize>()).sum();
    if width != expected {
        return Err(Error::Data(format!(
            "CSV has {width} value columns but the model expects {expected} values per instance"
        )));
    }

    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::Data(format!("ragged row {}", row + 2)),
            _ => Error::Csv(e),
        })?;
        for (col, cell) in rec.iter().enumerate() {
            if Some(col) == id_col {
                ids.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "non-numeric cell `{cell}` in row {} column `{}`",
                    row + 2,
                    &headers[col]
                ))
            })?;
            values.push(v);
        }
    }
    let batch = values.len() / expected.max(1);
    if batch == 0 {
        return Err(Error::Data("no instances".into()));
    }

    let mut inputs = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for d in &dims {
        let n: usize = d.iter().product();
        let mut data = Vec::with_capacity(batch * n);
        for b in 0..batch {
            let start = b * expected + offset;
            data.extend_from_slice(&values[start..start + n]);
        }
        offset += n;
        let mut shape = vec![batch];
        shape.extend(file_shape(d, channels_first));
        inputs.push(to_internal(Tensor::from_vec(shape, data)?, channels_first)?);
    }
    Dataset::new(inputs, id_col.map(|_| ids))
}

fn is_empty_input(e: &csv::Error) -> bool {
    matches!(e.kind(), csv::ErrorKind::Io(_))
}

fn nested_to_tensor(v: &Value) -> Result<Tensor> {
    fn shape_of(v: &Value, shape: &mut Vec<usize>) {
        if let Value::Array(items) = v {
            shape.push(items.len());
            if let Some(first) = items.first() {
                shape_of(first, shape);
            }
        }
    }
    fn flatten(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
        match (v, shape.split_first()) {
            (Value::Array(items), Some((&n, rest))) if items.len() == n => {
                items.iter().try_for_each(|i| flatten(i, rest, out))
            }
            (Value::Number(x), None) => {
                out.push(
                    x.as_f64()
                        .ok_or_else(|| Error::Data(format!("number {x} is out of range")))?,
                );
                Ok(())
            }
            (Value::Array(_), _) => Err(Error::Data("ragged nested array".into())),
            (other, _) => Err(Error::Data(format!(
                "non-numeric value {other} in data array"
            ))),
        }
    }
    let mut shape = Vec::new();
    shape_of(v, &mut shape);
    if shape.first() == Some(&0) || shape.is_empty() {
        return Err(Error::Data("no instances".into()));
    }
    let mut data = Vec::new();
    flatten(v, &shape, &mut data)?;
    Tensor::from_vec(shape, data).map_err(|_| Error::Data("no instances".into()))
}

fn read_json(mut reader: impl Read, channels_first: bool, graph: &ModelGraph) -> Result<Dataset> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    if text.trim().is_empty() {
        return Err(Error::Data("no instances".into()));
    }
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
    let (arrays, ids) = match &value {
        Value::Array(_) => (vec![&value], None),
        Value::Object(map) => {
            for key in map.keys() {
                if key != "ids" && key != "inputs" {
                    return Err(Error::Data(format!(
                        "unknown field `{key}` in data document"
                    )));
                }
            }
            let inputs = map
                .get("inputs")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Data("data document needs an `inputs` array".into()))?;
            let ids = match map.get("ids") {
                None => None,
                Some(Value::Array(ids)) => Some(
                    ids.iter()
                        .map(|v| match v {
                            Value::String(s) => Ok(s.clone()),
                            Value::Number(n) => Ok(n.to_string()),
                            other => Err(Error::Data(format!("invalid instance id {other}"))),
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                Some(_) => return Err(Error::Data("`ids` must be an array".into())),
            };
            (inputs.iter().collect(), ids)
        }
        _ => {
            return Err(Error::Data(
                "data must be a nested array or an object".into(),
            ))
        }
    };
    let dims = graph.input_dims();
    if arrays.len() != dims.len() {
        return Err(Error::Data(format!(
            "model has {} inputs but the data provides {}",
            dims.len(),
            arrays.len()
        )));
    }
    let mut inputs = Vec::new();
    for (a, d) in arrays.into_iter().zip(&dims) {
        let t = nested_to_tensor(a)?;
        let want = file_shape(d, channels_first);
        if t.shape()[1..] != want[..] {
            return Err(Error::Data(format!(
                "data instances have shape {:?} but {want:?} is expected",
                &t.shape()[1..]
            )));
        }
        inputs.push(to_internal(t, channels_first)?);
    }
    Dataset::new(inputs, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerOp, LayerSpec};

    fn tabular(p: usize) -> ModelGraph {
        ModelGraph::new(
            vec![
                LayerSpec::new("x", &[], LayerOp::Input { shape: vec![p] }),
                LayerSpec::new(
                    "y",
                    &["x"],
                    LayerOp::Dense {
                        weight: Tensor::zeros(&[3, p], Precision::Single),
                        bias: None,
                        activation: Activation::Softmax,
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

    fn image() -> ModelGraph {
        ModelGraph::new(
            vec![
                LayerSpec::new(
                    "img",
                    &[],
                    LayerOp::Input {
                        shape: vec![3, 10, 10],
                    },
                ),
                LayerSpec::new("f", &["img"], LayerOp::Flatten),
            ],
            vec!["img".into()],
            vec!["f".into()],
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn csv_ten_rows_four_features() {
        let mut text = String::from("a,b,c,d\n");
        for i in 0..10 {
            text.push_str(&format!("{i},1.5,-2,3e-1\n"));
        }
        let ds = load_dataset(text.as_bytes(), DataFormat::Csv, true, &tabular(4)).unwrap();
        assert_eq!(ds.batch_size(), 10);
        assert_eq!(ds.inputs()[0].shape(), &[10, 4]);
        assert_eq!(ds.ids()[9], "10");
    }

    #[test]
    fn csv_id_column() {
        let text = "id,a,b\np1,1,2\np2,3,4\n";
        let ds = load_dataset(text.as_bytes(), DataFormat::Csv, true, &tabular(2)).unwrap();
        assert_eq!(ds.ids(), &["p1", "p2"]);
        assert_eq!(ds.inputs()[0].data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_errors() {
        let g = tabular(2);
        let empty = load_dataset("".as_bytes(), DataFormat::Csv, true, &g).unwrap_err();
        assert!(empty.to_string().contains("no instances"), "{empty}");
        let header_only = load_dataset("a,b\n".as_bytes(), DataFormat::Csv, true, &g).unwrap_err();
        assert!(header_only.to_string().contains("no instances"));
        let ragged =
            load_dataset("a,b\n1,2\n3\n".as_bytes(), DataFormat::Csv, true, &g).unwrap_err();
        assert!(ragged.to_string().contains("ragged"), "{ragged}");
        let text = load_dataset("a,b\n1,x\n".as_bytes(), DataFormat::Csv, true, &g).unwrap_err();
        assert!(text.to_string().contains("non-numeric"));
        let wide =
            load_dataset("a,b,c\n1,2,3\n".as_bytes(), DataFormat::Csv, true, &g).unwrap_err();
        assert!(matches!(wide, Error::Data(_)));
    }

    #[test]
    fn json_channels_last_is_permuted() {
        let g = image();
        let mut nested = Vec::new();
        for b in 0..2 {
            let mut rows = Vec::new();
            for h in 0..10 {
                let mut cols = Vec::new();
                for w in 0..10 {
                    cols.push(
                        (0..3)
                            .map(|c| (b * 1000 + h * 100 + w * 10 + c) as f64)
                            .collect::<Vec<_>>(),
                    );
                }
                rows.push(cols);
            }
            nested.push(rows);
        }
        let text = serde_json::to_string(&nested).unwrap();
        let ds = load_dataset(text.as_bytes(), DataFormat::Json, false, &g).unwrap();
        let t = &ds.inputs()[0];
        assert_eq!(t.shape(), &[2, 3, 10, 10]);
        assert_eq!(t.get(&[1, 2, 3, 4]), 1342.0);
        assert!(load_dataset(text.as_bytes(), DataFormat::Json, true, &g).is_err());
    }

    #[test]
    fn json_empty_is_no_instances() {
        let err = load_dataset("[]".as_bytes(), DataFormat::Json, true, &tabular(2)).unwrap_err();
        assert!(err.to_string().contains("no instances"));
        let err = load_dataset("".as_bytes(), DataFormat::Json, true, &tabular(2)).unwrap_err();
        assert!(err.to_string().contains("no instances"));
    }

    #[test]
    fn json_object_with_ids() {
        let text = r#"{"ids": ["a", "b"], "inputs": [[[1, 2], [3, 4]]]}"#;
        let ds = load_dataset(text.as_bytes(), DataFormat::Json, true, &tabular(2)).unwrap();
        assert_eq!(ds.ids(), &["a", "b"]);
    }
}
