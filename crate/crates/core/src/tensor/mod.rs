//! Dense row-major tensors and the kernels the engine is built from.
//!
//! Values are stored as `f64`. A tensor in [`Precision::Single`] keeps every
//! stored value rounded to the nearest `f32`; kernels accumulate in `f64` and
//! round once when they write their output, so results are reproducible per
//! precision regardless of thread count.

mod kernels;

pub use kernels::{
    avgpool2d, avgpool2d_adjoint, conv2d, conv2d_input_adjoint, matmul, maxpool2d,
    maxpool2d_adjoint, permute_channels_first, permute_channels_last, ConvGeometry, Padding,
    PoolGeometry,
};
pub(crate) use kernels::{
    avgpool2d_adjoint_with_geometry, avgpool2d_with_geometry, conv2d_adjoint_with_geometry,
    conv2d_with_geometry, maxpool2d_with_geometry,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Numerical precision of stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    /// Threshold below which a difference-from-reference is treated as zero.
    pub fn rescale_threshold(self) -> f64 {
        match self {
            Precision::Single => 1e-7,
            Precision::Double => 1e-10,
        }
    }

    pub fn max(self, other: Precision) -> Precision {
        if self == Precision::Double || other == Precision::Double {
            Precision::Double
        } else {
            Precision::Single
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "float" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Argument(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rounding `data` to `precision`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero-sized axis")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values but {} were given",
                data.len()
            )));
        }
        let mut t = Tensor {
            shape,
            data,
            precision,
        };
        t.round_in_place();
        Ok(t)
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, Precision::Double)
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            precision,
        }
    }

    pub fn filled(shape: &[usize], value: f64, precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![precision.round(value); n],
            precision,
        }
    }

    /// Internal constructor for kernels: rounds but skips validation.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut t = Tensor {
            shape,
            data,
            precision,
        };
        t.round_in_place();
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(
                i < d,
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            );
            off = off * d + i;
        }
        off
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.clone(), precision)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    pub(crate) fn into_reshaped(mut self, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise operands have shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(
            self.shape.clone(),
            data,
            self.precision.max(other.precision),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        let p = self.precision;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = p.round(*a + b);
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of one entry along axis 0 (one instance of a batched tensor).
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut precision = first.precision;
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            precision = precision.max(t.precision);
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_raw(shape, data, precision))
    }

    /// Selects rows (axis 0) by index.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let n = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            precision: self.precision,
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn round_in_place(&mut self) {
        if self.precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }
}
