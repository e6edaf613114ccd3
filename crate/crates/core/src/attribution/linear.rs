use crate::error::{Error, Result};
use crate::forward::transpose;
use crate::model::{LayerOp, ModelGraph};
use crate::tensor::{
    avgpool2d_adjoint_with_geometry, avgpool2d_with_geometry, conv2d_adjoint_with_geometry,
    conv2d_with_geometry, matmul, ConvGeometry, PoolGeometry, Tensor,
};

/// Which weights of a linear map take part in a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    All,
    Pos,
    Neg,
}

impl Part {
    #[inline]
    pub fn mask(self, w: f64) -> f64 {
        match self {
            Part::All => w,
            Part::Pos if w > 0.0 => w,
            Part::Neg if w < 0.0 => w,
            _ => 0.0,
        }
    }
}

/// The linear part of a Dense, Conv2D or average-pooling layer, applied
/// without materializing a matrix. Bias is kept apart.
#[derive(Debug, Clone)]
pub enum LinearMap<'a> {
    Dense {
        weight: &'a Tensor,
        bias: Option<&'a Tensor>,
    },
    Conv {
        kernel: &'a Tensor,
        bias: Option<&'a Tensor>,
        geometry: ConvGeometry,
    },
    Avg {
        geometry: PoolGeometry,
    },
}

impl<'a> LinearMap<'a> {
    /// Linear part of layer `idx`. Max pooling maps to its average-pooling
    /// counterpart. Returns `None` for layers without a linear part.
    pub fn of_layer(graph: &'a ModelGraph, idx: usize) -> Result<Option<Self>> {
        let in_shape = || graph.shape(graph.inbound(idx)[0]);
        Ok(Some(match &graph.layer(idx).op {
            LayerOp::Dense { weight, bias, .. } => LinearMap::Dense {
                weight,
                bias: bias.as_ref(),
            },
            LayerOp::Conv2D {
                kernel,
                bias,
                stride,
                padding,
                ..
            } => LinearMap::Conv {
                kernel,
                bias: bias.as_ref(),
                geometry: ConvGeometry::new(in_shape(), kernel.shape(), *stride, *padding)?,
            },
            LayerOp::AvgPool2D { pool, stride } | LayerOp::MaxPool2D { pool, stride } => {
                LinearMap::Avg {
                    geometry: PoolGeometry::new(in_shape(), *pool, *stride)?,
                }
            }
            _ => return Ok(None),
        }))
    }

    fn masked(t: &Tensor, part: Part) -> Tensor {
        match part {
            Part::All => t.clone(),
            p => t.map(|w| p.mask(w)),
        }
    }

    /// `W_part · x` for a batched `x`, bias excluded.
    pub fn forward(&self, x: &Tensor, part: Part) -> Result<Tensor> {
        match self {
            LinearMap::Dense { weight, .. } => {
                check_flat(x, weight.shape()[1])?;
                matmul(x, &transpose(&Self::masked(weight, part)))
            }
            LinearMap::Conv {
                kernel, geometry, ..
            } => {
                let k = Self::masked(kernel, part);
                conv2d_with_geometry(x, k.data(), None, geometry, kernel.precision())
            }
            LinearMap::Avg { geometry } => match part {
                Part::Neg => {
                    let mut shape = vec![x.shape()[0]];
                    shape.extend_from_slice(&geometry.output_shape());
                    Ok(Tensor::zeros(&shape, x.precision()))
                }
                _ => avgpool2d_with_geometry(x, geometry),
            },
        }
    }

    /// `W_partᵀ · u` for a batched upstream `u`.
    pub fn adjoint(&self, u: &Tensor, part: Part) -> Result<Tensor> {
        match self {
            LinearMap::Dense { weight, .. } => {
                check_flat(u, weight.shape()[0])?;
                matmul(u, &Self::masked(weight, part))
            }
            LinearMap::Conv {
                kernel, geometry, ..
            } => {
                let k = Self::masked(kernel, part);
                conv2d_adjoint_with_geometry(u, k.data(), geometry, kernel.precision())
            }
            LinearMap::Avg { geometry } => match part {
                Part::Neg => {
                    let mut shape = vec![u.shape()[0]];
                    shape.extend_from_slice(&geometry.input_shape());
                    Ok(Tensor::zeros(&shape, u.precision()))
                }
                _ => avgpool2d_adjoint_with_geometry(u, geometry),
            },
        }
    }

    /// Adds the masked bias to a batched output of [`Self::forward`].
    pub fn add_bias(&self, z: &mut Tensor, part: Part) {
        let (bias, spatial) = match self {
            LinearMap::Dense { bias, .. } => (*bias, 1),
            LinearMap::Conv { bias, geometry, .. } => (*bias, geometry.out_h * geometry.out_w),
            LinearMap::Avg { .. } => (None, 1),
        };
        let Some(b) = bias else { return };
        let n = b.len();
        let p = z.precision();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            let bj = part.mask(b.data()[(i / spatial) % n]);
            *v = p.round(*v + bj);
        }
    }

    /// Full pre-activation `W·x + b`.
    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.forward(x, Part::All)?;
        self.add_bias(&mut z, Part::All);
        Ok(z)
    }

    pub fn has_bias(&self) -> bool {
        matches!(
            self,
            LinearMap::Dense { bias: Some(_), .. } | LinearMap::Conv { bias: Some(_), .. }
        )
    }
}

fn check_flat(x: &Tensor, n: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != n {
        return Err(Error::dim(format!(
            "dense map expects [batch, {n}], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}
