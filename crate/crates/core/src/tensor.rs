//! Dense row-major `f64` tensors and 8-bit label maps.
//!
//! Tensors are immutable once built: every operation returns a new value and
//! every validating constructor rejects NaN and infinities, so a diverging
//! computation fails at the op that produced the bad value.

use std::fmt;

use crate::error::{Error, Result};

/// Reserved label meaning "no annotation".
pub const IGNORE_LABEL: u8 = 255;

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                dims,
                reason: "rank must be at least 1",
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "zero extent",
            });
        }
        let mut count: usize = 1;
        for &d in &dims {
            count = match count.checked_mul(d) {
                Some(c) if c <= isize::MAX as usize / std::mem::size_of::<f64>() => c,
                _ => {
                    return Err(Error::InvalidShape {
                        dims,
                        reason: "element count overflows addressable memory",
                    })
                }
            };
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Flat offset of `coords`, or `None` when out of bounds.
    pub fn flat_index(&self, coords: &[usize]) -> Option<usize> {
        if coords.len() != self.0.len() {
            return None;
        }
        let mut idx = 0;
        for (&c, &d) in coords.iter().zip(&self.0) {
            if c >= d {
                return None;
            }
            idx = idx * d + c;
        }
        Some(idx)
    }

    pub fn coords(&self, mut flat: usize) -> Option<Vec<usize>> {
        if flat >= self.numel() {
            return None;
        }
        let mut out = vec![0; self.0.len()];
        for i in (0..self.0.len()).rev() {
            out[i] = flat % self.0[i];
            flat /= self.0[i];
        }
        Some(out)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor with every element equal to `fill`.
    pub fn full(shape: Shape, fill: f64) -> Result<Self> {
        if !fill.is_finite() {
            return Err(Error::NonFinite {
                index: 0,
                value: fill,
            });
        }
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![fill; n],
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                dims: shape.dims().to_vec(),
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(Shape::new(dims)?, data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::from_vec(Shape::scalar(), vec![value])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn get(&self, coords: &[usize]) -> Option<f64> {
        self.shape.flat_index(coords).map(|i| self.data[i])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::LengthMismatch {
                dims: dims.to_vec(),
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Contiguous sub-tensor along the leading axis (`self[index]`).
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        let dims = self.dims();
        if dims.len() < 2 || index >= dims[0] {
            return Err(Error::InvalidAxis {
                axis: index,
                rank: dims.len(),
            });
        }
        let inner: usize = dims[1..].iter().product();
        Ok(Tensor {
            shape: Shape(dims[1..].to_vec()),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::InvalidShape {
            dims: vec![0],
            reason: "cannot stack zero tensors",
        })?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    expected: first.dims().to_vec(),
                    actual: t.dims().to_vec(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(dims)?,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|x| x * factor)
    }

    /// Elementwise `a op b` over identically shaped tensors.
    pub fn map_binary(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                expected: a.dims().to_vec(),
                actual: b.dims().to_vec(),
            });
        }
        let data = match op {
            BinaryOp::Add => zip_with(&a.data, &b.data, |x, y| x + y),
            BinaryOp::Sub => zip_with(&a.data, &b.data, |x, y| x - y),
            BinaryOp::Mul => zip_with(&a.data, &b.data, |x, y| x * y),
            BinaryOp::Div => {
                if let Some(index) = b.data.iter().position(|&y| y == 0.0) {
                    return Err(Error::DivisionByZero { index });
                }
                zip_with(&a.data, &b.data, |x, y| x / y)
            }
        };
        Tensor::from_vec(a.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        Tensor::map_binary(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        Tensor::map_binary(self, other, BinaryOp::Sub)
    }

    /// Reduces over `axes`, removing them from the shape. Reducing every axis
    /// yields a one-element tensor of shape `[1]`.
    ///
    /// Accumulation walks the input in row-major order, so results are
    /// bit-reproducible.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Self> {
        let rank = self.shape.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank || reduced[axis] {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let dims = self.dims();
        let out_dims: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| dims[i]).collect();
        let out_shape = if out_dims.is_empty() {
            Shape::scalar()
        } else {
            Shape(out_dims)
        };
        // stride of each input axis inside the output (0 for reduced axes)
        let mut out_strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            if !reduced[i] {
                out_strides[i] = s;
                s *= dims[i];
            }
        }
        let init = match op {
            ReduceOp::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_shape.numel()];
        let mut coord = vec![0usize; rank];
        let mut out_idx = 0usize;
        for &x in &self.data {
            match op {
                ReduceOp::Max => {
                    if x > out[out_idx] {
                        out[out_idx] = x;
                    }
                }
                _ => out[out_idx] += x,
            }
            // advance the row-major odometer
            for i in (0..rank).rev() {
                coord[i] += 1;
                out_idx += out_strides[i];
                if coord[i] < dims[i] {
                    break;
                }
                out_idx -= out_strides[i] * dims[i];
                coord[i] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let count = (self.numel() / out.len()) as f64;
            for v in &mut out {
                *v /= count;
            }
        }
        Tensor::from_vec(out_shape, out)
    }

    pub fn sum_all(&self) -> f64 {
        let mut acc = 0.0;
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    /// Re-checks every stored value; only fails if an unchecked path leaked a
    /// non-finite value.
    pub fn audit(&self) -> Result<()> {
        check_finite(&self.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// `[h, w]` map of class labels; [`IGNORE_LABEL`] marks unannotated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Shape::new([height, width])?;
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                dims: vec![height, width],
                len: data.len(),
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        LabelMap::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks that every non-ignore label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }
}
