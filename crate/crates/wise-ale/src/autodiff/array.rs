//! Shape-tagged dense arrays, the sole numeric carrier of the crate.
//!
//! Arrays are row-major `f64` buffers with NumPy-style broadcasting for
//! binary operations. A scalar is an array with an empty shape and one
//! element.

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Builds an array from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(DenseArray { shape, data })
    }

    /// Scalar array (empty shape, one element).
    pub fn scalar(value: f64) -> Self {
        DenseArray {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// 2-D array from nested rows. Panics if the rows are ragged; intended
    /// for literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        DenseArray {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when the array carries exactly one element with an empty shape.
    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar array.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Element at a 2-D index.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        DenseArray::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine of same-shape arrays.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place elementwise accumulate of a same-shape array.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Strides in elements for row-major layout.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1usize;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim;
    }
    strides
}

/// Broadcast result shape for two operand shapes, aligned from the trailing
/// axis; each pair of extents must match or one of them must be 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = dim_from_end(a, ndim - 1 - i);
        let db = dim_from_end(b, ndim - 1 - i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], pos_from_end: usize) -> usize {
    if pos_from_end < shape.len() {
        shape[shape.len() - 1 - pos_from_end]
    } else {
        1
    }
}

/// Strides of `shape` aligned into an `out_ndim`-dimensional output, with a
/// zero stride wherever the operand is broadcast.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let native = row_major_strides(shape);
    let ndim = out_shape.len();
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let pos_from_end = ndim - 1 - i;
        let d = dim_from_end(shape, pos_from_end);
        if d == out_shape[i] && d != 0 {
            if pos_from_end < shape.len() {
                out[i] = native[shape.len() - 1 - pos_from_end];
            }
        } else {
            // broadcast axis (d == 1)
            out[i] = 0;
        }
    }
    // A dim of 1 matching an output dim of 1 keeps its native stride above,
    // which is harmless (the index along it is always 0).
    out
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(
    op: &'static str,
    a: &DenseArray,
    b: &DenseArray,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseArray> {
    if a.shape == b.shape {
        return Ok(a.zip(b, f));
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..numel {
        data.push(f(a.data[off_a], b.data[off_b]));
        // odometer increment over the output index
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(DenseArray {
        shape: out_shape,
        data,
    })
}

/// Sums `grad` over the axes along which `target_shape` was broadcast,
/// producing an array of exactly `target_shape`. This is the gradient rule
/// for the broadcast operand of a binary op.
pub fn reduce_to_shape(grad: &DenseArray, target_shape: &[usize]) -> DenseArray {
    if grad.shape == target_shape {
        return grad.clone();
    }
    let st = broadcast_strides(target_shape, &grad.shape);
    let mut out = DenseArray::zeros(target_shape);
    let mut idx = vec![0usize; grad.shape.len()];
    let mut off_t = 0usize;
    for i in 0..grad.data.len() {
        out.data[off_t] += grad.data[i];
        for ax in (0..grad.shape.len()).rev() {
            idx[ax] += 1;
            off_t += st[ax];
            if idx[ax] < grad.shape[ax] {
                break;
            }
            off_t -= st[ax] * grad.shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
