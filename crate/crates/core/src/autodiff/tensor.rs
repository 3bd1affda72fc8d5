//! Dense row-major `f64` arrays and their forward kernels.
//!
//! Every kernel here is a pure function of its inputs. The [`Graph`] in
//! `graph.rs` records these kernels and supplies the backward rules; the
//! drift-field pipeline calls them directly because it never needs
//! gradients.
//!
//! [`Graph`]: super::Graph

use serde::{Deserialize, Serialize};

use super::TensorError;

/// A dense multi-dimensional array of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-degenerate and matches
    /// the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyExtent { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self, TensorError> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn check_axis(&self, axis: usize) -> Result<(), TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)?
            .check_finite("add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)?
            .check_finite("sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)?
            .check_finite("mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "div", |a, b| a / b)?
            .check_finite("div")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, TensorError> {
        self.map(|v| v * c).check_finite("scale")
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        self.map(|v| v + c).check_finite("add_scalar")
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn square(&self) -> Result<Tensor, TensorError> {
        self.map(|v| v * v).check_finite("square")
    }

    pub fn exp(&self) -> Result<Tensor, TensorError> {
        self.map(f64::exp).check_finite("exp")
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn log(&self) -> Result<Tensor, TensorError> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain { op: "log" });
        }
        self.map(f64::ln).check_finite("log")
    }

    pub fn sqrt(&self) -> Result<Tensor, TensorError> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.numel() as f64
    }

    fn reduce_axis(
        &self,
        axis: usize,
        init: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = (o * len + k) * inner;
                for i in 0..inner {
                    let slot = &mut out[o * inner + i];
                    *slot = f(*slot, self.data[row + i]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Sum along `axis`, dropping that axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.reduce_axis(axis, 0.0, |a, b| a + b)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let len = self.shape[axis] as f64;
        Ok(self.sum_axis(axis)?.map(|v| v / len))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.reduce_axis(axis, f64::NEG_INFINITY, f64::max)
    }

    /// Index of the first maximum along `axis`, one entry per reduced slot.
    pub(crate) fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                for k in 0..len {
                    let v = self.data[(o * len + k) * inner + i];
                    if v > best {
                        best = v;
                        out[o * inner + i] = k;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| self.data[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (self.data[at(k)] - max).exp();
                    data[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    data[at(k)] /= total;
                }
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .check_finite("softmax")
    }

    /// Euclidean norm along the last axis, dropping it.
    pub fn norm_last(&self) -> Result<Tensor, TensorError> {
        if self.rank() == 0 {
            return Err(TensorError::Axis { axis: 0, rank: 0 });
        }
        Ok(self.square()?.sum_axis(self.rank() - 1)?.map(f64::sqrt))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::Axis { axis: 1, rank });
        }
        let (m, n) = (self.shape[rank - 2], self.shape[rank - 1]);
        let batch = self.numel() / (m * n);
        let mut data = vec![0.0; self.numel()];
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[base + j * m + i] = self.data[base + i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(rank - 2, rank - 1);
        Ok(Tensor { shape, data })
    }

    /// Matrix product over the two trailing axes; any leading axes must match
    /// exactly and are treated as a batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (ra, rb) = (self.rank(), other.rank());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if ra < 2 || ra != rb || self.shape[..ra - 2] != other.shape[..rb - 2] {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch: usize = self.shape[..ra - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let bm = &other.data[b * k * n..(b + 1) * k * n];
            let out = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&bm[p * n..(p + 1) * n]) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let mut shape = self.shape[..ra - 2].to_vec();
        shape.extend([m, n]);
        Tensor { shape, data }.check_finite("matmul")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        first.check_axis(axis)?;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let others_match = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !others_match {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(TensorError::SliceBounds {
                axis,
                start,
                len,
                extent: self.shape[axis],
            });
        }
        let (outer, full, inner) = axis_split(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&self.data[from..from + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Repeats the whole tensor under new leading axes `lead`.
    pub fn broadcast_leading(&self, lead: &[usize]) -> Result<Tensor, TensorError> {
        if lead.contains(&0) {
            return Err(TensorError::EmptyExtent {
                shape: lead.to_vec(),
            });
        }
        let copies: usize = lead.iter().product();
        let mut data = Vec::with_capacity(copies * self.numel());
        for _ in 0..copies {
            data.extend_from_slice(&self.data);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&self.shape);
        Ok(Tensor { shape, data })
    }

    /// Inserts an axis of extent `n` at `axis` by repetition.
    pub fn repeat_axis(&self, axis: usize, n: usize) -> Result<Tensor, TensorError> {
        if axis > self.rank() || n == 0 {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&self.data[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, n);
        Ok(Tensor { shape, data })
    }
}
