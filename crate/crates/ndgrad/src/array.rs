use std::fmt;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{NdError, Result};

/// Dense row-major `f64` array of arbitrary rank.
///
/// A rank-0 array (empty shape) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// True when `small` equals the trailing dims of `big`, ignoring leading ones.
fn is_trailing(small: &[usize], big: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let core = &small[first..];
    core.len() <= big.len() && big[big.len() - core.len()..] == *core
}

/// Row-major strides of `shape` left-padded to `rank`, with zero stride on
/// every axis that is broadcast (size 1 or missing).
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[pad + i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NdError::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Walks every element of `out_shape` and hands the caller the flat offsets
/// into up to two broadcast inputs.
fn for_each_offset(
    out_shape: &[usize],
    strides_a: &[usize],
    strides_b: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (strides_a[rank - 1], strides_b[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..total / inner {
        let mut oa = 0;
        let mut ob = 0;
        for (k, &i) in idx.iter().enumerate() {
            oa += i * strides_a[k];
            ob += i * strides_b[k];
        }
        for j in 0..inner {
            f(oa + j * ia, ob + j * ib);
        }
        for k in (0..rank - 1).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(NdError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 array.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 array from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NdError::Invalid(format!(
                    "ragged rows: expected {cols} columns, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Array::new(vec![rows.len(), cols], data)
    }

    /// `n × n` identity.
    pub fn eye(n: usize) -> Self {
        let mut a = Array::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NdError::NonScalarRoot(self.shape.clone()))
        }
    }

    /// Number of rows of a rank-2 array (or length of a rank-1 array).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 array as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.len() / self.rows().max(1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        if numel(shape) != self.len() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary operation with broadcasting.
    pub fn zip_with(
        &self,
        other: &Array,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Array {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shapes(op, &self.shape, &other.shape)?;
        if other.len() == 1 && out_shape == self.shape {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.len() == 1 && out_shape == other.shape {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        // Row broadcast, e.g. a bias added to every row of a batch.
        if out_shape == self.shape && is_trailing(&other.shape, &self.shape) && !other.is_empty() {
            let mut data = Vec::with_capacity(self.len());
            for row in self.data.chunks_exact(other.len()) {
                data.extend(row.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
            }
            return Ok(Array {
                shape: out_shape,
                data,
            });
        }
        if out_shape == other.shape && is_trailing(&self.shape, &other.shape) && !self.is_empty() {
            let mut data = Vec::with_capacity(other.len());
            for row in other.data.chunks_exact(self.len()) {
                data.extend(self.data.iter().zip(row).map(|(&a, &b)| f(a, b)));
            }
            return Ok(Array {
                shape: out_shape,
                data,
            });
        }
        let sa = aligned_strides(&self.shape, &out_shape);
        let sb = aligned_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, &sa, &sb, |oa, ob| {
            data.push(f(self.data[oa], other.data[ob]))
        });
        Ok(Array {
            shape: out_shape,
            data,
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Array> {
        let out = broadcast_shapes("broadcast_to", &self.shape, shape)?;
        if out != shape {
            return Err(NdError::ShapeMismatch {
                op: "broadcast_to",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let sa = aligned_strides(&self.shape, shape);
        let zeros = vec![0; shape.len()];
        let mut data = Vec::with_capacity(numel(shape));
        for_each_offset(shape, &sa, &zeros, |oa, _| data.push(self.data[oa]));
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums broadcast axes away so the result has `shape`; the adjoint of
    /// [`Array::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Array> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let check = broadcast_shapes("sum_to", shape, &self.shape)?;
        if check != self.shape {
            return Err(NdError::ShapeMismatch {
                op: "sum_to",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let n = numel(shape);
        let mut out = vec![0.0; n];
        if n == 1 {
            out[0] = self.data.iter().sum();
        } else if shape.len() <= self.shape.len()
            && self.shape[self.shape.len() - shape.len()..] == *shape
        {
            // Leading-axis broadcast, e.g. a bias gradient.
            for chunk in self.data.chunks_exact(n) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        } else {
            let st = aligned_strides(shape, &self.shape);
            let zeros = vec![0; self.shape.len()];
            let mut i = 0;
            for_each_offset(&self.shape, &st, &zeros, |ot, _| {
                out[ot] += self.data[i];
                i += 1;
            });
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: out,
        })
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.len() as f64
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Array> {
        if axis >= self.rank() {
            return Err(NdError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Array { shape, data: out })
    }

    /// `op(self) · op(other)` for rank-2 arrays, where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Array, trans_a: bool, trans_b: bool) -> Result<Array> {
        let mismatch = || NdError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        if self.rank() != 2 || other.rank() != 2 {
            return Err(mismatch());
        }
        let a = ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data)
            .map_err(|_| mismatch())?;
        let b = ArrayView2::from_shape((other.shape[0], other.shape[1]), &other.data)
            .map_err(|_| mismatch())?;
        let a = if trans_a { a.reversed_axes() } else { a };
        let b = if trans_b { b.reversed_axes() } else { b };
        let (m, k) = a.dim();
        let (k2, n) = b.dim();
        if k != k2 {
            return Err(mismatch());
        }
        let mut data = vec![0.0; m * n];
        {
            let mut c = ArrayViewMut2::from_shape((m, n), &mut data).map_err(|_| mismatch())?;
            general_mat_mul(1.0, &a, &b, 0.0, &mut c);
        }
        Ok(Array {
            shape: vec![m, n],
            data,
        })
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        self.matmul_t(other, false, false)
    }

    pub fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
        let first = parts
            .first()
            .ok_or_else(|| NdError::Invalid("concat of zero arrays".into()))?;
        if axis >= first.rank() {
            return Err(NdError::InvalidAxis {
                op: "concat",
                axis,
                shape: first.shape.clone(),
            });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let compatible = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NdError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Array { shape, data })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Array> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return Err(NdError::InvalidAxis {
                op: "slice_axis",
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Array { shape, data })
    }

    /// Zero-pads along `axis` so that the existing block starts at `start`
    /// and the axis has length `full`. Adjoint of [`Array::slice_axis`].
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Array> {
        if axis >= self.rank() || start + self.shape[axis] > full {
            return Err(NdError::InvalidAxis {
                op: "pad_axis",
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let src = &self.data[o * n * inner..(o + 1) * n * inner];
            let dst = (o * full + start) * inner;
            data[dst..dst + n * inner].copy_from_slice(src);
        }
        Ok(Array { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes("t", &[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shapes("t", &[], &[2, 2]).unwrap(), vec![2, 2]);
        let err = broadcast_shapes("add", &[3, 2], &[4]).unwrap_err();
        assert_eq!(
            err,
            NdError::ShapeMismatch {
                op: "add",
                left: vec![3, 2],
                right: vec![4]
            }
        );
    }

    #[test]
    fn column_broadcast_and_sum_to_are_adjoint() {
        let col = Array::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let row = Array::from_vec(vec![10.0, 20.0, 30.0]);
        let s = col.zip_with(&row, "add", |a, b| a + b).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        assert_eq!(s.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        assert_eq!(s.sum_to(&[2, 1]).unwrap().data(), &[63.0, 66.0]);
        assert_eq!(s.sum_to(&[3]).unwrap().data(), &[23.0, 43.0, 63.0]);
        assert_eq!(s.sum_to(&[]).unwrap().data(), &[129.0]);
    }

    #[test]
    fn matmul_with_transposes() {
        let a = Array::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array::new(vec![2, 3], vec![1., 0., 1., 0., 1., 0.]).unwrap();
        let c = a.matmul_t(&b, false, true).unwrap();
        assert_eq!(c.data(), &[4., 2., 10., 5.]);
        let d = a.matmul_t(&b, true, false).unwrap();
        assert_eq!(d.shape(), &[3, 3]);
        assert_eq!(d.data(), &[1., 4., 1., 2., 5., 2., 3., 6., 3.]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn concat_slice_pad() {
        let a = Array::new(vec![2, 1], vec![1., 2.]).unwrap();
        let b = Array::new(vec![2, 2], vec![3., 4., 5., 6.]).unwrap();
        let c = Array::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let s = c.slice_axis(1, 1, 3).unwrap();
        assert_eq!(s, b);
        let p = s.pad_axis(1, 1, 3).unwrap();
        assert_eq!(p.data(), &[0., 3., 4., 0., 5., 6.]);
    }

    #[test]
    fn sum_axis_middle() {
        let a = Array::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let s = a.sum_axis(1, false).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2., 4., 10., 12.]);
        assert_eq!(a.sum_axis(2, true).unwrap().shape(), &[2, 2, 1]);
    }
}
