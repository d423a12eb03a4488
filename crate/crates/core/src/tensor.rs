//! Dense row-major tensors and the forward kernels used by the tape.
//!
//! Storage is always `f64`. Reduced precision is emulated by the tape, which
//! rounds every recorded value through `f32` when asked to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {:?} needs {} elements, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range on axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `[..., K] x [K, M] -> [..., M]`
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() == 0 || rhs.rank() != 2 || *self.shape.last().unwrap() != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let k = rhs.shape[0];
        let m = rhs.shape[1];
        let rows = self.len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let a_row = &self.data[r * k..(r + 1) * k];
            let o_row = &mut out[r * m..(r + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = m;
        Ok(Tensor { shape, data: out })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("bad permutation {perm:?} for shape {:?}", self.shape),
            ));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[src]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                src += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Expands size-1 axes to `shape`. Ranks must match.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.rank()
            || self
                .shape
                .iter()
                .zip(shape)
                .any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::shape("broadcast_to", &self.shape, shape));
        }
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = self
            .shape
            .iter()
            .zip(&in_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..n {
            data.push(self.data[src]);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                src += src_strides[d];
                if idx[d] < shape[d] {
                    break;
                }
                src -= src_strides[d] * shape[d];
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums out broadcast axes so the result has `shape`; inverse of
    /// [`Tensor::broadcast_to`].
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.rank()
            || self
                .shape
                .iter()
                .zip(shape)
                .any(|(&s, &t)| s != t && t != 1)
        {
            return Err(Error::shape("reduce_to", &self.shape, shape));
        }
        let mut out = Tensor::zeros(shape);
        let out_strides = strides(shape);
        let dst_strides: Vec<usize> = shape
            .iter()
            .zip(&out_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let mut idx = vec![0usize; self.rank()];
        let mut dst = 0usize;
        for &v in &self.data {
            out.data[dst] += v;
            for d in (0..self.rank()).rev() {
                idx[d] += 1;
                dst += dst_strides[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                dst -= dst_strides[d] * self.shape[d];
                idx[d] = 0;
            }
        }
        Ok(out)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("sum", axis)?;
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Inverse of [`Tensor::sum_axis`]: repeats values along a new axis.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(Error::invalid(
                "expand_axis",
                format!("axis {axis} for shape {:?}", self.shape),
            ));
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, n);
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis("slice", axis)?;
        if start + len > self.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} exceeds extent {} of {:?}",
                    start + len,
                    self.shape[axis],
                    self.shape
                ),
            ));
        }
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        first.check_axis("concat", axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis];
                data.extend_from_slice(&p.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Writes `src` into the `start..start+len` range of `axis` (accumulating).
    pub(crate) fn accumulate_slice(&mut self, src: &Tensor, axis: usize, start: usize) {
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let len = src.shape[axis];
        for o in 0..outer {
            let dst = (o * n + start) * inner;
            let s = o * len * inner;
            for i in 0..len * inner {
                self.data[dst + i] += src.data[s + i];
            }
        }
    }

    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let n = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("log_softmax", "rank-0 input"))?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Causal depthwise convolution. `self` is `[B, C, T]`, `weight` is
    /// `[C, K]` and `bias` is `[C]`. Tap `K-1` multiplies the current time
    /// step; tap `K-1-s` multiplies the step `s` positions earlier.
    pub fn conv1d_causal(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 2 || weight.shape[0] != self.shape[1] {
            return Err(Error::shape("conv1d", &self.shape, &weight.shape));
        }
        if bias.shape != [self.shape[1]] {
            return Err(Error::shape("conv1d", &self.shape, &bias.shape));
        }
        let (b, c, t) = (self.shape[0], self.shape[1], self.shape[2]);
        let k = weight.shape[1];
        let mut out = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let x = &self.data[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let w = &weight.data[ci * k..(ci + 1) * k];
                let o = &mut out[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                for (ti, ov) in o.iter_mut().enumerate() {
                    let mut acc = bias.data[ci];
                    for (kk, &wv) in w.iter().enumerate() {
                        let back = k - 1 - kk;
                        if ti >= back {
                            acc += wv * x[ti - back];
                        }
                    }
                    *ov = acc;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Row lookup: `self` is `[V, D]`, result is `[ids_shape..., D]`.
    pub fn embedding(&self, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be rank 2, got {:?}", self.shape),
            ));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::shape("embedding", ids_shape, &[ids.len()]));
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: v,
                });
            }
            data.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(Tensor { shape, data })
    }

    /// Picks one entry per row along the last axis.
    pub fn take_along_last(&self, idx: &[usize]) -> Result<Tensor> {
        let n = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("take_along_last", "rank-0 input"))?;
        let rows = self.len() / n.max(1);
        if idx.len() != rows {
            return Err(Error::shape("take_along_last", &self.shape, &[idx.len()]));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::invalid(
                    "take_along_last",
                    format!("index {i} >= {n}"),
                ));
            }
            data.push(self.data[r * n + i]);
        }
        Ok(Tensor {
            shape: self.shape[..self.rank() - 1].to_vec(),
            data,
        })
    }

    pub(crate) fn round_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(50.0) - 50.0).abs() < 1e-15);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 6], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let w = Tensor::from_fn(&[3, 4], |i| if i[1] == 3 { 1.0 } else { 0.0 });
        let y = x.conv1d_causal(&w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shift_tap() {
        // weight on tap K-2 = previous position
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = x.conv1d_causal(&w, &Tensor::full(&[1], 0.5)).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn permute_and_broadcast() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64);
        let p = x.permute(&[0, 2, 1]).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3]);
        assert_eq!(p.get(&[1, 3, 2]), x.get(&[1, 2, 3]));
        let back = p.permute(&[0, 2, 1]).unwrap();
        assert_eq!(back, x);

        let r = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = r.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(b.reduce_to(&[2, 1]).unwrap().data(), &[3.0, 6.0]);
        assert!(r.broadcast_to(&[3, 3]).is_err());
    }

    #[test]
    fn shape_errors_name_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2, 3]"));
        assert!(a.matmul(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn slice_concat_roundtrip() {
        let x = Tensor::from_fn(&[2, 5, 3], |i| (i[0] * 15 + i[1] * 3 + i[2]) as f64);
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[3, 7], |i| ((i[0] * 7 + i[1]) as f64).sin() * 20.0);
        let s = x.softmax_last().unwrap();
        for row in s.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
