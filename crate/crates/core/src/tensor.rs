//! Dense row-major arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// A dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return shape_err("tensor", &shape, &[data.len()]);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    /// Identity matrix of size `n × n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { S::ONE } else { S::ZERO })
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return shape_err("reshape", &self.shape, &shape);
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument { op, reason: alloc::format!("expected rank 2, got {:?}", self.shape) }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> S {
        self.data.iter().copied().fold(self.data[0], S::max)
    }

    pub fn min_value(&self) -> S {
        self.data.iter().copied().fold(self.data[0], S::min)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(Error::InvalidArgument { op: "concat", reason: "no inputs".into() })?;
        if axis >= first.rank() {
            return Err(Error::InvalidAxis { op: "concat", axis, rank: first.rank() });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let others_match =
                same_rank && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !others_match {
                return shape_err("concat", &first.shape, &p.shape);
            }
            shape[axis] += p.shape[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Split along `axis` into pieces of the given sizes (inverse of [`Tensor::concat`]).
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { op: "split", axis, rank: self.rank() });
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] {
            return shape_err("split", &self.shape, sizes);
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                data.extend_from_slice(&self.data[base..base + s * inner]);
            }
            out.push(Self { shape, data });
            start += s;
        }
        Ok(out)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { op: "narrow", axis, rank: self.rank() });
        }
        if start + len > self.shape[axis] {
            return shape_err("narrow", &self.shape, &[start, len]);
        }
        let rest = self.shape[axis] - start - len;
        let mut parts = self.split(axis, &[start, len, rest])?;
        Ok(parts.swap_remove(1))
    }
}

impl<S: Scalar> Tensor<S> {
    /// Rows of a rank-2 tensor as slices.
    pub fn rows(&self) -> impl Iterator<Item = &[S]> {
        let c = if self.rank() == 2 { self.shape[1].max(1) } else { self.data.len().max(1) };
        self.data.chunks(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_exact() {
        let a = Tensor::<f32>::from_fn([2, 3, 2], |i| i as f32 * 0.37);
        let b = Tensor::<f32>::from_fn([2, 1, 2], |i| -(i as f32) * 1.1);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        let parts = c.split(1, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn reshape_rejects_wrong_size() {
        let a = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(a.reshape([4, 2]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn narrow_middle() {
        let a = Tensor::<f64>::from_fn([5], |i| i as f64);
        assert_eq!(a.narrow(0, 1, 3).unwrap().data(), &[1.0, 2.0, 3.0]);
    }
}
