use std::fmt;

use crate::error::{Error, Result};

/// Dense rank-4 array in (batch, channel, row, col) order, row-major.
///
/// Plain data: gradient bookkeeping lives on the [`Tape`](crate::autograd::Tape).
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    /// A (1,1,1,1) tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor4 {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements in one (row, col) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [n, c, y, x]: [usize; 4]) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies samples `range` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor4> {
        if start + len > self.n() {
            return Err(Error::config(format!(
                "batch slice {}..{} out of range for batch of {}",
                start,
                start + len,
                self.n()
            )));
        }
        let per = self.shape[1] * self.plane();
        Ok(Tensor4 {
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// Stacks tensors along the batch axis; all must agree on (C, H, W).
    pub fn stack(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("cannot stack an empty tensor list"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::config(format!(
                    "cannot stack shape {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            shape: [n, c, h, w],
            data,
        })
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor4::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(matches!(
            Tensor4::from_vec([1, 2, 2, 2], vec![0.0; 7]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn offsets_are_nchw() {
        let t = Tensor4::from_fn([2, 3, 4, 5], |[n, c, y, x]| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.at([1, 2, 3, 4]), 1234.0);
        assert_eq!(t.data()[t.offset([1, 0, 0, 0])], 1000.0);
    }

    #[test]
    fn stack_and_slice_invert() {
        let a = Tensor4::full([1, 2, 3, 3], 1.0);
        let b = Tensor4::full([2, 2, 3, 3], 2.0);
        let s = Tensor4::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), [3, 2, 3, 3]);
        assert_eq!(s.slice_batch(1, 2).unwrap(), b);
        assert!(s.slice_batch(2, 2).is_err());
    }
}
