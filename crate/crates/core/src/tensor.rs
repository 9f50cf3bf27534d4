//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff tape and the tape-free inference path.

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new([rows.len(), cols], rows.concat())
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
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Splits the shape into (batch, rows, cols) for rank ≥ 2 tensors.
    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim(op, &self.shape, &[]));
        }
        let batch = self.shape[..r - 2].iter().product();
        Ok((batch, self.shape[r - 2], self.shape[r - 1]))
    }

    /// Batched matrix product `[…, m, p] @ […, p, n]`.
    ///
    /// Batch dimensions must match exactly, or one operand must be a plain
    /// 2-D matrix that is then shared across the other's batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ba, m, p) = self.matrix_dims("matmul")?;
        let (bb, p2, n) = rhs.matrix_dims("matmul")?;
        let err = || Error::dim("matmul", &self.shape, &rhs.shape);
        if p != p2 {
            return Err(err());
        }
        let (batch, mut out_shape) = match (self.rank(), rhs.rank()) {
            (2, 2) => (1, Vec::new()),
            (2, rb) => (bb, rhs.shape[..rb - 2].to_vec()),
            (ra, 2) => (ba, self.shape[..ra - 2].to_vec()),
            (ra, rb) => {
                if self.shape[..ra - 2] != rhs.shape[..rb - 2] {
                    return Err(err());
                }
                (ba, self.shape[..ra - 2].to_vec())
            }
        };
        out_shape.extend([m, n]);
        let a_stride = if self.rank() == 2 { 0 } else { m * p };
        let b_stride = if rhs.rank() == 2 { 0 } else { p * n };
        let mut out = vec![0.0; batch * m * n];
        let (a, b) = (&self.data, &rhs.data);
        par::for_each_row_mut(&mut out, n, |r, row| {
            let (bi, i) = (r / m, r % m);
            let a_row = &a[bi * a_stride + i * p..][..p];
            let b_mat = &b[bi * b_stride..][..p * n];
            for (l, &av) in a_row.iter().enumerate() {
                let b_row = &b_mat[l * n..][..n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        });
        Tensor::new(out_shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let (batch, m, n) = self.matrix_dims("transpose")?;
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let mut out = vec![0.0; self.numel()];
        for bi in 0..batch {
            let src = &self.data[bi * m * n..][..m * n];
            let dst = &mut out[bi * m * n..][..m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Tensor::new(shape, out)
    }

    /// (outer, axis length, inner) decomposition around `axis`.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Sums along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = self.axis_split(axis)?.1;
        let s = self.sum_axis(axis)?;
        Ok(s.map(|x| x / len as f64))
    }

    /// Repeats the tensor `len` times along a new axis at position `axis`.
    pub fn expand_axis(&self, axis: usize, len: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(Error::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut out = Vec::with_capacity(self.numel() * len);
        for o in 0..outer {
            let src = &self.data[o * inner..][..inner];
            for _ in 0..len {
                out.extend_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, len);
        Tensor::new(shape, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Logistic sigmoid evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_shares_2d_rhs() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[1., 1.]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }

    #[test]
    fn reductions() {
        let x = Tensor::ones([2, 3]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[3., 3.]);
        assert_eq!(t(&[3], &[1., 2., 3.]).mean_axis(0).unwrap().data(), &[2.]);
        assert!(matches!(x.sum_axis(2), Err(Error::Axis { .. })));
    }

    #[test]
    fn transpose_and_expand() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(
            x.transpose_last2().unwrap().data(),
            &[1., 4., 2., 5., 3., 6.]
        );
        let e = t(&[2], &[1., 2.]).expand_axis(1, 3).unwrap();
        assert_eq!(e.shape(), &[2, 3]);
        assert_eq!(e.data(), &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
