//! Dense row-major `f64` tensors and the raw kernels the tape builds on.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per rayon task in the matmul kernels. Row blocks are independent,
/// so results are bitwise identical for any thread count.
const ROW_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape { op: "tensor", detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()) });
        }
        Ok(Self { shape, data })
    }

    /// Builds an `rows x cols` matrix; panics if `data` has the wrong length.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { shape: vec![rows, cols], data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_rows(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_rows(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (first dimension; 1 for scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count of a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_rows(c, r, out)
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert!(start <= end && end <= c);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::from_rows(r, w, out)
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::Shape { op: "concat_cols", detail: format!("{} rows vs {} rows", self.rows(), other.rows()) });
        }
        let (r, p, q) = (self.rows(), self.cols(), other.cols());
        let mut out = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(other.row(i));
        }
        Ok(Tensor::from_rows(r, p + q, out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape { op: "matmul", detail: format!("[{m}x{k}] x [{k2}x{n}]") });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_rows(m, n, out))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`. Zero entries of `a` are skipped, which
/// matters for sparse bag-of-words inputs.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 || m == 0 {
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(chunk, block)| {
        let row0 = chunk * ROW_CHUNK;
        for (r, out_row) in block.chunks_mut(n).enumerate() {
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
}

/// `out[k x n] += a[m x k]^T * g[m x n]`.
pub(crate) fn matmul_at_b_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &gv) in o.iter_mut().zip(g_row) {
                *ov += av * gv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`.
pub(crate) fn matmul_a_bt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 {
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * k).enumerate().for_each(|(chunk, block)| {
        let row0 = chunk * ROW_CHUNK;
        for (r, out_row) in block.chunks_mut(k).enumerate() {
            let g_row = &g[(row0 + r) * n..(row0 + r + 1) * n];
            for (p, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                *o += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn slice_then_concat_round_trips() {
        let t = Tensor::from_rows(3, 4, (0..12).map(f64::from).collect());
        let back = t.slice_cols(0, 1).concat_cols(&t.slice_cols(1, 4)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn transpose_kernels_agree_with_explicit_transpose() {
        let a = Tensor::from_rows(3, 2, vec![1.0, 2.0, 0.0, -1.0, 4.0, 0.5]);
        let g = Tensor::from_rows(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let mut out = vec![0.0; 8];
        matmul_at_b_into(a.data(), g.data(), &mut out, 3, 2, 4);
        assert_eq!(out, a.transpose().matmul(&g).unwrap().into_data());

        let b = Tensor::from_rows(5, 4, (0..20).map(|v| (v as f64).sin()).collect());
        let mut out = vec![0.0; 15];
        matmul_a_bt_into(g.data(), b.data(), &mut out, 3, 5, 4);
        let expect = g.matmul(&b.transpose()).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
