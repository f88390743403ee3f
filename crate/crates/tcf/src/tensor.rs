//! Dense row-major f32 tensors and the handful of kernels the pipeline needs.
//!
//! Every operation is a pure function of its inputs with a fixed summation
//! order, so repeated calls produce bit-identical results:
//! - `matmul` and the convolutions accumulate in f32, summing the inner
//!   dimension left to right;
//! - `softmax_rows`, `layer_norm` and the mean-style reductions accumulate
//!   in f64 (still in index order) and round once back to f32, which keeps
//!   row sums within 1e-6 of 1 even for rows of a few thousand entries.

use crate::error::{Result, TcfError};

/// Dense n-dimensional array of f32, row-major, `data.len() == product(shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TcfError::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| TcfError::Shape(format!("shape {shape:?} overflows")))?;
        if data.len() != n {
            return Err(TcfError::Shape(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of rows / columns of a 2-d tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other` for 2-d tensors, inner extents must match.
    ///
    /// f32 accumulation; each output element sums its K products in index
    /// order, so the result is bit-identical to the naive triple loop.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(TcfError::Shape("matmul expects 2-d tensors".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TcfError::Shape(format!(
                "matmul inner extents {k} vs {k2}"
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        // i-k-j order: same per-element summation order as i-j-k, but
        // walks `other` row-contiguously.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row-wise softmax of a 2-d tensor with per-row max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "softmax_rows expects a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut exps = vec![0f64; n];
            let mut sum = 0f64;
            for (e, &x) in exps.iter_mut().zip(row) {
                *e = f64::from(x - max).exp();
                sum += *e;
            }
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (o, e) in o_row.iter_mut().zip(&exps) {
                *o = (e / sum) as f32;
            }
        }
        out
    }

    /// Per-row layer normalization of an N×C tensor followed by the
    /// `gamma`/`beta` affine. Moments accumulate in f64, index order.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TcfError::Shape("layer_norm expects a matrix".into()));
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TcfError::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} for {c} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(TcfError::Shape("layer_norm eps must be positive".into()));
        }
        let mut out = Tensor::zeros(vec![n, c]);
        for i in 0..n {
            let row = &self.data[i * c..(i + 1) * c];
            let mut sum = 0f64;
            for &x in row {
                sum += f64::from(x);
            }
            let mean = sum / c as f64;
            let mut var = 0f64;
            for &x in row {
                let d = f64::from(x) - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + f64::from(eps)).sqrt();
            let o_row = &mut out.data[i * c..(i + 1) * c];
            for j in 0..c {
                let z = (f64::from(row[j]) - mean) * inv;
                o_row[j] = (z as f32) * gamma.data[j] + beta.data[j];
            }
        }
        Ok(out)
    }

    /// Per-channel 3×3 correlation over a C×H×W map, stride 1, zero padding 1.
    pub fn depthwise_conv3x3(&self, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(TcfError::Shape("depthwise_conv3x3 expects C×H×W".into()));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if weights.shape() != [c, 3, 3] || bias.shape() != [c] {
            return Err(TcfError::Shape(format!(
                "depthwise weights {:?} / bias {:?} for {c} channels",
                weights.shape(),
                bias.shape()
            )));
        }
        let mut out = Tensor::zeros(vec![c, h, w]);
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            let kern = &weights.data[ch * 9..(ch + 1) * 9];
            let o_plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data[ch];
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += kern[ky * 3 + kx] * plane[sy as usize * w + sx as usize];
                        }
                    }
                    o_plane[y * w + x] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Strided cross-correlation: Cin×H×W map, Cout×Cin×k×k weights.
    ///
    /// Accumulation order per output element: channel-major, then kernel
    /// rows, then kernel columns.
    pub fn strided_conv(
        &self,
        weights: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if self.shape.len() != 3 || weights.shape().len() != 4 {
            return Err(TcfError::Shape(
                "strided_conv expects Cin×H×W map and Cout×Cin×k×k weights".into(),
            ));
        }
        let (cin, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (cout, cin2, kh, kw) = (
            weights.shape[0],
            weights.shape[1],
            weights.shape[2],
            weights.shape[3],
        );
        if cin != cin2 || kh != kw || bias.shape() != [cout] {
            return Err(TcfError::Shape(format!(
                "strided_conv weights {:?} / bias {:?} for {cin} input channels",
                weights.shape(),
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(TcfError::Geometry("stride must be positive".into()));
        }
        let k = kh;
        let h_out = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let w_out = (w + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(TcfError::Geometry(format!(
                    "conv geometry: input {h}×{w}, kernel {k}, stride {stride}, padding {padding}"
                )))
            }
        };
        let mut out = Tensor::zeros(vec![cout, h_out, w_out]);
        for co in 0..cout {
            let o_plane = &mut out.data[co * h_out * w_out..(co + 1) * h_out * w_out];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias.data[co];
                    for ci in 0..cin {
                        let plane = &self.data[ci * h * w..(ci + 1) * h * w];
                        let kern =
                            &weights.data[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                        for ky in 0..k {
                            let sy = (oy * stride + ky) as isize - padding as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = (ox * stride + kx) as isize - padding as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += kern[ky * k + kx] * plane[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    o_plane[oy * w_out + ox] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TcfError::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    /// Adds `bias` (length = last extent) to every row of a 2-d tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape.last().unwrap();
        if bias.shape() != [c] {
            return Err(TcfError::Shape(format!(
                "bias shape {:?} for {c} columns",
                bias.shape()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Elementwise GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Tensor {
        const SQRT_2_OVER_PI: f32 = 0.797_884_6;
        const CUBIC: f32 = 0.044_715;
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh());
        }
        out
    }
}
