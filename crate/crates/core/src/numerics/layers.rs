use nalgebra::DMatrix;

use super::Tensor;
use crate::error::{Error, Result};

/// Kernel `[out_ch, in_ch, kh, kw]` and per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Vec<f64>) -> Result<Self> {
        kernel.expect_rank(4, "convolution kernel")?;
        if bias.len() != kernel.shape()[0] {
            return Err(Error::DimensionMismatch {
                expected: kernel.shape()[0],
                actual: bias.len(),
            });
        }
        Ok(ConvParams { kernel, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        ConvParams {
            kernel: Tensor::zeros(&[out_ch, in_ch, kh, kw]),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

/// Output spatial dims of a convolution.
pub fn conv_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "input {h}x{w} with padding {padding} is smaller than kernel {kh}x{kw}"
        )));
    }
    Ok(((h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], params: &ConvParams, stride: usize, padding: usize) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "convolution input must be [N, C, H, W], got {input_shape:?}"
            )));
        }
        let (in_ch, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
        if in_ch != params.in_channels() {
            return Err(Error::Shape(format!(
                "input has {in_ch} channels, kernel expects {}",
                params.in_channels()
            )));
        }
        let (kh, kw) = params.kernel_dims();
        let (oh, ow) = conv_output_dims(h, w, kh, kw, stride, padding)?;
        Ok(ConvGeometry {
            in_ch,
            h,
            w,
            out_ch: params.out_channels(),
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_sample_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_sample_len(&self) -> usize {
        self.out_ch * self.out_pixels()
    }

    /// Unfolds one `[C, H, W]` sample into a `[C·kh·kw, oh·ow]` matrix.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.padding as isize;
                        let out_row = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (oj, v) in out_row.iter_mut().enumerate() {
                            let x = (oj * self.stride + kj) as isize - self.padding as isize;
                            *v = if x < 0 || x >= self.w as isize { 0.0 } else { src[x as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into a sample.
    pub fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for oj in 0..self.ow {
                            let x = (oj * self.stride + kj) as isize - self.padding as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// `out = K · cols + bias` for one sample.
    pub fn forward_sample(&self, params: &ConvParams, cols: &[f64], out: &mut [f64]) {
        let p = self.out_pixels();
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(params.bias[co]);
        }
        gemm(
            self.out_ch,
            self.patch_len(),
            p,
            Operand::plain(params.kernel.data(), self.patch_len()),
            Operand::plain(cols, p),
            out,
            1.0,
        );
    }

    /// Accumulates kernel/bias gradients for one sample and, when requested,
    /// writes the input gradient.
    pub fn backward_sample(
        &self,
        params: &ConvParams,
        cols: &[f64],
        grad_out: &[f64],
        kernel_grad: &mut [f64],
        bias_grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) {
        let p = self.out_pixels();
        let q = self.patch_len();
        for (co, chunk) in grad_out.chunks(p).enumerate() {
            bias_grad[co] += chunk.iter().sum::<f64>();
        }
        // dK += dOut · colsᵀ
        gemm(
            self.out_ch,
            p,
            q,
            Operand::plain(grad_out, p),
            Operand::transposed(cols, p),
            kernel_grad,
            1.0,
        );
        if let Some(input_grad) = input_grad {
            // dCols = Kᵀ · dOut
            let mut dcols = vec![0.0; q * p];
            gemm(
                q,
                self.out_ch,
                p,
                Operand::transposed(params.kernel.data(), q),
                Operand::plain(grad_out, p),
                &mut dcols,
                0.0,
            );
            input_grad.fill(0.0);
            self.col2im(&dcols, input_grad);
        }
    }
}

/// A row-major matrix operand, optionally read transposed.
struct Operand<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Operand<'a> {
    /// Matrix stored row-major with `cols` columns.
    fn plain(data: &'a [f64], cols: usize) -> Self {
        Operand {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a matrix stored row-major with `stored_cols` columns.
    fn transposed(data: &'a [f64], stored_cols: usize) -> Self {
        Operand {
            data,
            row_stride: 1,
            col_stride: stored_cols as isize,
        }
    }
}

/// `C = A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // The strides describe in-bounds accesses of `a.data`/`b.data`, checked by
    // the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of an `[N, C_in, H, W]` batch with `[C_out, C_in, kh, kw]` kernels.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams, stride: usize, padding: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), params, stride, padding)?;
    let n = input.shape()[0];
    let mut out = Tensor::zeros(&[n, geo.out_ch, geo.oh, geo.ow]);
    let mut cols = vec![0.0; geo.patch_len() * geo.out_pixels()];
    for s in 0..n {
        let x = &input.data()[s * geo.in_sample_len()..(s + 1) * geo.in_sample_len()];
        geo.im2col(x, &mut cols);
        let y = &mut out.data_mut()[s * geo.out_sample_len()..(s + 1) * geo.out_sample_len()];
        geo.forward_sample(params, &cols, y);
    }
    Ok(out)
}

/// Gradients of a convolution w.r.t. its input, kernel and bias, summed over the batch.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let geo = ConvGeometry::new(input.shape(), params, stride, padding)?;
    let n = input.shape()[0];
    grad_out.expect_shape(&[n, geo.out_ch, geo.oh, geo.ow])?;
    let mut grads = Conv2dGrads {
        input: Tensor::zeros(input.shape()),
        kernel: Tensor::zeros(params.kernel.shape()),
        bias: vec![0.0; geo.out_ch],
    };
    let mut cols = vec![0.0; geo.patch_len() * geo.out_pixels()];
    for s in 0..n {
        let x = &input.data()[s * geo.in_sample_len()..(s + 1) * geo.in_sample_len()];
        geo.im2col(x, &mut cols);
        let g = &grad_out.data()[s * geo.out_sample_len()..(s + 1) * geo.out_sample_len()];
        let dx = &mut grads.input.data_mut()[s * geo.in_sample_len()..(s + 1) * geo.in_sample_len()];
        geo.backward_sample(params, &cols, g, grads.kernel.data_mut(), &mut grads.bias, Some(dx));
    }
    Ok(grads)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the upstream gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    input.map(sigmoid)
}

/// Gradient through the sigmoid given its forward *output*.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(output.shape())?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_parts(output.shape().to_vec(), data)
}

/// Flat input index of the maximum of every pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaxPoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2×2 stride-2 max pooling over `[N, C, H, W]`; H and W must be even. Ties
/// resolve to the first window position in row-major order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, MaxPoolIndices)> {
    input.expect_rank(4, "max-pool input")?;
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max-pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let x = input.data();
    let y = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for cand in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                y[o] = x[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((
        out,
        MaxPoolIndices {
            input_shape: s.to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to the input position that won the forward max.
pub fn maxpool2x2_backward(indices: &MaxPoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::DimensionMismatch {
            expected: indices.argmax.len(),
            actual: grad_out.len(),
        });
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in indices.argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

/// Linear layer whose weights never change during training.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLinear {
    weight: Tensor,
}

impl FixedLinear {
    pub fn new(weight: Tensor) -> Result<Self> {
        weight.expect_rank(2, "fixed linear weight")?;
        Ok(FixedLinear { weight })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect();
        FixedLinear {
            weight: Tensor::from_parts(vec![m.nrows(), m.ncols()], data).expect("consistent shape"),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Always `false`: optimizers must skip this layer.
    pub fn trainable(&self) -> bool {
        false
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        fixed_linear_forward(input, &self.weight)
    }

    pub fn backward(&self, grad_out: &[f64]) -> Result<Vec<f64>> {
        fixed_linear_backward(grad_out, &self.weight)
    }
}

/// `W·x`
pub fn fixed_linear_forward(input: &[f64], weight: &Tensor) -> Result<Vec<f64>> {
    weight.expect_rank(2, "fixed linear weight")?;
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != cols {
        return Err(Error::DimensionMismatch {
            expected: cols,
            actual: input.len(),
        });
    }
    Ok(weight
        .data()
        .chunks(cols)
        .take(rows)
        .map(|row| row.iter().zip(input).map(|(w, x)| w * x).sum())
        .collect())
}

/// `Wᵀ·g`
pub fn fixed_linear_backward(grad_out: &[f64], weight: &Tensor) -> Result<Vec<f64>> {
    weight.expect_rank(2, "fixed linear weight")?;
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    if grad_out.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            actual: grad_out.len(),
        });
    }
    let mut grad = vec![0.0; cols];
    for (row, &g) in weight.data().chunks(cols).zip(grad_out) {
        for (acc, w) in grad.iter_mut().zip(row) {
            *acc += w * g;
        }
    }
    Ok(grad)
}
