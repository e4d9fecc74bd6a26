//! Scalar-generic forward and reverse pass of the cascade.
//!
//! Tensors are channel-major `[C, H, W]` buffers. Convolutions are lowered to
//! GEMM through an im2col buffer; the data-consistency layer runs in
//! k-space through a centered orthonormal FFT, whose adjoint is its inverse.

use std::fmt::Debug;

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::FftNum;

use super::CascadeConfig;
use crate::error::{Error, Result};
use crate::kspace::Fft2Plan;

/// Floating-point type the engine can run in.
pub trait Scalar: Float + FftNum + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    /// Stored as `rows x cols` row-major before transposition.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out (m x n, row-major) = A B` or `out += A B` when `accumulate`.
pub(crate) fn matmul<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }
}

/// Parameter layout: for each cascade, the conv layers of its block in order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub blocks: Vec<Vec<ConvShape>>,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &CascadeConfig) -> Self {
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(config.n_cascades);
        for _ in 0..config.n_cascades {
            let mut layers = Vec::with_capacity(config.n_conv_per_block);
            for l in 0..config.n_conv_per_block {
                let c_in = if l == 0 { 2 } else { config.n_filters };
                let c_out = if l + 1 == config.n_conv_per_block {
                    2
                } else {
                    config.n_filters
                };
                let weight_offset = offset;
                offset += c_out * c_in * config.kernel_size * config.kernel_size;
                let bias_offset = offset;
                offset += c_out;
                layers.push(ConvShape {
                    c_in,
                    c_out,
                    kernel: config.kernel_size,
                    weight_offset,
                    bias_offset,
                });
            }
            blocks.push(layers);
        }
        Self {
            blocks,
            total: offset,
        }
    }
}

fn im2col<T: Scalar>(input: &[T], c_in: usize, h: usize, w: usize, k: usize, col: &mut Vec<T>) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    col.clear();
    col.resize(c_in * k * k * hw, T::zero());
    for ci in 0..c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)).max(0) as usize;
                    for x in x0..x1 {
                        dst_row[x] = src_row[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c_in: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for ci in 0..c_in {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)).max(0) as usize;
                    for x in x0..x1 {
                        dst_row[(x as isize + dx) as usize] =
                            dst_row[(x as isize + dx) as usize] + src_row[x];
                    }
                }
            }
        }
    }
}

/// Measured data for the data-consistency layers of one sample.
pub(crate) struct Measurement<T> {
    pub kspace: Vec<Complex<T>>,
    pub sampled: Vec<bool>,
}

pub(crate) struct Engine<'a, T: Scalar> {
    layout: &'a Layout,
    params: &'a [T],
    height: usize,
    width: usize,
    /// Fraction of predicted k-space kept at sampled positions.
    keep: T,
    plan: Fft2Plan<T>,
}

/// Activations retained for the reverse pass.
pub(crate) struct Tape<T> {
    /// Per cascade: the block input followed by the input of every later conv.
    layer_inputs: Vec<Vec<Vec<T>>>,
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn new(layout: &'a Layout, params: &'a [T], height: usize, width: usize, keep: f64) -> Self {
        assert_eq!(params.len(), layout.total);
        Self {
            layout,
            params,
            height,
            width,
            keep: T::from(keep).unwrap(),
            plan: Fft2Plan::new(height, width),
        }
    }

    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn conv_forward(&self, layer: &ConvShape, input: &[T], col: &mut Vec<T>) -> Vec<T> {
        let hw = self.hw();
        im2col(input, layer.c_in, self.height, self.width, layer.kernel, col);
        let mut out = vec![T::zero(); layer.c_out * hw];
        let weights = &self.params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
        matmul(
            Mat::new(weights, layer.c_out, layer.patch_len()),
            Mat::new(col, layer.patch_len(), hw),
            &mut out,
            false,
        );
        let bias = &self.params[layer.bias_offset..layer.bias_offset + layer.c_out];
        for (co, plane) in out.chunks_mut(hw).enumerate() {
            let b = bias[co];
            for v in plane.iter_mut() {
                *v = *v + b;
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns the gradient
    /// with respect to the layer input.
    fn conv_backward(
        &self,
        layer: &ConvShape,
        input: &[T],
        dout: &[T],
        grad: &mut [T],
        col: &mut Vec<T>,
    ) -> Vec<T> {
        let hw = self.hw();
        let plen = layer.patch_len();
        im2col(input, layer.c_in, self.height, self.width, layer.kernel, col);
        let dw = &mut grad[layer.weight_offset..layer.weight_offset + layer.weight_len()];
        matmul(
            Mat::new(dout, layer.c_out, hw),
            Mat::new(col, plen, hw).t(),
            dw,
            true,
        );
        for (co, plane) in dout.chunks(hw).enumerate() {
            let s: T = plane.iter().copied().sum();
            grad[layer.bias_offset + co] = grad[layer.bias_offset + co] + s;
        }
        let weights = &self.params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
        let mut dcol = vec![T::zero(); plen * hw];
        matmul(
            Mat::new(weights, layer.c_out, plen).t(),
            Mat::new(dout, layer.c_out, hw),
            &mut dcol,
            false,
        );
        let mut din = vec![T::zero(); layer.c_in * hw];
        col2im(&dcol, layer.c_in, self.height, self.width, layer.kernel, &mut din);
        din
    }

    fn to_complex(&self, x: &[T]) -> Vec<Complex<T>> {
        let hw = self.hw();
        (0..hw).map(|i| Complex::new(x[i], x[hw + i])).collect()
    }

    fn split_complex(&self, buf: &[Complex<T>]) -> Vec<T> {
        let hw = self.hw();
        let mut out = vec![T::zero(); 2 * hw];
        for (i, v) in buf.iter().enumerate() {
            out[i] = v.re;
            out[hw + i] = v.im;
        }
        out
    }

    fn data_consistency(&self, pred: &[T], meas: &Measurement<T>) -> Vec<T> {
        let mut k = self.to_complex(pred);
        self.plan.forward(&mut k);
        let take = T::one() - self.keep;
        for ((v, m), &s) in k.iter_mut().zip(&meas.kspace).zip(&meas.sampled) {
            if s {
                *v = if self.keep == T::zero() {
                    *m
                } else {
                    *v * self.keep + *m * take
                };
            }
        }
        self.plan.inverse(&mut k);
        self.split_complex(&k)
    }

    /// Adjoint of the data-consistency map with respect to the prediction.
    fn data_consistency_adjoint(&self, grad: &[T], meas: &Measurement<T>) -> Vec<T> {
        let mut k = self.to_complex(grad);
        self.plan.forward(&mut k);
        for (v, &s) in k.iter_mut().zip(&meas.sampled) {
            if s {
                *v = *v * self.keep;
            }
        }
        self.plan.inverse(&mut k);
        self.split_complex(&k)
    }

    /// Runs the cascade on a 2-channel zero-filled input, optionally
    /// recording a tape for [`Engine::backward`].
    pub fn forward(
        &self,
        zero_filled: &[T],
        meas: &Measurement<T>,
        record: bool,
    ) -> Result<(Vec<T>, Option<Tape<T>>)> {
        let mut col = Vec::new();
        let mut x = zero_filled.to_vec();
        let mut tape = record.then(|| Tape {
            layer_inputs: Vec::with_capacity(self.layout.blocks.len()),
        });
        for (c, block) in self.layout.blocks.iter().enumerate() {
            let mut inputs = Vec::with_capacity(block.len());
            let mut a = x.clone();
            for (l, layer) in block.iter().enumerate() {
                let mut z = self.conv_forward(layer, &a, &mut col);
                if l + 1 < block.len() {
                    for v in z.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                let prev = std::mem::replace(&mut a, z);
                if record {
                    inputs.push(prev);
                }
            }
            let pred: Vec<T> = x.iter().zip(&a).map(|(&u, &r)| u + r).collect();
            if pred.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { cascade: c });
            }
            x = self.data_consistency(&pred, meas);
            if let Some(t) = tape.as_mut() {
                t.layer_inputs.push(inputs);
            }
        }
        Ok((x, tape))
    }

    /// Gradient of a scalar objective with respect to all parameters, given
    /// its gradient with respect to the cascade output.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &[T], meas: &Measurement<T>) -> Vec<T> {
        let mut grad = vec![T::zero(); self.layout.total];
        let mut col = Vec::new();
        let mut g = grad_out.to_vec();
        for (block, inputs) in self.layout.blocks.iter().zip(&tape.layer_inputs).rev() {
            let gp = self.data_consistency_adjoint(&g, meas);
            let mut gz = gp.clone();
            for (l, layer) in block.iter().enumerate().rev() {
                if l + 1 < block.len() {
                    // Input of layer l+1 is the ReLU output of layer l.
                    for (d, &act) in gz.iter_mut().zip(&inputs[l + 1]) {
                        if act <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
                gz = self.conv_backward(layer, &inputs[l], &gz, &mut grad, &mut col);
            }
            g = gp.iter().zip(&gz).map(|(&a, &b)| a + b).collect();
        }
        grad
    }
}

/// Mean over pixels of the squared complex error, with its gradient.
pub(crate) fn mse_with_grad<T: Scalar>(pred: &[T], gt: &[T], pixels: usize) -> (T, Vec<T>) {
    let n = T::from(pixels).unwrap();
    let two = T::from(2.0).unwrap();
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d = p - g;
            loss = loss + d * d;
            two * d / n
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_matmul_matches_manual() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        matmul(Mat::new(&a, 2, 3), Mat::new(&b, 3, 2), &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // A^T B^T with A stored 2x3 and B stored 3x2 gives (3x2)(2x3) = 3x3
        let mut d = [0.0; 9];
        matmul(Mat::new(&a, 2, 3).t(), Mat::new(&b, 3, 2).t(), &mut d, false);
        // row 0 of A^T = [1,4]; B^T columns: [1,0],[0,1],[1,1]
        assert_eq!(&d[..3], &[1.0, 4.0, 5.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (c, h, w, k) = (3, 5, 7, 3);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c * k * k * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut col = Vec::new();
        im2col(&x, c, h, w, k, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut col = Vec::new();
        im2col(&x, 1, 3, 4, 3, &mut col);
        assert_eq!(&col[4 * 12..5 * 12], &x[..]);
        // top-left tap of pixel (0, 0) falls in the zero padding
        assert_eq!(col[0], 0.0);
        // tap (dy=-1, dx=-1) of pixel (1, 1) reads pixel (0, 0)
        assert_eq!(col[5], 0.0);
        assert_eq!(col[6], 1.0);
    }
}
