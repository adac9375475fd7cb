//! Raw numeric kernels behind the tape ops. Nothing here records gradients.
//!
//! Convolution is lowered to im2col + GEMM per sample. Batch samples are
//! processed in parallel, but every output element is produced by the same
//! sequence of floating-point operations regardless of thread count, and
//! cross-sample reductions always run in sample order.

use rayon::prelude::*;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Stride, zero padding and dilation, applied identically to both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with the padding that preserves spatial size for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, input: [usize; 2], kernel: [usize; 2]) -> Result<[usize; 2]> {
        match (
            self.output_len(input[0], kernel[0]),
            self.output_len(input[1], kernel[1]),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok([h, w]),
            _ => Err(AutodiffError::OutputSize {
                input,
                kernel: kernel[0],
                kernel_w: kernel[1],
                stride: self.stride,
                padding: self.padding,
                dilation: self.dilation,
            }),
        }
    }

    fn is_pointwise(&self, kernel: [usize; 2]) -> bool {
        kernel == [1, 1] && self.stride == 1 && self.padding == 0
    }
}

/// Sizes shared by the three convolution kernels.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl ConvDims {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.geom.is_pointwise([self.kh, self.kw])
    }
}

/// Checks conv2d operand shapes and returns the output shape.
pub fn conv2d_output_shape(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<Vec<usize>> {
    let dims = conv_dims(input, weight, geom)?;
    Ok(vec![dims.batch, dims.cout, dims.ho, dims.wo])
}

fn conv_dims(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    let [n, cin, h, w] = as4(input)?;
    let [cout, wcin, kh, kw] = as4(weight)?;
    if cin != wcin {
        return Err(AutodiffError::ChannelMismatch {
            input: cin,
            weight: wcin,
        });
    }
    if kh == 0 || kw == 0 || geom.stride == 0 || geom.dilation == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "conv2d",
            reason: format!("kernel {kh}x{kw} with {geom:?}"),
        });
    }
    let [ho, wo] = geom.output_hw([h, w], [kh, kw])?;
    Ok(ConvDims {
        batch: n,
        cin,
        cout,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        geom,
    })
}

pub(crate) fn as4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(AutodiffError::Rank {
            expected: 4,
            shape: shape.to_vec(),
        }),
    }
}

/// Output columns `[lo, hi)` whose kernel tap `j` lands inside the input row.
fn valid_range(d: &ConvDims, j: usize) -> (usize, usize) {
    let g = d.geom;
    let off = (j * g.dilation) as isize - g.padding as isize;
    let s = g.stride as isize;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    // smallest ox with ox*s + off >= w
    let lim = d.w as isize - off;
    let hi = if lim <= 0 { 0 } else { ((lim + s - 1) / s) as usize };
    (lo.min(d.wo), hi.min(d.wo))
}

/// Fills `cols [k, (oy1-oy0)·wo]` with the patches of output rows `oy0..oy1`.
fn im2col(d: &ConvDims, x: &[f64], oy0: usize, oy1: usize, cols: &mut [f64]) {
    let p = (oy1 - oy0) * d.wo;
    let g = d.geom;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(d, j);
                let base = (j * g.dilation) as isize - g.padding as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[(oy - oy0) * d.wo..(oy - oy0 + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = (lo as isize + base) as usize;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = src[(ox as isize * g.stride as isize + base) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` of output rows `oy0..oy1` into `x`.
fn col2im(d: &ConvDims, cols: &[f64], oy0: usize, oy1: usize, x: &mut [f64]) {
    let p = (oy1 - oy0) * d.wo;
    let g = d.geom;
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(d, j);
                let base = (j * g.dilation) as isize - g.padding as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let line = &src[(oy - oy0) * d.wo..(oy - oy0 + 1) * d.wo];
                    if g.stride == 1 {
                        let start = (lo as isize + base) as usize;
                        for (o, v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *o += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[(ox as isize * g.stride as isize + base) as usize] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output-row blocks sized so one block of im2col columns stays cache-resident.
fn row_blocks(d: &ConvDims) -> impl Iterator<Item = (usize, usize)> {
    const BLOCK_ELEMS: usize = 1 << 16;
    let rows = (BLOCK_ELEMS / (d.cols_rows() * d.wo).max(1)).clamp(1, d.ho.max(1));
    let ho = d.ho;
    (0..ho).step_by(rows).map(move |r| (r, (r + rows).min(ho)))
}

/// `c = a·b + beta·c` with `a`, `b` strided views and `c` row-major with row stride `c_stride`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_stride: usize,
) {
    debug_assert!(m == 0 || n == 0 || (m - 1) * c_stride + n <= c.len());
    // SAFETY: the strided views lie within the slices by construction of the
    // callers (a: m×k, b: k×n, c: m×n row-major), checked in debug builds.
    debug_assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_stride as isize,
            1,
        );
    }
}

/// Cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let d = conv_dims(input.shape(), weight.shape(), geom)?;
    let (k, p) = (d.cols_rows(), d.positions());
    let in_per = d.cin * d.h * d.w;
    let out_per = d.cout * p;
    let mut out = vec![0.0; d.batch * out_per];
    let w = weight.data();
    out.par_chunks_mut(out_per.max(1))
        .zip(input.data().par_chunks(in_per.max(1)))
        .for_each(|(o, x)| {
            if d.pointwise() {
                gemm(d.cout, k, p, w, (k, 1), x, (p, 1), 0.0, o, p);
                return;
            }
            let mut cols = Vec::new();
            for (oy0, oy1) in row_blocks(&d) {
                let n = (oy1 - oy0) * d.wo;
                cols.resize(k * n, 0.0);
                im2col(&d, x, oy0, oy1, &mut cols);
                gemm(d.cout, k, n, w, (k, 1), &cols, (n, 1), 0.0, &mut o[oy0 * d.wo..], p);
            }
        });
    Tensor::new(vec![d.batch, d.cout, d.ho, d.wo], out)
}

/// Gradient of conv2d with respect to its input (a transposed convolution).
/// `input_shape` is the shape of the original conv2d input.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    geom: ConvGeom,
    input_shape: &[usize],
) -> Result<Tensor> {
    let d = conv_dims(input_shape, weight.shape(), geom)?;
    expect_shape("conv2d_input_grad", grad_out.shape(), &[d.batch, d.cout, d.ho, d.wo])?;
    let (k, p) = (d.cols_rows(), d.positions());
    let in_per = d.cin * d.h * d.w;
    let out_per = d.cout * p;
    let mut dx = vec![0.0; d.batch * in_per];
    let w = weight.data();
    dx.par_chunks_mut(in_per.max(1))
        .zip(grad_out.data().par_chunks(out_per.max(1)))
        .for_each(|(dxn, g)| {
            if d.pointwise() {
                gemm(k, d.cout, p, w, (1, k), g, (p, 1), 0.0, dxn, p);
                return;
            }
            let mut cols = Vec::new();
            for (oy0, oy1) in row_blocks(&d) {
                let n = (oy1 - oy0) * d.wo;
                cols.resize(k * n, 0.0);
                gemm(k, d.cout, n, w, (1, k), &g[oy0 * d.wo..], (p, 1), 0.0, &mut cols, n);
                col2im(&d, &cols, oy0, oy1, dxn);
            }
        });
    Tensor::new(input_shape.to_vec(), dx)
}

/// Gradient of conv2d with respect to its weight.
/// `weight_shape` is the shape of the original conv2d weight.
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    weight_shape: &[usize],
) -> Result<Tensor> {
    let d = conv_dims(input.shape(), weight_shape, geom)?;
    expect_shape("conv2d_weight_grad", grad_out.shape(), &[d.batch, d.cout, d.ho, d.wo])?;
    let (k, p) = (d.cols_rows(), d.positions());
    let in_per = d.cin * d.h * d.w;
    let out_per = d.cout * p;
    let partials: Vec<Vec<f64>> = input
        .data()
        .par_chunks(in_per.max(1))
        .zip(grad_out.data().par_chunks(out_per.max(1)))
        .map(|(x, g)| {
            let mut dw = vec![0.0; d.cout * k];
            if d.pointwise() {
                gemm(d.cout, p, k, g, (p, 1), x, (1, p), 0.0, &mut dw, k);
                return dw;
            }
            let mut cols = Vec::new();
            for (b, (oy0, oy1)) in row_blocks(&d).enumerate() {
                let n = (oy1 - oy0) * d.wo;
                cols.resize(k * n, 0.0);
                im2col(&d, x, oy0, oy1, &mut cols);
                let beta = if b == 0 { 0.0 } else { 1.0 };
                gemm(d.cout, n, k, &g[oy0 * d.wo..], (p, 1), &cols, (1, n), beta, &mut dw, k);
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; d.cout * k];
    for part in &partials {
        for (acc, v) in dw.iter_mut().zip(part) {
            *acc += v;
        }
    }
    Tensor::new(weight_shape.to_vec(), dw)
}

fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: want.to_vec(),
            right: got.to_vec(),
        });
    }
    Ok(())
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if factor == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "upsample_nearest",
            reason: "factor must be positive".into(),
        });
    }
    let (ho, wo) = (h * factor, w * factor);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ho {
            let row = &src[base + (y / factor) * w..base + (y / factor + 1) * w];
            for x in 0..wo {
                out.push(row[x / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Sums non-overlapping `factor × factor` blocks; the adjoint of [`upsample_nearest`].
pub fn sum_pool(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "sum_pool",
            reason: format!("factor {factor} does not divide {h}x{w}"),
        });
    }
    let (ho, wo) = (h / factor, w / factor);
    let src = input.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            for x in 0..w {
                dst[(y / factor) * wo + x / factor] += src[base + y * w + x];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or(AutodiffError::Empty("concat_channels"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        total += tc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

/// Channels `[start, start + len)` of a `[N,C,H,W]` tensor.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if start + len > c {
        return Err(AutodiffError::Index {
            index: start + len,
            len: c,
        });
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for s in 0..n {
        let base = (s * c + start) * hw;
        out.extend_from_slice(&input.data()[base..base + len * hw]);
    }
    Tensor::new(vec![n, len, h, w], out)
}

/// Embeds `input` at channel offset `start` of a zero tensor with `total` channels;
/// the adjoint of [`slice_channels`].
pub fn pad_channels(input: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if start + c > total {
        return Err(AutodiffError::Index {
            index: start + c,
            len: total,
        });
    }
    let hw = h * w;
    let mut out = vec![0.0; n * total * hw];
    for s in 0..n {
        let base = (s * total + start) * hw;
        out[base..base + c * hw].copy_from_slice(&input.data()[s * c * hw..(s + 1) * c * hw]);
    }
    Tensor::new(vec![n, total, h, w], out)
}

/// Broadcasts a `[C]` vector over `[N,C,H,W]`.
pub fn broadcast_channels(values: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = as4(shape)?;
    if values.len() != c {
        return Err(AutodiffError::ShapeMismatch {
            op: "broadcast_channels",
            left: vec![c],
            right: values.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for _ in 0..n {
        for &v in values.data() {
            out.extend(std::iter::repeat_n(v, hw));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Sums `[N,C,H,W]` down to `[C]`; the adjoint of [`broadcast_channels`].
pub fn sum_channels(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * hw;
            *acc += input.data()[base..base + hw].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], out)
}

/// Sums everything but the leading axis: `[N, ...] -> [N]`.
pub fn sum_per_sample(input: &Tensor) -> Result<Tensor> {
    let n = *input.shape().first().ok_or(AutodiffError::Rank {
        expected: 1,
        shape: input.shape().to_vec(),
    })?;
    let per = input.len().checked_div(n).unwrap_or(0);
    let out = (0..n)
        .map(|s| input.data()[s * per..(s + 1) * per].iter().sum())
        .collect();
    Tensor::new(vec![n], out)
}

/// Repeats each entry of an `[N]` vector over the trailing dims of `shape`.
pub fn expand_per_sample(values: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n = *shape.first().ok_or(AutodiffError::Empty("expand_per_sample"))?;
    if values.len() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "expand_per_sample",
            left: vec![n],
            right: values.shape().to_vec(),
        });
    }
    let per: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(n * per);
    for &v in values.data() {
        out.extend(std::iter::repeat_n(v, per));
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window evaluation, independent of im2col/GEMM.
    fn conv_direct(x: &Tensor, wt: &Tensor, g: ConvGeom) -> Tensor {
        let [n, cin, h, w] = x.dims4().unwrap();
        let [cout, _, kh, kw] = wt.dims4().unwrap();
        let [ho, wo] = g.output_hw([h, w], [kh, kw]).unwrap();
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut idx = 0;
        for s in 0..n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * g.stride + i * g.dilation) as isize
                                        - g.padding as isize;
                                    let ix = (ox * g.stride + j * g.dilation) as isize
                                        - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x.at4(s, c, iy as usize, ix as usize)
                                            * wt.at4(o, c, i, j);
                                    }
                                }
                            }
                        }
                        out.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Tensor::from_fn(shape, |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2001) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn ones_kernel_with_padding() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, ConvGeom::new(1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn dilated_taps() {
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, ConvGeom::new(1, 0, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let x = pseudo(&[2, 3, 6, 6], 3);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &k, ConvGeom::new(2, 1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_path_matches_direct_oracle() {
        for stride in [1, 2] {
            for padding in [0, 1, 2] {
                for dilation in [1, 2, 4] {
                    let g = ConvGeom::new(stride, padding, dilation);
                    let x = pseudo(&[2, 3, 11, 9], 7);
                    for (kh, kw) in [(3, 3), (1, 1), (2, 3)] {
                        let wt = pseudo(&[4, 3, kh, kw], 11);
                        match (conv2d(&x, &wt, g), g.output_hw([11, 9], [kh, kw])) {
                            (Ok(y), Ok(_)) => {
                                let want = conv_direct(&x, &wt, g);
                                let diff = y.zip_map(&want, |a, b| a - b).unwrap().max_abs();
                                assert!(diff < 1e-12, "{g:?} {kh}x{kw}: {diff}");
                            }
                            (Err(_), Err(_)) => {}
                            (a, b) => panic!("{g:?}: {a:?} vs {b:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_shape_formula() {
        for stride in [1, 2] {
            for padding in [0, 1, 2] {
                for dilation in [1, 2, 4] {
                    let g = ConvGeom::new(stride, padding, dilation);
                    for h in 1..20usize {
                        let expect = (h + 2 * padding) as isize - (dilation * 2) as isize - 1;
                        let got = g.output_len(h, 3);
                        if expect < 0 {
                            assert_eq!(got, None);
                        } else {
                            assert_eq!(got, Some(expect as usize / stride + 1));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_and_empty_output_are_errors() {
        let x = Tensor::ones(&[1, 2, 4, 4]);
        assert!(matches!(
            conv2d(&x, &Tensor::ones(&[1, 3, 3, 3]), ConvGeom::new(1, 0, 1)),
            Err(AutodiffError::ChannelMismatch { .. })
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::ones(&[1, 2, 3, 3]), ConvGeom::new(1, 0, 4)),
            Err(AutodiffError::OutputSize { .. })
        ));
    }

    /// <conv(x, w), g> == <x, input_grad(g, w)> == <w, weight_grad(x, g)>
    #[test]
    fn conv_kernels_are_adjoint() {
        let g = ConvGeom::new(2, 1, 2);
        let x = pseudo(&[2, 3, 9, 10], 1);
        let w = pseudo(&[5, 3, 3, 3], 2);
        let y = conv2d(&x, &w, g).unwrap();
        let up = pseudo(y.shape(), 3);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let b0 = dot(&y, &up);
        let b1 = dot(&x, &conv2d_input_grad(&up, &w, g, x.shape()).unwrap());
        let b2 = dot(&w, &conv2d_weight_grad(&x, &up, g, w.shape()).unwrap());
        assert!((b0 - b1).abs() < 1e-10 && (b0 - b2).abs() < 1e-10, "{b0} {b1} {b2}");
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert!(upsample_nearest(&x, 1).unwrap().bitwise_eq(&x));
        let back = sum_pool(&Tensor::ones(&[1, 1, 4, 4]), 2).unwrap();
        assert_eq!(back.data(), &[4.0; 4]);
    }

    #[test]
    fn concat_slice_pad_roundtrip() {
        let a = pseudo(&[2, 1, 3, 3], 5);
        let b = pseudo(&[2, 2, 3, 3], 6);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 3, 3]);
        assert!(slice_channels(&cat, 0, 1).unwrap().bitwise_eq(&a));
        assert!(slice_channels(&cat, 1, 2).unwrap().bitwise_eq(&b));
        let padded = pad_channels(&b, 1, 3).unwrap();
        assert!(slice_channels(&padded, 1, 2).unwrap().bitwise_eq(&b));
        assert_eq!(slice_channels(&padded, 0, 1).unwrap().max_abs(), 0.0);
    }
}
