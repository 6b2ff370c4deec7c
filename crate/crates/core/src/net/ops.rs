//! Numerical kernels with hand-written backward passes.
//!
//! Convolutions lower to GEMM through an im2col buffer. Weight layouts:
//! conv `[out, in, kz, ky, kx]`, transposed conv `[in, out, kz, ky, kx]`.

use crate::net::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// `c = op(a) * op(b) + beta * c`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: shapes and strides describe in-bounds accesses of the slices
    // checked above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved geometry of a (possibly strided, dilated) same-padded conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(in_dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], dilation: [usize; 3]) -> Self {
        let mut padding = [0; 3];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            padding[a] = dilation[a] * (kernel[a] - 1) / 2;
            let span = dilation[a] * (kernel[a] - 1) + 1;
            out_dims[a] = (in_dims[a] + 2 * padding[a] - span) / stride[a] + 1;
        }
        ConvGeometry {
            in_dims,
            out_dims,
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3]
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Input coordinate for output `o` and tap `t` on axis `a`, if in bounds.
    #[inline]
    fn source(&self, a: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride[a] + t * self.dilation[a]) as isize - self.padding[a] as isize;
        (i >= 0 && (i as usize) < self.in_dims[a]).then_some(i as usize)
    }

    /// Valid output x range `[lo, hi)` for tap `tx` when stride is 1.
    #[inline]
    fn x_range_unit_stride(&self, tx: usize) -> (usize, usize, isize) {
        let off = (tx * self.dilation[0]) as isize - self.padding[0] as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((self.in_dims[0] as isize - off).max(0) as usize).min(self.out_dims[0]);
        (lo.min(hi), hi, off)
    }
}

/// Fills `col` (rows = channels x taps, cols = output voxels).
fn im2col(input: &[f64], channels: usize, g: &ConvGeometry, col: &mut [f64]) {
    let nin = g.in_len();
    let nout = g.out_len();
    let [kx, ky, kz] = g.kernel;
    let [ox_n, oy_n, oz_n] = g.out_dims;
    let [ix_n, iy_n, _] = g.in_dims;
    for c in 0..channels {
        let src = &input[c * nin..(c + 1) * nin];
        for tz in 0..kz {
            for ty in 0..ky {
                for tx in 0..kx {
                    let r = c * kz * ky * kx + (tz * ky + ty) * kx + tx;
                    let row = &mut col[r * nout..(r + 1) * nout];
                    for oz in 0..oz_n {
                        let iz = g.source(2, oz, tz);
                        for oy in 0..oy_n {
                            let dst = &mut row[(oz * oy_n + oy) * ox_n..][..ox_n];
                            let iy = g.source(1, oy, ty);
                            let (Some(iz), Some(iy)) = (iz, iy) else {
                                dst.fill(0.0);
                                continue;
                            };
                            let base = (iz * iy_n + iy) * ix_n;
                            if g.stride[0] == 1 {
                                let (lo, hi, off) = g.x_range_unit_stride(tx);
                                dst[..lo].fill(0.0);
                                dst[hi..].fill(0.0);
                                if hi > lo {
                                    let s = (base as isize + lo as isize + off) as usize;
                                    dst[lo..hi].copy_from_slice(&src[s..s + hi - lo]);
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match g.source(0, ox, tx) {
                                        Some(ix) => src[base + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `grad_input`.
fn col2im(col: &[f64], channels: usize, g: &ConvGeometry, grad_input: &mut [f64]) {
    let nin = g.in_len();
    let nout = g.out_len();
    let [kx, ky, kz] = g.kernel;
    let [ox_n, oy_n, oz_n] = g.out_dims;
    let [ix_n, iy_n, _] = g.in_dims;
    for c in 0..channels {
        let dst = &mut grad_input[c * nin..(c + 1) * nin];
        for tz in 0..kz {
            for ty in 0..ky {
                for tx in 0..kx {
                    let r = c * kz * ky * kx + (tz * ky + ty) * kx + tx;
                    let row = &col[r * nout..(r + 1) * nout];
                    for oz in 0..oz_n {
                        let Some(iz) = g.source(2, oz, tz) else { continue };
                        for oy in 0..oy_n {
                            let Some(iy) = g.source(1, oy, ty) else { continue };
                            let src = &row[(oz * oy_n + oy) * ox_n..][..ox_n];
                            let base = (iz * iy_n + iy) * ix_n;
                            if g.stride[0] == 1 {
                                let (lo, hi, off) = g.x_range_unit_stride(tx);
                                if hi > lo {
                                    let s = (base as isize + lo as isize + off) as usize;
                                    for (d, v) in dst[s..s + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                        *d += v;
                                    }
                                }
                            } else {
                                for (ox, v) in src.iter().enumerate() {
                                    if let Some(ix) = g.source(0, ox, tx) {
                                        dst[base + ix] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward(
    input: &Tensor,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    g: &ConvGeometry,
) -> Tensor {
    assert_eq!(input.dims, g.in_dims, "conv input dims");
    let ci = input.channels;
    let rows = ci * g.taps();
    assert_eq!(weight.len(), out_channels * rows, "conv weight size");
    let nout = g.out_len();
    let mut out = Tensor::zeros(input.batch, out_channels, g.out_dims);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * nout] };
    for n in 0..input.batch {
        let x = input.sample(n);
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(x, ci, g, &mut col);
            &col
        };
        let y = out.sample_mut(n);
        for (co, chunk) in y.chunks_exact_mut(nout).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(out_channels, rows, nout, weight, false, cols, false, 1.0, y);
    }
    out
}

/// Returns the input gradient; accumulates weight and bias gradients.
pub fn conv_backward(
    input: &Tensor,
    weight: &[f64],
    out_channels: usize,
    g: &ConvGeometry,
    grad_out: &Tensor,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor {
    let ci = input.channels;
    let rows = ci * g.taps();
    let nout = g.out_len();
    let mut grad_in = Tensor::zeros(input.batch, ci, g.in_dims);
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * nout] };
    let mut gcol = if pointwise { Vec::new() } else { vec![0.0; rows * nout] };
    for n in 0..input.batch {
        let gy = grad_out.sample(n);
        for (co, chunk) in gy.chunks_exact(nout).enumerate() {
            grad_bias[co] += chunk.iter().sum::<f64>();
        }
        let x = input.sample(n);
        if pointwise {
            gemm(out_channels, nout, rows, gy, false, x, true, 1.0, grad_weight);
            gemm(rows, out_channels, nout, weight, true, gy, false, 0.0, grad_in.sample_mut(n));
        } else {
            im2col(x, ci, g, &mut col);
            gemm(out_channels, nout, rows, gy, false, &col, true, 1.0, grad_weight);
            gemm(rows, out_channels, nout, weight, true, gy, false, 0.0, &mut gcol);
            col2im(&gcol, ci, g, grad_in.sample_mut(n));
        }
    }
    grad_in
}

/// Gathers/scatters between a transposed-conv output and its
/// `(out_channels x taps) x input_voxels` matrix form.
fn upsample_scatter(
    mat: &[f64],
    out: &mut [f64],
    co_n: usize,
    in_dims: [usize; 3],
    stride: [usize; 3],
    gather: bool,
    mat_out: &mut [f64],
) {
    let nin: usize = in_dims.iter().product();
    let out_dims = [in_dims[0] * stride[0], in_dims[1] * stride[1], in_dims[2] * stride[2]];
    let nout: usize = out_dims.iter().product();
    let [sx, sy, sz] = stride;
    let taps = sx * sy * sz;
    for co in 0..co_n {
        for tz in 0..sz {
            for ty in 0..sy {
                for tx in 0..sx {
                    let r = co * taps + (tz * sy + ty) * sx + tx;
                    for z in 0..in_dims[2] {
                        for y in 0..in_dims[1] {
                            let oz = z * sz + tz;
                            let oy = y * sy + ty;
                            let obase = co * nout + (oz * out_dims[1] + oy) * out_dims[0];
                            let ibase = r * nin + (z * in_dims[1] + y) * in_dims[0];
                            for x in 0..in_dims[0] {
                                let o = obase + x * sx + tx;
                                if gather {
                                    mat_out[ibase + x] = out[o];
                                } else {
                                    out[o] += mat[ibase + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn upsample_forward(
    input: &Tensor,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    stride: [usize; 3],
) -> Tensor {
    let ci = input.channels;
    let taps: usize = stride.iter().product();
    let rows = out_channels * taps;
    assert_eq!(weight.len(), ci * rows, "upsample weight size");
    let nin = input.spatial();
    let out_dims = [
        input.dims[0] * stride[0],
        input.dims[1] * stride[1],
        input.dims[2] * stride[2],
    ];
    let mut out = Tensor::zeros(input.batch, out_channels, out_dims);
    let nout: usize = out_dims.iter().product();
    let mut mat = vec![0.0; rows * nin];
    for n in 0..input.batch {
        gemm(rows, ci, nin, weight, true, input.sample(n), false, 0.0, &mut mat);
        let y = out.sample_mut(n);
        for (co, chunk) in y.chunks_exact_mut(nout).enumerate() {
            chunk.fill(bias[co]);
        }
        upsample_scatter(&mat, y, out_channels, input.dims, stride, false, &mut []);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_backward(
    input: &Tensor,
    weight: &[f64],
    out_channels: usize,
    stride: [usize; 3],
    grad_out: &Tensor,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor {
    let ci = input.channels;
    let taps: usize = stride.iter().product();
    let rows = out_channels * taps;
    let nin = input.spatial();
    let nout = grad_out.spatial();
    let mut grad_in = Tensor::zeros(input.batch, ci, input.dims);
    let mut gmat = vec![0.0; rows * nin];
    let mut gy = vec![0.0; grad_out.channels * nout];
    for n in 0..input.batch {
        gy.copy_from_slice(grad_out.sample(n));
        for (co, chunk) in gy.chunks_exact(nout).enumerate() {
            grad_bias[co] += chunk.iter().sum::<f64>();
        }
        upsample_scatter(&[], &mut gy, out_channels, input.dims, stride, true, &mut gmat);
        gemm(ci, rows, nin, weight, false, &gmat, false, 0.0, grad_in.sample_mut(n));
        gemm(ci, nin, rows, input.sample(n), false, &gmat, true, 1.0, grad_weight);
    }
    grad_in
}

/// Saved state of an instance-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_forward(input: &Tensor, scale: &[f64], shift: &[f64]) -> (Tensor, NormCache) {
    let s = input.spatial() as f64;
    let mut xhat = input.clone();
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(input.batch * input.channels);
    for n in 0..input.batch {
        for c in 0..input.channels {
            let x = input.channel(n, c);
            let mean = x.iter().sum::<f64>() / s;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.channel_mut(n, c);
            for (h, v) in xh.iter_mut().zip(x) {
                *h = (v - mean) * is;
            }
            let (g, b) = (scale[c], shift[c]);
            for (o, h) in out.channel_mut(n, c).iter_mut().zip(xhat.channel(n, c)) {
                *o = g * h + b;
            }
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    scale: &[f64],
    grad_out: &Tensor,
    grad_scale: &mut [f64],
    grad_shift: &mut [f64],
) -> Tensor {
    let xhat = &cache.xhat;
    let s = xhat.spatial() as f64;
    let mut grad_in = Tensor::zeros(xhat.batch, xhat.channels, xhat.dims);
    for n in 0..xhat.batch {
        for c in 0..xhat.channels {
            let gy = grad_out.channel(n, c);
            let xh = xhat.channel(n, c);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (g, h) in gy.iter().zip(xh) {
                sum_g += g;
                sum_gx += g * h;
            }
            grad_shift[c] += sum_g;
            grad_scale[c] += sum_gx;
            let k = scale[c] * cache.inv_std[n * xhat.channels + c] / s;
            for ((gi, g), h) in grad_in.channel_mut(n, c).iter_mut().zip(gy).zip(xh) {
                *gi = k * (s * g - sum_g - h * sum_gx);
            }
        }
    }
    grad_in
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data.iter_mut().for_each(|v| *v = leaky_relu(*v));
    out
}

/// `pre` is the activation input.
pub fn leaky_relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &p) in g.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    }
    g
}

/// Channel softmax per voxel.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.spatial();
    let c_n = logits.channels;
    let mut out = logits.clone();
    for n in 0..logits.batch {
        let src = logits.sample(n);
        let dst = out.sample_mut(n);
        for v in 0..s {
            let mut max = f64::NEG_INFINITY;
            for c in 0..c_n {
                max = max.max(src[c * s + v]);
            }
            let mut sum = 0.0;
            for c in 0..c_n {
                let e = (src[c * s + v] - max).exp();
                dst[c * s + v] = e;
                sum += e;
            }
            for c in 0..c_n {
                dst[c * s + v] /= sum;
            }
        }
    }
    out
}

/// Pulls a gradient w.r.t. probabilities back to the logits.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let s = probs.spatial();
    let c_n = probs.channels;
    let mut out = grad_probs.clone();
    for n in 0..probs.batch {
        let p = probs.sample(n);
        let g = grad_probs.sample(n);
        let dst = out.sample_mut(n);
        for v in 0..s {
            let dot: f64 = (0..c_n).map(|c| p[c * s + v] * g[c * s + v]).sum();
            for c in 0..c_n {
                dst[c * s + v] = p[c * s + v] * (g[c * s + v] - dot);
            }
        }
    }
    out
}
