//! Differentiable building blocks: 3D convolution, leaky ReLU and ×2
//! trilinear upsampling, each with a hand-written backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, MatRef, Real, Tensor};
use crate::volio::{voxel_count, Dims};

/// Upper bound on im2col buffer entries per chunk.
const IM2COL_BUDGET: usize = 1 << 22;

/// Cubic-kernel 3D convolution with `kernel / 2` zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        assert!(stride >= 1);
        let kvol = kernel * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![T::zero(); out_channels * in_channels * kvol],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn random<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in conv.weight.iter_mut() {
                *w = T::lit(normal.sample(rng));
            }
        }
        conv
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    #[inline]
    fn kernel_volume(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    pub fn output_dims(&self, dims: Dims) -> Dims {
        let pad = self.kernel / 2;
        dims.map(|n| (n + 2 * pad - self.kernel) / self.stride + 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel, self.stride)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Output z-slab size such that one im2col chunk stays under budget.
    fn slab(&self, out_dims: Dims) -> usize {
        let plane = out_dims[0] * out_dims[1];
        let rows = self.fan_in();
        (IM2COL_BUDGET / (rows * plane).max(1)).clamp(1, out_dims[2])
    }

    fn im2col(&self, input: &Tensor<T>, out_dims: Dims, z0: usize, z1: usize, cols: &mut [T]) {
        let [nx, ny, nz] = input.dims.map(|d| d as isize);
        let n_in = input.spatial_len();
        let k = self.kernel;
        let s = self.stride as isize;
        let pad = self.pad();
        let ncols = (z1 - z0) * out_dims[0] * out_dims[1];
        let (ox_n, oy_n) = (out_dims[0], out_dims[1]);
        let mut row = 0;
        for ci in 0..self.in_channels {
            let chan = &input.data[ci * n_in..(ci + 1) * n_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        let mut col = 0;
                        for oz in z0..z1 {
                            let iz = oz as isize * s + kz as isize - pad;
                            for oy in 0..oy_n {
                                let iy = oy as isize * s + ky as isize - pad;
                                let line = &mut dst[col..col + ox_n];
                                col += ox_n;
                                if iz < 0 || iz >= nz || iy < 0 || iy >= ny {
                                    line.fill(T::zero());
                                    continue;
                                }
                                let base = ((iz * ny + iy) * nx) as usize;
                                let (lo, hi) = valid_x(ox_n, nx, s, kx as isize - pad);
                                line[..lo].fill(T::zero());
                                line[hi..].fill(T::zero());
                                let start = (lo as isize * s + kx as isize - pad) as usize;
                                if s == 1 {
                                    line[lo..hi].copy_from_slice(&chan[base + start..base + start + hi - lo]);
                                } else {
                                    for (m, v) in line[lo..hi].iter_mut().enumerate() {
                                        *v = chan[base + start + m * s as usize];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], out_dims: Dims, z0: usize, z1: usize, grad_in: &mut Tensor<T>) {
        let [nx, ny, nz] = grad_in.dims.map(|d| d as isize);
        let n_in = grad_in.spatial_len();
        let k = self.kernel;
        let s = self.stride as isize;
        let pad = self.pad();
        let ncols = (z1 - z0) * out_dims[0] * out_dims[1];
        let (ox_n, oy_n) = (out_dims[0], out_dims[1]);
        let mut row = 0;
        for ci in 0..self.in_channels {
            let chan = &mut grad_in.data[ci * n_in..(ci + 1) * n_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        let mut col = 0;
                        for oz in z0..z1 {
                            let iz = oz as isize * s + kz as isize - pad;
                            for oy in 0..oy_n {
                                let iy = oy as isize * s + ky as isize - pad;
                                let line = &src[col..col + ox_n];
                                col += ox_n;
                                if iz < 0 || iz >= nz || iy < 0 || iy >= ny {
                                    continue;
                                }
                                let base = ((iz * ny + iy) * nx) as usize;
                                let (lo, hi) = valid_x(ox_n, nx, s, kx as isize - pad);
                                let start = base + (lo as isize * s + kx as isize - pad) as usize;
                                if s == 1 {
                                    chan[start..start + hi - lo]
                                        .iter_mut()
                                        .zip(&line[lo..hi])
                                        .for_each(|(c, &g)| *c += g);
                                } else {
                                    for (m, &g) in line[lo..hi].iter().enumerate() {
                                        chan[start + m * s as usize] += g;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let out_dims = self.output_dims(input.dims);
        let n_out = voxel_count(out_dims);
        let mut out = Tensor::zeros(self.out_channels, out_dims);
        let rows = self.fan_in();
        let w = MatRef::new(&self.weight, self.out_channels, rows);
        if self.is_pointwise() {
            gemm(
                T::one(),
                w,
                MatRef::new(&input.data, rows, n_out),
                T::zero(),
                &mut out.data,
                n_out,
            );
        } else {
            let plane = out_dims[0] * out_dims[1];
            let slab = self.slab(out_dims);
            let mut cols = vec![T::zero(); rows * slab * plane];
            let mut z0 = 0;
            while z0 < out_dims[2] {
                let z1 = (z0 + slab).min(out_dims[2]);
                let ncols = (z1 - z0) * plane;
                let buf = &mut cols[..rows * ncols];
                self.im2col(input, out_dims, z0, z1, buf);
                gemm(
                    T::one(),
                    w,
                    MatRef::new(buf, rows, ncols),
                    T::zero(),
                    &mut out.data[z0 * plane..],
                    n_out,
                );
                z0 = z1;
            }
        }
        for (co, &b) in self.bias.iter().enumerate() {
            if b != T::zero() {
                out.data[co * n_out..(co + 1) * n_out]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and, when `need_input`,
    /// returns the gradient with respect to `input`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut Conv3d<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let out_dims = grad_out.dims;
        let n_out = voxel_count(out_dims);
        let rows = self.fan_in();
        for co in 0..self.out_channels {
            let s: T = grad_out.data[co * n_out..(co + 1) * n_out].iter().copied().sum();
            grads.bias[co] += s;
        }
        let mut grad_in = need_input.then(|| Tensor::zeros(self.in_channels, input.dims));
        if self.is_pointwise() {
            let g = MatRef::new(&grad_out.data, self.out_channels, n_out);
            gemm(
                T::one(),
                g,
                MatRef::new(&input.data, rows, n_out).t(),
                T::one(),
                &mut grads.weight,
                rows,
            );
            if let Some(gi) = grad_in.as_mut() {
                gemm(
                    T::one(),
                    MatRef::new(&self.weight, self.out_channels, rows).t(),
                    g,
                    T::zero(),
                    &mut gi.data,
                    n_out,
                );
            }
            return grad_in;
        }
        let plane = out_dims[0] * out_dims[1];
        let slab = self.slab(out_dims);
        let mut cols = vec![T::zero(); rows * slab * plane];
        let mut dcols = if need_input {
            vec![T::zero(); rows * slab * plane]
        } else {
            Vec::new()
        };
        let mut z0 = 0;
        while z0 < out_dims[2] {
            let z1 = (z0 + slab).min(out_dims[2]);
            let ncols = (z1 - z0) * plane;
            let start = z0 * plane;
            let g = MatRef::with_stride(&grad_out.data[start..], self.out_channels, ncols, n_out);
            let buf = &mut cols[..rows * ncols];
            self.im2col(input, out_dims, z0, z1, buf);
            gemm(
                T::one(),
                g,
                MatRef::new(buf, rows, ncols).t(),
                T::one(),
                &mut grads.weight,
                rows,
            );
            if let Some(gi) = grad_in.as_mut() {
                let dbuf = &mut dcols[..rows * ncols];
                gemm(
                    T::one(),
                    MatRef::new(&self.weight, self.out_channels, rows).t(),
                    g,
                    T::zero(),
                    dbuf,
                    ncols,
                );
                self.col2im(dbuf, out_dims, z0, z1, gi);
            }
            z0 = z1;
        }
        grad_in
    }
}

/// Output range `lo..hi` along x whose input column `ox * s + shift` lies in `0..nx`.
#[inline]
fn valid_x(ox_n: usize, nx: isize, s: isize, shift: isize) -> (usize, usize) {
    let lo = if shift >= 0 { 0 } else { ((-shift + s - 1) / s) as usize };
    let hi = if nx - shift <= 0 {
        0
    } else {
        (((nx - 1 - shift) / s + 1) as usize).min(ox_n)
    };
    (lo.min(hi), hi)
}

pub fn leaky_relu_inplace<T: Real>(t: &mut Tensor<T>, slope: T) {
    for v in t.data.iter_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Applies the leaky-ReLU derivative given the layer's (post-activation) output.
pub fn leaky_relu_backward_inplace<T: Real>(grad: &mut Tensor<T>, output: &Tensor<T>, slope: T) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < T::zero() {
            *g *= slope;
        }
    }
}

/// `[outer, n, inner]` view of a tensor along `axis`.
fn axis_layout(channels: usize, dims: Dims, axis: usize) -> (usize, usize, usize) {
    let inner: usize = dims[..axis].iter().product();
    let outer: usize = channels * dims[axis + 1..].iter().product::<usize>();
    (outer, dims[axis], inner)
}

fn upsample_axis<T: Real>(data: &[T], channels: usize, dims: Dims, axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_layout(channels, dims, axis);
    let (q, tq) = (T::lit(0.25), T::lit(0.75));
    let mut out = vec![T::zero(); data.len() * 2];
    for o in 0..outer {
        let src = &data[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for m in 0..n {
            let lo = m.saturating_sub(1);
            let hi = (m + 1).min(n - 1);
            for x in 0..inner {
                let c = src[m * inner + x];
                dst[2 * m * inner + x] = q * src[lo * inner + x] + tq * c;
                dst[(2 * m + 1) * inner + x] = tq * c + q * src[hi * inner + x];
            }
        }
    }
    out
}

fn upsample_axis_backward<T: Real>(grad: &[T], channels: usize, dims: Dims, axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_layout(channels, dims, axis);
    let (q, tq) = (T::lit(0.25), T::lit(0.75));
    let mut out = vec![T::zero(); grad.len() / 2];
    for o in 0..outer {
        let src = &grad[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for m in 0..n {
            let lo = m.saturating_sub(1);
            let hi = (m + 1).min(n - 1);
            for x in 0..inner {
                let ge = src[2 * m * inner + x];
                let go = src[(2 * m + 1) * inner + x];
                dst[lo * inner + x] += q * ge;
                dst[m * inner + x] += tq * (ge + go);
                dst[hi * inner + x] += q * go;
            }
        }
    }
    out
}

/// Doubles every spatial axis with trilinear interpolation (half-pixel
/// centres, edge-clamped).
pub fn upsample2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut dims = t.dims;
    let mut data = t.data.clone();
    for axis in 0..3 {
        data = upsample_axis(&data, t.channels, dims, axis);
        dims[axis] *= 2;
    }
    Tensor::from_vec(t.channels, dims, data)
}

pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let mut dims = grad.dims;
    let mut data = grad.data.clone();
    for axis in (0..3).rev() {
        dims[axis] /= 2;
        data = upsample_axis_backward(&data, grad.channels, dims, axis);
    }
    Tensor::from_vec(grad.channels, dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(channels: usize, dims: Dims, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = channels * voxel_count(dims);
        Tensor::from_vec(channels, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn conv_naive(conv: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let od = conv.output_dims(x.dims);
        let mut out = Tensor::zeros(conv.out_channels, od);
        let k = conv.kernel as isize;
        let pad = k / 2;
        let n_in = x.spatial_len();
        let n_out = out.spatial_len();
        for co in 0..conv.out_channels {
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    for ox in 0..od[0] {
                        let mut acc = conv.bias[co];
                        for ci in 0..conv.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let ix = (ox * conv.stride) as isize + kx - pad;
                                        let iy = (oy * conv.stride) as isize + ky - pad;
                                        let iz = (oz * conv.stride) as isize + kz - pad;
                                        if ix < 0 || iy < 0 || iz < 0 {
                                            continue;
                                        }
                                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                        if ix >= x.dims[0] || iy >= x.dims[1] || iz >= x.dims[2] {
                                            continue;
                                        }
                                        let w = conv.weight[((co * conv.in_channels + ci) * (k * k * k) as usize)
                                            + ((kz * k + ky) * k + kx) as usize];
                                        acc += w * x.data[ci * n_in + ix + x.dims[0] * (iy + x.dims[1] * iz)];
                                    }
                                }
                            }
                        }
                        out.data[co * n_out + ox + od[0] * (oy + od[1] * oz)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, s, dims) in [(3, 1, [5, 4, 3]), (3, 2, [7, 6, 5]), (1, 1, [3, 3, 3]), (3, 2, [1, 1, 1])] {
            let mut conv = Conv3d::<f64>::random(3, 4, k, s, 0.5, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(3, dims, 9);
            let fast = conv.forward(&x);
            let slow = conv_naive(&conv, &x);
            assert_eq!(fast.dims, slow.dims);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_is_ceil_half() {
        let c = Conv3d::<f32>::zeros(1, 1, 3, 2);
        assert_eq!(c.output_dims([64, 33, 1]), [32, 17, 1]);
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let conv = Conv3d::<f64>::random(2, 3, k, s, 0.4, &mut rng);
            let x = random_tensor(2, [5, 4, 6], 2);
            let out = conv.forward(&x);
            let probe = random_tensor(out.channels, out.dims, 3);
            let loss = |c: &Conv3d<f64>, x: &Tensor<f64>| -> f64 {
                c.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
            };
            let mut grads = conv.zeros_like();
            let gx = conv.backward(&x, &probe, &mut grads, true).unwrap();
            let h = 1e-6;
            for idx in [0, 7, 19, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let mut xm = x.clone();
                xm.data[idx] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - gx.data[idx]).abs() < 1e-6, "input {idx}: {fd} vs {}", gx.data[idx]);
            }
            for idx in [0, 5, conv.weight.len() - 1] {
                let mut cp = conv.clone();
                cp.weight[idx] += h;
                let mut cm = conv.clone();
                cm.weight[idx] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
                assert!((fd - grads.weight[idx]).abs() < 1e-6);
            }
            let mut cp = conv.clone();
            cp.bias[1] += h;
            let mut cm = conv.clone();
            cm.bias[1] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grads.bias[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let c = Tensor::<f64>::from_vec(1, [2, 3, 2], vec![0.7; 12]);
        let up = upsample2(&c);
        assert_eq!(up.dims, [4, 6, 4]);
        assert!(up.data.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let x = random_tensor(2, [3, 2, 4], 4);
        let y = random_tensor(2, [6, 4, 8], 5);
        let lhs: f64 = upsample2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_linear_ramp_interior() {
        let x = Tensor::<f64>::from_vec(1, [4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let up = upsample2(&x);
        // half-pixel centres: output o samples input at o/2 - 0.25
        assert_eq!(&up.data[1..7], &[0.25, 0.75, 1.25, 1.75, 2.25, 2.75]);
    }
}
