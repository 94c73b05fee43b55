//! Trilinear spatial-transformer resampling.
//!
//! Convention: backward warping, `out(x) = in(x + u(x))`, with displacements in
//! voxel units. Each of the eight interpolation corners that falls outside the
//! grid contributes zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::volio::{linear_index, voxel_count, Dims, DisplacementField, LandmarkSet, Volume};

/// Out-of-domain rule and warping direction used by every resampler here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConvention {
    pub padding: Padding,
    pub direction: WarpDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarpDirection {
    /// `out(x) = in(x + u(x))`
    Backward,
}

pub const CONVENTION: SampleConvention = SampleConvention {
    padding: Padding::Zero,
    direction: WarpDirection::Backward,
};

/// Interpolation stencil: up to eight in-grid corners with weights and the
/// per-axis fractional offsets needed for coordinate derivatives.
struct Stencil<T> {
    base: [isize; 3],
    frac: [T; 3],
}

impl<T: Real> Stencil<T> {
    #[inline]
    fn new(p: [T; 3]) -> Option<Self> {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return None;
        }
        let mut base = [0isize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let fl = p[a].floor();
            // Anything this far out has no in-grid corner.
            if fl < T::lit(-2.0) || fl > T::lit(i32::MAX as f64) {
                return None;
            }
            base[a] = fl.to_isize().unwrap();
            frac[a] = p[a] - fl;
        }
        Some(Self { base, frac })
    }

    /// Calls `f(linear_index, corner_offsets)` for each in-grid corner.
    #[inline]
    fn for_each(&self, dims: Dims, mut f: impl FnMut(usize, [usize; 3])) {
        for c in 0..8usize {
            let off = [c & 1, (c >> 1) & 1, c >> 2];
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let v = self.base[a] + off[a] as isize;
                if v < 0 || v >= dims[a] as isize {
                    inside = false;
                    break;
                }
                idx[a] = v as usize;
            }
            if inside {
                f(linear_index(dims, idx[0], idx[1], idx[2]), off);
            }
        }
    }

    /// Linear index of the low corner when all eight corners are in-grid.
    #[inline]
    fn interior(&self, dims: Dims) -> Option<usize> {
        let b = self.base;
        let inside = (0..3).all(|a| b[a] >= 0 && b[a] + 1 < dims[a] as isize);
        inside.then(|| linear_index(dims, b[0] as usize, b[1] as usize, b[2] as usize))
    }

    /// Corner values in order `c = ox + 2 oy + 4 oz` for an interior stencil.
    #[inline]
    fn gather(data: &[T], dims: Dims, i0: usize) -> [T; 8] {
        let (sy, sz) = (dims[0], dims[0] * dims[1]);
        [
            data[i0],
            data[i0 + 1],
            data[i0 + sy],
            data[i0 + sy + 1],
            data[i0 + sz],
            data[i0 + sz + 1],
            data[i0 + sz + sy],
            data[i0 + sz + sy + 1],
        ]
    }

    /// Value and coordinate gradient from eight corner values.
    #[inline]
    fn eval_corners(&self, v: &[T; 8]) -> (T, [T; 3]) {
        let [fx, fy, fz] = self.frac;
        let one = T::one();
        // Interpolate along x first.
        let x00 = v[0] + fx * (v[1] - v[0]);
        let x10 = v[2] + fx * (v[3] - v[2]);
        let x01 = v[4] + fx * (v[5] - v[4]);
        let x11 = v[6] + fx * (v[7] - v[6]);
        let y0 = x00 + fy * (x10 - x00);
        let y1 = x01 + fy * (x11 - x01);
        let val = y0 + fz * (y1 - y0);
        let dx = |a: usize, b: usize| v[b] - v[a];
        let wy0 = one - fy;
        let wz0 = one - fz;
        let gx = wz0 * (wy0 * dx(0, 1) + fy * dx(2, 3)) + fz * (wy0 * dx(4, 5) + fy * dx(6, 7));
        let gy = wz0 * (x10 - x00) + fz * (x11 - x01);
        let gz = y1 - y0;
        (val, [gx, gy, gz])
    }

    /// Corner weights in the same order as [`Stencil::gather`].
    #[inline]
    fn corner_weights(&self) -> [T; 8] {
        let [fx, fy, fz] = self.frac;
        let one = T::one();
        let (gx, gy, gz) = (one - fx, one - fy, one - fz);
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ]
    }

    #[inline]
    fn weights(&self, off: [usize; 3]) -> [T; 3] {
        let mut w = [T::zero(); 3];
        for a in 0..3 {
            w[a] = if off[a] == 1 {
                self.frac[a]
            } else {
                T::one() - self.frac[a]
            };
        }
        w
    }
}

/// Interpolates `data` (shape `dims`) at continuous point `p`.
#[inline]
pub fn sample<T: Real>(data: &[T], dims: Dims, p: [T; 3]) -> T {
    let Some(st) = Stencil::new(p) else {
        return T::zero();
    };
    if let Some(i0) = st.interior(dims) {
        return st.eval_corners(&Stencil::gather(data, dims, i0)).0;
    }
    let mut acc = T::zero();
    st.for_each(dims, |idx, off| {
        let w = st.weights(off);
        acc += w[0] * w[1] * w[2] * data[idx];
    });
    acc
}

/// Interpolated value and its gradient with respect to `p`.
#[inline]
pub fn sample_with_grad<T: Real>(data: &[T], dims: Dims, p: [T; 3]) -> (T, [T; 3]) {
    let Some(st) = Stencil::new(p) else {
        return (T::zero(), [T::zero(); 3]);
    };
    if let Some(i0) = st.interior(dims) {
        return st.eval_corners(&Stencil::gather(data, dims, i0));
    }
    let mut val = T::zero();
    let mut grad = [T::zero(); 3];
    st.for_each(dims, |idx, off| {
        let w = st.weights(off);
        let v = data[idx];
        val += w[0] * w[1] * w[2] * v;
        let sign = |a: usize| if off[a] == 1 { T::one() } else { -T::one() };
        grad[0] += sign(0) * w[1] * w[2] * v;
        grad[1] += w[0] * sign(1) * w[2] * v;
        grad[2] += w[0] * w[1] * sign(2) * v;
    });
    (val, grad)
}

#[inline]
fn coords<T: Real>(dims: Dims, idx: usize) -> [T; 3] {
    let i = idx % dims[0];
    let j = (idx / dims[0]) % dims[1];
    let k = idx / (dims[0] * dims[1]);
    [T::lit(i as f64), T::lit(j as f64), T::lit(k as f64)]
}

/// Warps every channel of `image` (`channels * N` values) by `flow` (`3 * N`, channel-major).
pub fn warp_forward<T: Real>(image: &[T], channels: usize, dims: Dims, flow: &[T]) -> Vec<T> {
    let n = voxel_count(dims);
    assert_eq!(image.len(), channels * n);
    assert_eq!(flow.len(), 3 * n);
    let mut out = vec![T::zero(); channels * n];
    for idx in 0..n {
        let x = coords::<T>(dims, idx);
        let p = [
            x[0] + flow[idx],
            x[1] + flow[n + idx],
            x[2] + flow[2 * n + idx],
        ];
        for c in 0..channels {
            out[c * n + idx] = sample(&image[c * n..(c + 1) * n], dims, p);
        }
    }
    out
}

/// Vector-Jacobian product of [`warp_forward`]: returns `(d image, d flow)`.
pub fn warp_backward<T: Real>(
    image: &[T],
    channels: usize,
    dims: Dims,
    flow: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let n = voxel_count(dims);
    assert_eq!(grad_out.len(), channels * n);
    let mut g_img = vec![T::zero(); channels * n];
    let mut g_flow = vec![T::zero(); 3 * n];
    for idx in 0..n {
        let x = coords::<T>(dims, idx);
        let p = [
            x[0] + flow[idx],
            x[1] + flow[n + idx],
            x[2] + flow[2 * n + idx],
        ];
        let Some(st) = Stencil::new(p) else { continue };
        if let Some(i0) = st.interior(dims) {
            let w = st.corner_weights();
            let (sy, sz) = (dims[0], dims[0] * dims[1]);
            let offs = [0, 1, sy, sy + 1, sz, sz + 1, sz + sy, sz + sy + 1];
            for c in 0..channels {
                let g = grad_out[c * n + idx];
                if g == T::zero() {
                    continue;
                }
                let img = &image[c * n..(c + 1) * n];
                let (_, dp) = st.eval_corners(&Stencil::gather(img, dims, i0));
                let gi = &mut g_img[c * n..(c + 1) * n];
                for (o, wk) in offs.iter().zip(w) {
                    gi[i0 + o] += g * wk;
                }
                for a in 0..3 {
                    g_flow[a * n + idx] += g * dp[a];
                }
            }
            continue;
        }
        for c in 0..channels {
            let g = grad_out[c * n + idx];
            if g == T::zero() {
                continue;
            }
            let img = &image[c * n..(c + 1) * n];
            let gi = &mut g_img[c * n..(c + 1) * n];
            let mut dp = [T::zero(); 3];
            st.for_each(dims, |ci, off| {
                let w = st.weights(off);
                gi[ci] += g * w[0] * w[1] * w[2];
                let v = img[ci];
                let sign = |a: usize| if off[a] == 1 { T::one() } else { -T::one() };
                dp[0] += sign(0) * w[1] * w[2] * v;
                dp[1] += w[0] * sign(1) * w[2] * v;
                dp[2] += w[0] * w[1] * sign(2) * v;
            });
            for a in 0..3 {
                g_flow[a * n + idx] += g * dp[a];
            }
        }
    }
    (g_img, g_flow)
}

fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch { left: a, right: b });
    }
    Ok(())
}

/// Trilinear value of `volume` at continuous voxel coordinate `point`.
pub fn trilinear_sample(volume: &Volume, point: [f64; 3]) -> f64 {
    sample_f32_grid(volume.data(), volume.dims(), point)
}

fn sample_f32_grid(data: &[f32], dims: Dims, p: [f64; 3]) -> f64 {
    let Some(st) = Stencil::<f64>::new(p) else {
        return 0.0;
    };
    let mut acc = 0.0;
    st.for_each(dims, |idx, off| {
        let w = st.weights(off);
        acc += w[0] * w[1] * w[2] * data[idx] as f64;
    });
    acc
}

/// `out(x) = volume(x + u(x))` for every voxel.
pub fn warp_volume(volume: &Volume, field: &DisplacementField) -> Result<Volume> {
    let dims = volume.dims();
    check_dims(dims, field.dims())?;
    let [ux, uy, uz] = field.components();
    let data: Vec<f32> = (0..voxel_count(dims))
        .map(|idx| {
            let x = coords::<f64>(dims, idx);
            let p = [
                x[0] + ux[idx] as f64,
                x[1] + uy[idx] as f64,
                x[2] + uz[idx] as f64,
            ];
            sample_f32_grid(volume.data(), dims, p) as f32
        })
        .collect();
    Volume::new(dims, volume.spacing(), data)
}

/// Displacement of "apply `inner`, then `outer`":
/// `u(x) = inner(x) + outer(x + inner(x))`.
pub fn compose_fields(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    let dims = outer.dims();
    check_dims(dims, inner.dims())?;
    let n = voxel_count(dims);
    let ic = inner.components();
    let oc = outer.components();
    let mut comps = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    for idx in 0..n {
        let x = coords::<f64>(dims, idx);
        let d = [ic[0][idx] as f64, ic[1][idx] as f64, ic[2][idx] as f64];
        let p = [x[0] + d[0], x[1] + d[1], x[2] + d[2]];
        for a in 0..3 {
            comps[a][idx] = (d[a] + sample_f32_grid(&oc[a], dims, p)) as f32;
        }
    }
    DisplacementField::new(dims, inner.spacing(), comps)
}

/// How displacements are read at a landmark position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LandmarkSampling {
    #[default]
    Trilinear,
    /// Displacement of the voxel nearest to the landmark.
    Nearest,
}

/// Landmarks moved by a field, with names of any that sampled outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedLandmarks {
    pub landmarks: LandmarkSet,
    pub outside: Vec<String>,
}

/// Displacement at `p` under the chosen sampling mode, and whether `p` lies
/// inside the grid. Off-grid trilinear reads follow the zero-padding rule;
/// off-grid nearest reads clamp to the closest voxel.
pub fn displacement_at(
    field: &DisplacementField,
    p: [f64; 3],
    mode: LandmarkSampling,
) -> ([f64; 3], bool) {
    let dims = field.dims();
    let inside = (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64);
    let comps = field.components();
    let u = match mode {
        LandmarkSampling::Trilinear => [
            sample_f32_grid(&comps[0], dims, p),
            sample_f32_grid(&comps[1], dims, p),
            sample_f32_grid(&comps[2], dims, p),
        ],
        LandmarkSampling::Nearest => {
            let r = |a: usize| (p[a].round().max(0.0) as usize).min(dims[a] - 1);
            let u = field.at(r(0), r(1), r(2));
            [u[0] as f64, u[1] as f64, u[2] as f64]
        }
    };
    (u, inside)
}

/// Transports each landmark: `p' = p + u(p)`.
pub fn warp_landmarks(
    landmarks: &LandmarkSet,
    field: &DisplacementField,
    mode: LandmarkSampling,
) -> WarpedLandmarks {
    let mut outside = Vec::new();
    let mut moved = landmarks.clone();
    for lm in moved.landmarks.iter_mut() {
        let p = lm.position;
        let (u, inside) = displacement_at(field, p, mode);
        if !inside {
            outside.push(lm.name.clone());
        }
        lm.position = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
    }
    WarpedLandmarks {
        landmarks: moved,
        outside,
    }
}
