//! Deterministic synthetic volume pairs with a known deformation.
//!
//! The target is a sum of Gaussian blobs; the source is the target pulled
//! back through a smooth random field, so `source(x) = target(x + u(x))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::derive_seed;
use crate::volio::{voxel_count, Dims, DisplacementField, Landmark, LandmarkSet, Volume};
use crate::warp::{displacement_at, warp_volume, LandmarkSampling};

/// Width of the cosine taper that pins the field to zero at the border.
pub const TAPER_WIDTH: usize = 4;

const BLOB_STREAM: u64 = 0xb10b;
const FIELD_STREAM: u64 = 0xf1e1d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: Dims,
    /// Voxel size in mm, carried into volumes and landmark sets.
    pub spacing: [f32; 3],
    pub blob_count: usize,
    /// Blob standard deviation range in voxels.
    pub blob_sigma_range: (f64, f64),
    /// Largest displacement magnitude of the truth field, in voxels.
    pub field_amplitude: f64,
    /// Gaussian smoothing sigma of the truth field, in voxels.
    pub field_smoothness: f64,
    pub landmark_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            spacing: [0.0258, 0.0258, 0.04],
            blob_count: 10_000,
            blob_sigma_range: (0.8, 1.2),
            field_amplitude: 2.0,
            field_smoothness: 10.0,
            landmark_count: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!(
                "synthetic dims must be >= 8 per axis, got {:?}",
                self.dims
            )));
        }
        let (lo, hi) = self.blob_sigma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad blob sigma range ({lo}, {hi})")));
        }
        if !(self.field_amplitude >= 0.0 && self.field_amplitude.is_finite()) {
            return Err(Error::Config("field_amplitude must be finite and >= 0".into()));
        }
        if !(self.field_smoothness > 0.0 && self.field_smoothness.is_finite()) {
            return Err(Error::Config("field_smoothness must be finite and > 0".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("bad spacing {:?}", self.spacing)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
}

fn blobs(config: &SynthConfig) -> Vec<Blob> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, BLOB_STREAM));
    let (lo, hi) = config.blob_sigma_range;
    (0..config.blob_count)
        .map(|_| {
            let center = std::array::from_fn(|a| rng.gen::<f64>() * (config.dims[a] - 1) as f64);
            let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            Blob { center, sigma }
        })
        .collect()
}

/// Sum of isotropic Gaussian bumps, rescaled to span `[0, 1]`.
pub fn make_blob_volume(config: &SynthConfig) -> Result<Volume> {
    config.validate()?;
    let dims = config.dims;
    let mut acc = vec![0.0f64; voxel_count(dims)];
    for blob in blobs(config) {
        let reach = (3.5 * blob.sigma).ceil();
        let range = |a: usize| {
            let lo = (blob.center[a] - reach).max(0.0) as usize;
            let hi = ((blob.center[a] + reach) as usize).min(dims[a] - 1);
            lo..=hi
        };
        let inv = -0.5 / (blob.sigma * blob.sigma);
        for k in range(2) {
            let dz = k as f64 - blob.center[2];
            for j in range(1) {
                let dy = j as f64 - blob.center[1];
                let row = dims[0] * (j + dims[1] * k);
                for i in range(0) {
                    let dx = i as f64 - blob.center[0];
                    acc[row + i] += ((dx * dx + dy * dy + dz * dz) * inv).exp();
                }
            }
        }
    }
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let data = if hi > lo {
        acc.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; acc.len()]
    };
    Volume::new(dims, config.spacing, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect()
}

/// Separable blur; the kernel is truncated at the border and renormalized.
fn blur(data: &mut [f64], dims: Dims, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let inner: usize = dims[..axis].iter().product();
        let outer: usize = dims[axis + 1..].iter().product();
        for o in 0..outer {
            for x in 0..inner {
                let at = |m: usize| (o * n + m) * inner + x;
                line.clear();
                line.extend((0..n).map(|m| data[at(m)]));
                for m in 0..n as isize {
                    let (mut sum, mut wsum) = (0.0, 0.0);
                    for d in -r..=r {
                        let q = m + d;
                        if q >= 0 && q < n as isize {
                            let w = kernel[(d + r) as usize];
                            sum += w * line[q as usize];
                            wsum += w;
                        }
                    }
                    data[at(m as usize)] = sum / wsum;
                }
            }
        }
    }
}

/// Cosine ramp from 0 on the outermost voxel to 1 at `TAPER_WIDTH` voxels in.
fn taper(m: usize, n: usize) -> f64 {
    let d = m.min(n - 1 - m);
    if d >= TAPER_WIDTH {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * d as f64 / TAPER_WIDTH as f64).cos())
    }
}

/// Gaussian-smoothed white noise per component, tapered to zero at the
/// border and scaled so the largest vector magnitude equals the amplitude.
pub fn make_smooth_field(config: &SynthConfig) -> Result<DisplacementField> {
    config.validate()?;
    let dims = config.dims;
    let n = voxel_count(dims);
    if config.field_amplitude == 0.0 {
        return DisplacementField::zeros(dims, config.spacing);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, FIELD_STREAM));
    let kernel = gaussian_kernel(config.field_smoothness);
    let mut comps: [Vec<f64>; 3] = std::array::from_fn(|_| {
        let mut c: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        blur(&mut c, dims, &kernel);
        c
    });
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            let wjk = taper(j, dims[1]) * taper(k, dims[2]);
            for i in 0..dims[0] {
                let w = wjk * taper(i, dims[0]);
                let idx = i + dims[0] * (j + dims[1] * k);
                comps.iter_mut().for_each(|c| c[idx] *= w);
            }
        }
    }
    let max = (0..n)
        .map(|p| comps.iter().map(|c| c[p] * c[p]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { config.field_amplitude / max } else { 0.0 };
    let out = comps.map(|c| c.iter().map(|&v| (v * scale) as f32).collect());
    DisplacementField::new(dims, config.spacing, out)
}

/// A synthetic registration problem with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: Volume,
    pub target: Volume,
    /// `source(x) = target(x + truth(x))`.
    pub truth: DisplacementField,
    pub landmarks_src: LandmarkSet,
    /// `landmarks_src` moved by the truth field.
    pub landmarks_tgt: LandmarkSet,
}

/// Builds target, source and landmark pairs. Target landmarks sit on blob
/// centres; their source partners are found by fixed-point inversion of
/// `p + u(p) = c`, and the target positions are then recomputed from the
/// source positions so the pair is exactly consistent with the field.
pub fn make_pair(config: &SynthConfig) -> Result<SyntheticPair> {
    let target = make_blob_volume(config)?;
    let truth = make_smooth_field(config)?;
    let source = warp_volume(&target, &truth)?;
    let margin = (TAPER_WIDTH + 2) as f64;
    let interior = |c: &[f64; 3]| (0..3).all(|a| c[a] >= margin && c[a] <= (config.dims[a] - 1) as f64 - margin);
    let centers: Vec<[f64; 3]> = blobs(config)
        .into_iter()
        .map(|b| b.center)
        .filter(|c| interior(c))
        .take(config.landmark_count)
        .collect();
    let mut src = Vec::with_capacity(centers.len());
    let mut tgt = Vec::with_capacity(centers.len());
    for (n, c) in centers.iter().enumerate() {
        let mut p = *c;
        for _ in 0..50 {
            let (u, _) = displacement_at(&truth, p, LandmarkSampling::Trilinear);
            p = std::array::from_fn(|a| c[a] - u[a]);
        }
        let (u, _) = displacement_at(&truth, p, LandmarkSampling::Trilinear);
        let name = format!("L{:02}", n + 1);
        src.push(Landmark {
            name: name.clone(),
            position: p,
        });
        tgt.push(Landmark {
            name,
            position: std::array::from_fn(|a| p[a] + u[a]),
        });
    }
    let spacing = config.spacing.map(|s| s as f64);
    Ok(SyntheticPair {
        source,
        target,
        truth,
        landmarks_src: LandmarkSet::new(src, spacing)?,
        landmarks_tgt: LandmarkSet::new(tgt, spacing)?,
    })
}

/// Smallest finite-difference Jacobian determinant of `x -> x + u(x)` over
/// interior voxels (central differences).
pub fn min_jacobian_determinant(field: &DisplacementField) -> f64 {
    let d = field.dims();
    let c = field.components();
    let at = |a: usize, i: usize, j: usize, k: usize| c[a][i + d[0] * (j + d[1] * k)] as f64;
    let mut min = f64::INFINITY;
    for k in 1..d[2] - 1 {
        for j in 1..d[1] - 1 {
            for i in 1..d[0] - 1 {
                let mut m = [[0.0; 3]; 3];
                for (a, row) in m.iter_mut().enumerate() {
                    row[0] = 0.5 * (at(a, i + 1, j, k) - at(a, i - 1, j, k));
                    row[1] = 0.5 * (at(a, i, j + 1, k) - at(a, i, j - 1, k));
                    row[2] = 0.5 * (at(a, i, j, k + 1) - at(a, i, j, k - 1));
                    row[a] += 1.0;
                }
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                min = min.min(det);
            }
        }
    }
    min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::global_cc;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            dims: [32, 32, 32],
            blob_count: 40,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn no_blobs_gives_zero_volume() {
        let v = make_blob_volume(&SynthConfig { blob_count: 0, ..small(1) }).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn blob_volume_is_deterministic_and_normalized() {
        let cfg = SynthConfig { blob_count: 50, ..SynthConfig::default() };
        let a = make_blob_volume(&cfg).unwrap();
        assert_eq!(a, make_blob_volume(&cfg).unwrap());
        assert_eq!(a.min_max(), (0.0, 1.0));
        assert_ne!(a, make_blob_volume(&SynthConfig { seed: 1, ..cfg }).unwrap());
    }

    #[test]
    fn small_dims_rejected() {
        let cfg = SynthConfig { dims: [7, 16, 16], ..SynthConfig::default() };
        assert!(matches!(make_blob_volume(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn field_amplitude_and_taper() {
        let zero = make_smooth_field(&SynthConfig { field_amplitude: 0.0, ..small(2) }).unwrap();
        assert_eq!(zero.max_magnitude(), 0.0);

        let cfg = SynthConfig { field_amplitude: 3.0, field_smoothness: 4.0, ..small(2) };
        let f = make_smooth_field(&cfg).unwrap();
        let m = f.max_magnitude();
        assert!((2.99..=3.01).contains(&m), "{m}");
        let d = cfg.dims;
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    let edge = i == 0 || j == 0 || k == 0 || i == d[0] - 1 || j == d[1] - 1 || k == d[2] - 1;
                    if edge {
                        let u = f.at(i, j, k);
                        assert!(u.iter().map(|v| v * v).sum::<f32>().sqrt() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_positive_at_half_ratio() {
        for seed in 0..3 {
            let cfg = SynthConfig { field_amplitude: 2.0, field_smoothness: 4.0, ..small(seed) };
            let det = min_jacobian_determinant(&make_smooth_field(&cfg).unwrap());
            assert!(det > 0.0, "seed {seed}: {det}");
        }
    }

    #[test]
    fn pair_contracts() {
        let flat = make_pair(&SynthConfig { field_amplitude: 0.0, ..small(3) }).unwrap();
        assert_eq!(flat.source, flat.target);

        let cfg = SynthConfig { field_amplitude: 3.0, ..small(3) };
        let pair = make_pair(&cfg).unwrap();
        assert!(global_cc(&pair.source, &pair.target).unwrap() < 1.0);
        assert_eq!(pair.landmarks_src.len(), 12);
        for (s, t) in pair.landmarks_src.iter().zip(pair.landmarks_tgt.iter()) {
            let (u, inside) = displacement_at(&pair.truth, s.position, LandmarkSampling::Trilinear);
            assert!(inside);
            for a in 0..3 {
                assert!((t.position[a] - (s.position[a] + u[a])).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn pair_is_deterministic() {
        let a = make_pair(&small(5)).unwrap();
        let b = make_pair(&small(5)).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.landmarks_tgt, b.landmarks_tgt);
    }
}
