//! Whole-volume registration by overlapping patch tiles. Per-tile flows are
//! blended with separable raised-cosine weights and the volumes are warped
//! once with the blended fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::GeneratorParams;
use crate::sampler::PatchSpec;
use crate::tensor::Tensor;
use crate::volio::{voxel_count, Dims, DisplacementField, Volume};
use crate::warp::warp_volume;

/// How overlapping tile predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Blend {
    /// Weighted average with raised-cosine ramps across each overlap.
    RaisedCosine,
    /// Later tiles overwrite earlier ones; leaves hard seams.
    Overwrite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilingPlan {
    pub dims: Dims,
    pub patch_size: usize,
    pub overlap: usize,
    /// Tile origins per axis; tiles are their Cartesian product.
    pub axis_origins: [Vec<usize>; 3],
    /// Tiles in x-fastest order over `axis_origins`.
    pub tiles: Vec<PatchSpec>,
    pub blend: Blend,
}

fn axis_origins(d: usize, p: usize, o: usize) -> Vec<usize> {
    let stride = p - o;
    let mut out = vec![0];
    while out.last().unwrap() + p < d {
        let next = (out.last().unwrap() + stride).min(d - p);
        out.push(next);
    }
    out
}

/// Stride `P - O` grid with the last tile of each axis flush with the end.
pub fn plan_tiling(dims: Dims, patch_size: usize, overlap: usize) -> Result<TilingPlan> {
    if patch_size == 0 || dims.iter().any(|&d| d < patch_size) {
        return Err(Error::Validation(format!(
            "patch size {patch_size} does not fit volume dims {dims:?}"
        )));
    }
    if overlap >= patch_size {
        return Err(Error::Config(format!(
            "overlap {overlap} must be smaller than patch size {patch_size}"
        )));
    }
    let origins = [0, 1, 2].map(|a| axis_origins(dims[a], patch_size, overlap));
    let mut tiles = Vec::new();
    for &k in &origins[2] {
        for &j in &origins[1] {
            for &i in &origins[0] {
                tiles.push(PatchSpec {
                    origin: [i, j, k],
                    size: patch_size,
                });
            }
        }
    }
    Ok(TilingPlan {
        dims,
        patch_size,
        overlap,
        axis_origins: origins,
        tiles,
        blend: Blend::RaisedCosine,
    })
}

impl TilingPlan {
    pub fn with_blend(mut self, blend: Blend) -> Self {
        self.blend = blend;
        self
    }

    /// 1D weights of a tile starting at `origin` along `axis`. Ramps only on
    /// sides that border another tile, never at the volume edge.
    pub fn axis_weights(&self, axis: usize, origin: usize) -> Vec<f64> {
        let p = self.patch_size;
        let mut w = vec![1.0; p];
        if self.blend == Blend::Overwrite || self.overlap == 0 {
            return w;
        }
        let o = self.overlap;
        let ramp = |m: usize| 0.5 * (1.0 - (std::f64::consts::PI * (m as f64 + 0.5) / o as f64).cos());
        let origins = &self.axis_origins[axis];
        if origin > 0 {
            for (m, v) in w.iter_mut().take(o).enumerate() {
                *v *= ramp(m);
            }
        }
        if origin + p < self.dims[axis] || origins.last() != Some(&origin) {
            for m in 0..o {
                w[p - 1 - m] *= ramp(m);
            }
        }
        w
    }

    /// Sum over tiles of the raw blend weights at every voxel.
    pub fn weight_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; voxel_count(self.dims)];
        for tile in &self.tiles {
            let w = [0, 1, 2].map(|a| self.axis_weights(a, tile.origin[a]));
            self.for_each_voxel(tile, |idx, m| acc[idx] += w[0][m[0]] * w[1][m[1]] * w[2][m[2]]);
        }
        acc
    }

    /// Largest deviation from 1 of the normalized weights summed over tiles.
    pub fn partition_error(&self) -> f64 {
        let total = self.weight_sum();
        let mut acc = vec![0.0; total.len()];
        for tile in &self.tiles {
            let w = [0, 1, 2].map(|a| self.axis_weights(a, tile.origin[a]));
            self.for_each_voxel(tile, |idx, m| {
                acc[idx] += w[0][m[0]] * w[1][m[1]] * w[2][m[2]] / total[idx];
            });
        }
        acc.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Number of tiles covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0u32; voxel_count(self.dims)];
        for tile in &self.tiles {
            self.for_each_voxel(tile, |idx, _| c[idx] += 1);
        }
        c
    }

    fn for_each_voxel(&self, tile: &PatchSpec, mut f: impl FnMut(usize, [usize; 3])) {
        let d = self.dims;
        let p = self.patch_size;
        let [i0, j0, k0] = tile.origin;
        for mk in 0..p {
            for mj in 0..p {
                let row = d[0] * ((j0 + mj) + d[1] * (k0 + mk));
                for mi in 0..p {
                    f(row + i0 + mi, [mi, mj, mk]);
                }
            }
        }
    }
}

/// Anything that maps a co-located patch pair to `(φ_ST, φ_TS)`, each
/// channel-major `3 x P^3`.
pub trait FlowPredictor: Sync {
    fn predict(&self, source: &[f32], target: &[f32], tile: &PatchSpec) -> Result<(Vec<f32>, Vec<f32>)>;
}

impl FlowPredictor for GeneratorParams<f32> {
    fn predict(&self, source: &[f32], target: &[f32], tile: &PatchSpec) -> Result<(Vec<f32>, Vec<f32>)> {
        let dims = [tile.size; 3];
        let (f, b) = self.forward(&Tensor::from_vec(1, dims, source.to_vec()), &Tensor::from_vec(1, dims, target.to_vec()))?;
        Ok((f.data, b.data))
    }
}

/// Blended full-volume forward (`φ_ST`) and backward (`φ_TS`) fields.
///
/// Tiles are predicted a few at a time and accumulated in plan order, so
/// the result does not depend on thread count and extra memory stays at a
/// handful of whole-volume buffers.
pub fn predict_full_field(
    predictor: &impl FlowPredictor,
    source: &Volume,
    target: &Volume,
    plan: &TilingPlan,
) -> Result<(DisplacementField, DisplacementField)> {
    if source.dims() != target.dims() {
        return Err(Error::DimsMismatch {
            left: source.dims(),
            right: target.dims(),
        });
    }
    if source.dims() != plan.dims {
        return Err(Error::DimsMismatch {
            left: plan.dims,
            right: source.dims(),
        });
    }
    let n = voxel_count(plan.dims);
    let pv = voxel_count([plan.patch_size; 3]);
    let mut acc: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    let mut wsum = vec![0.0f64; n];
    let chunk = rayon::current_num_threads().max(1);
    for tiles in plan.tiles.chunks(chunk) {
        let preds = tiles
            .par_iter()
            .map(|tile| {
                let s = source.extract_patch(tile.origin, tile.size)?;
                let t = target.extract_patch(tile.origin, tile.size)?;
                let (f, b) = predictor.predict(&s, &t, tile)?;
                if f.len() != 3 * pv || b.len() != 3 * pv {
                    return Err(Error::Shape(format!(
                        "predictor returned {} and {} values, expected {}",
                        f.len(),
                        b.len(),
                        3 * pv
                    )));
                }
                Ok((f, b))
            })
            .collect::<Result<Vec<_>>>()?;
        for (tile, (f, b)) in tiles.iter().zip(preds) {
            let w = [0, 1, 2].map(|a| plan.axis_weights(a, tile.origin[a]));
            let mut local = 0;
            plan.for_each_voxel(tile, |idx, m| {
                let wt = w[0][m[0]] * w[1][m[1]] * w[2][m[2]];
                if plan.blend == Blend::Overwrite {
                    for c in 0..3 {
                        acc[c][idx] = f[c * pv + local] as f64;
                        acc[3 + c][idx] = b[c * pv + local] as f64;
                    }
                    wsum[idx] = 1.0;
                } else {
                    for c in 0..3 {
                        acc[c][idx] += wt * f[c * pv + local] as f64;
                        acc[3 + c][idx] += wt * b[c * pv + local] as f64;
                    }
                    wsum[idx] += wt;
                }
                local += 1;
            });
        }
    }
    let finish = |range: std::ops::Range<usize>| -> Result<DisplacementField> {
        let comps: [Vec<f32>; 3] = std::array::from_fn(|c| {
            acc[range.start + c]
                .iter()
                .zip(&wsum)
                .map(|(&v, &w)| (v / w) as f32)
                .collect()
        });
        DisplacementField::new(plan.dims, source.spacing(), comps)
    };
    Ok((finish(0..3)?, finish(3..6)?))
}

/// Result of registering a volume pair.
#[derive(Debug, Clone)]
pub struct Registration {
    /// `S∘φ_ST`, aligned to the target.
    pub warped_source: Volume,
    /// `T∘φ_TS`, aligned to the source.
    pub warped_target: Volume,
    pub flow_forward: DisplacementField,
    pub flow_backward: DisplacementField,
    /// Source vs target before, warped source vs target after.
    pub metrics: MetricReport,
    /// Target vs source before, warped target vs source after.
    pub metrics_backward: MetricReport,
}

pub fn register(
    predictor: &impl FlowPredictor,
    source: &Volume,
    target: &Volume,
    plan: &TilingPlan,
) -> Result<Registration> {
    let (flow_forward, flow_backward) = predict_full_field(predictor, source, target, plan)?;
    let warped_source = warp_volume(source, &flow_forward)?;
    let warped_target = warp_volume(target, &flow_backward)?;
    Ok(Registration {
        metrics: MetricReport::measure(target, source, &warped_source)?,
        metrics_backward: MetricReport::measure(source, target, &warped_target)?,
        warped_source,
        warped_target,
        flow_forward,
        flow_backward,
    })
}

/// Largest component jump between neighbouring voxels on either side of any
/// interior tile boundary plane.
pub fn seam_score(field: &DisplacementField, plan: &TilingPlan) -> f64 {
    let d = field.dims();
    let comps = field.components();
    let mut best = 0.0f64;
    for axis in 0..3 {
        let mut planes: Vec<usize> = Vec::new();
        for &o in &plan.axis_origins[axis] {
            for b in [o, o + plan.patch_size] {
                if b > 0 && b < d[axis] && !planes.contains(&b) {
                    planes.push(b);
                }
            }
        }
        let step = [1, d[0], d[0] * d[1]][axis];
        for &b in &planes {
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        if [i, j, k][axis] != b {
                            continue;
                        }
                        let idx = i + d[0] * (j + d[1] * k);
                        for c in comps {
                            best = best.max((c[idx] - c[idx - step]).abs() as f64);
                        }
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant([f32; 3]);

    impl FlowPredictor for Constant {
        fn predict(&self, _: &[f32], _: &[f32], tile: &PatchSpec) -> Result<(Vec<f32>, Vec<f32>)> {
            let n = voxel_count([tile.size; 3]);
            let f: Vec<f32> = self.0.iter().flat_map(|&c| std::iter::repeat(c).take(n)).collect();
            Ok((f.clone(), f.iter().map(|v| -v).collect()))
        }
    }

    /// Constant per tile, equal to its x origin.
    struct ByOrigin;

    impl FlowPredictor for ByOrigin {
        fn predict(&self, _: &[f32], _: &[f32], tile: &PatchSpec) -> Result<(Vec<f32>, Vec<f32>)> {
            let n = voxel_count([tile.size; 3]);
            let v = vec![tile.origin[0] as f32 / 4.0; 3 * n];
            Ok((v.clone(), v))
        }
    }

    fn vol(dims: Dims) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |i, j, k| ((i * 7 + j * 3 + k) % 11) as f32 / 10.0).unwrap()
    }

    #[test]
    fn stride_arithmetic() {
        let plan = plan_tiling([160, 64, 70], 64, 16).unwrap();
        assert_eq!(plan.axis_origins[0], vec![0, 48, 96]);
        assert_eq!(plan.axis_origins[1], vec![0]);
        assert_eq!(plan.axis_origins[2], vec![0, 6]);
        assert_eq!(plan.tiles.len(), 6);
        assert!(plan_tiling([63, 64, 64], 64, 16).is_err());
        assert!(plan_tiling([64, 64, 64], 16, 16).is_err());
    }

    #[test]
    fn zero_overlap_has_unit_weights() {
        let plan = plan_tiling([32, 32, 16], 16, 0).unwrap();
        assert_eq!(plan.axis_origins[0], vec![0, 16]);
        assert!(plan.weight_sum().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn coverage_and_partition_of_unity() {
        for (dims, p, o) in [([40, 37, 33], 16, 4), ([64, 64, 64], 32, 16), ([50, 20, 17], 16, 15)] {
            let plan = plan_tiling(dims, p, o).unwrap();
            assert!(plan.coverage().iter().all(|&c| c >= 1));
            assert!(plan.weight_sum().iter().all(|&w| w > 0.0));
            assert!(plan.partition_error() <= 1e-6);
        }
    }

    #[test]
    fn constant_stub_gives_constant_field() {
        let dims = [40, 37, 33];
        let plan = plan_tiling(dims, 16, 6).unwrap();
        let c = [0.3, -1.7, 2.25];
        let (f, b) = predict_full_field(&Constant(c), &vol(dims), &vol(dims), &plan).unwrap();
        for a in 0..3 {
            assert!(f.component(a).iter().all(|&v| v == c[a]));
            assert!(b.component(a).iter().all(|&v| v == -c[a]));
        }
        assert_eq!(seam_score(&f, &plan), 0.0);
    }

    #[test]
    fn single_tile_is_passed_through() {
        struct Ramp;
        impl FlowPredictor for Ramp {
            fn predict(&self, s: &[f32], _: &[f32], _: &PatchSpec) -> Result<(Vec<f32>, Vec<f32>)> {
                let f: Vec<f32> = (0..3).flat_map(|c| s.iter().map(move |v| v + c as f32)).collect();
                Ok((f.clone(), f))
            }
        }
        let dims = [16, 16, 16];
        let v = vol(dims);
        let plan = plan_tiling(dims, 16, 4).unwrap();
        let (f, _) = predict_full_field(&Ramp, &v, &v, &plan).unwrap();
        assert_eq!(f.component(0), v.data());
    }

    #[test]
    fn blending_reduces_seams() {
        let dims = [40, 16, 16];
        let v = vol(dims);
        let plan = plan_tiling(dims, 16, 8).unwrap();
        let hard = plan.clone().with_blend(Blend::Overwrite);
        let (fh, _) = predict_full_field(&ByOrigin, &v, &v, &hard).unwrap();
        let (fs, _) = predict_full_field(&ByOrigin, &v, &v, &plan).unwrap();
        // origins 0, 8, 16, 24: adjacent constants differ by 2
        assert_eq!(seam_score(&fh, &hard), 2.0);
        let soft = seam_score(&fs, &plan);
        assert!(soft < 2.0, "{soft}");
    }

    #[test]
    fn zero_flow_register_is_identity() {
        let dims = [24, 20, 16];
        let (s, t) = (vol(dims), vol([24, 20, 16]));
        let plan = plan_tiling(dims, 16, 4).unwrap();
        let r = register(&Constant([0.0; 3]), &s, &t, &plan).unwrap();
        assert_eq!(r.warped_source, s);
        assert_eq!(r.warped_target, t);
        assert!(predict_full_field(&Constant([0.0; 3]), &s, &vol([24, 20, 17]), &plan).is_err());
    }

    #[test]
    fn near_identity_generator_keeps_correlation() {
        let dims = [32, 32, 32];
        let v = vol(dims);
        let cfg = crate::model::ModelConfig { patch_size: 16, base_channels: 2, ..Default::default() };
        let g = GeneratorParams::<f32>::init(&cfg).unwrap();
        let plan = plan_tiling(dims, 16, 4).unwrap();
        let r = register(&g, &v, &v, &plan).unwrap();
        assert!(r.metrics.cc_after >= 0.99, "{}", r.metrics.cc_after);
    }
}
