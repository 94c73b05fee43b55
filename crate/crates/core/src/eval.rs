//! Registration quality metrics, landmark distances, difference images and
//! red/green overlays.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{DisplacementField, LandmarkSet, Volume};
use crate::warp::{warp_landmarks, LandmarkSampling};

/// Default histogram resolution for mutual information.
pub const MI_BINS: usize = 32;

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(())
}

/// Pearson correlation of two equally long sequences; 0 if either is constant.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let mean = |x: &[f32]| x[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Global Pearson correlation over all voxels. A constant input scores 0.
pub fn global_cc(a: &Volume, b: &Volume) -> Result<f64> {
    same_dims(a, b)?;
    Ok(pearson(a.data(), b.data()))
}

fn bin_of(v: f32, bins: usize) -> usize {
    // NaN lands in bin 0 through the saturating cast
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    Ok(())
}

fn entropy_of_counts(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Shannon entropy (nats) of the intensity histogram on `[0, 1]`.
pub fn entropy(a: &Volume, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let mut counts = vec![0u64; bins];
    for &v in a.data() {
        counts[bin_of(v, bins)] += 1;
    }
    Ok(entropy_of_counts(&counts, a.len() as f64))
}

/// Mutual information (nats) of the joint histogram with uniform bins on
/// `[0, 1]`; values outside are clamped into the end bins.
pub fn mutual_information(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    same_dims(a, b)?;
    check_bins(bins)?;
    let mut joint = vec![0u64; bins * bins];
    let mut ca = vec![0u64; bins];
    let mut cb = vec![0u64; bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (i, j) = (bin_of(x, bins), bin_of(y, bins));
        joint[i * bins + j] += 1;
        ca[i] += 1;
        cb[j] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (ca[i] as f64 * cb[j] as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Per-landmark distances in mm after transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkReport {
    pub names: Vec<String>,
    pub distances_mm: Vec<f64>,
    pub mean_mm: f64,
    /// Population standard deviation (divides by n).
    pub std_mm: f64,
    /// Landmarks whose displacement was read off-grid.
    pub outside: Vec<String>,
}

impl LandmarkReport {
    pub fn from_distances(names: Vec<String>, distances_mm: Vec<f64>, outside: Vec<String>) -> Self {
        let n = distances_mm.len().max(1) as f64;
        let mean_mm = distances_mm.iter().sum::<f64>() / n;
        let var = distances_mm.iter().map(|d| (d - mean_mm).powi(2)).sum::<f64>() / n;
        Self {
            names,
            distances_mm,
            mean_mm,
            std_mm: var.sqrt(),
            outside,
        }
    }

    /// Table with one row per landmark followed by `Avg` and `Std` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
        w.write_record(["landmark", "distance_mm"]).map_err(fail)?;
        for (name, d) in self.names.iter().zip(&self.distances_mm) {
            w.write_record([name.clone(), format!("{d:.6}")]).map_err(fail)?;
        }
        w.write_record(["Avg".to_string(), format!("{:.6}", self.mean_mm)])
            .map_err(fail)?;
        w.write_record(["Std".to_string(), format!("{:.6}", self.std_mm)])
            .map_err(fail)?;
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Moves `moving` through `field` (`p + u(p)`) and measures the distance to
/// the matching `fixed` landmark, converting voxel deltas to mm by `spacing`.
pub fn landmark_report(
    fixed: &LandmarkSet,
    moving: &LandmarkSet,
    field: &DisplacementField,
    spacing: [f64; 3],
) -> Result<LandmarkReport> {
    if fixed.len() != moving.len() {
        return Err(Error::Validation(format!(
            "landmark counts differ: {} fixed vs {} moving",
            fixed.len(),
            moving.len()
        )));
    }
    let moved = warp_landmarks(moving, field, LandmarkSampling::Trilinear);
    let mut names = Vec::with_capacity(fixed.len());
    let mut distances = Vec::with_capacity(fixed.len());
    for (f, m) in fixed.iter().zip(moved.landmarks.iter()) {
        let d2: f64 = (0..3)
            .map(|a| ((m.position[a] - f.position[a]) * spacing[a]).powi(2))
            .sum();
        names.push(m.name.clone());
        distances.push(d2.sqrt());
    }
    Ok(LandmarkReport::from_distances(names, distances, moved.outside))
}

/// Maps a difference `d` to `round(255 (1 - |d|))`, with `|d|` clipped to 1.
#[inline]
pub fn difference_value(d: f64) -> u8 {
    (255.0 * (1.0 - d.abs().min(1.0))).round() as u8
}

/// 8-bit triangular difference volume: white where the inputs agree.
pub fn difference_image(a: &Volume, b: &Volume) -> Result<Vec<u8>> {
    same_dims(a, b)?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| difference_value(x as f64 - y as f64))
        .collect())
}

/// Pixel grid of one slice: `(width, height, voxel index for (col, row))`.
fn slice_geometry(
    dims: [usize; 3],
    axis: usize,
    index: usize,
) -> Result<(usize, usize, impl Fn(usize, usize) -> usize)> {
    if axis > 2 {
        return Err(Error::Validation(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    if index >= dims[axis] {
        return Err(Error::Validation(format!(
            "slice index {index} out of range for axis {axis} of length {}",
            dims[axis]
        )));
    }
    // Remaining two axes in increasing order become (column, row).
    let (ca, ra) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[ca], dims[ra]);
    let at = move |c: usize, r: usize| {
        let mut p = [0usize; 3];
        p[axis] = index;
        p[ca] = c;
        p[ra] = r;
        p[0] + dims[0] * (p[1] + dims[1] * p[2])
    };
    Ok((w, h, at))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Red = reference, green = registered, blue = 0, for one slice.
pub fn overlay_slice(
    reference: &Volume,
    registered: &Volume,
    axis: usize,
    index: usize,
) -> Result<RgbImage> {
    same_dims(reference, registered)?;
    let (w, h, at) = slice_geometry(reference.dims(), axis, index)?;
    let (r, g) = (reference.data(), registered.data());
    Ok(RgbImage::from_fn(w as u32, h as u32, |c, row| {
        let p = at(c as usize, row as usize);
        Rgb([to_byte(r[p]), to_byte(g[p]), 0])
    }))
}

/// One slice of [`difference_image`] as a grayscale image.
pub fn difference_slice(a: &Volume, b: &Volume, axis: usize, index: usize) -> Result<GrayImage> {
    same_dims(a, b)?;
    let (w, h, at) = slice_geometry(a.dims(), axis, index)?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |c, row| {
        let p = at(c as usize, row as usize);
        image::Luma([difference_value(a.data()[p] as f64 - b.data()[p] as f64)])
    }))
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: impl AsRef<Path>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Validation(format!("cannot encode {}: {other}", path.display())),
    })
}

/// Before/after similarity for one registration, plus optional landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cc_before: f64,
    pub cc_after: f64,
    pub mi_before: f64,
    pub mi_after: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmarks: Option<LandmarkReport>,
}

impl MetricReport {
    /// Compares `moving` and `moved` against `fixed`.
    pub fn measure(fixed: &Volume, moving: &Volume, moved: &Volume) -> Result<Self> {
        Ok(Self {
            cc_before: global_cc(moving, fixed)?,
            cc_after: global_cc(moved, fixed)?,
            mi_before: mutual_information(moving, fixed, MI_BINS)?,
            mi_after: mutual_information(moved, fixed, MI_BINS)?,
            landmarks: None,
        })
    }
}

/// CC/MI table with one row per named registration.
pub fn metrics_table_csv(rows: &[(String, MetricReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
    w.write_record(["pair", "cc_before", "cc_after", "mi_before", "mi_after"])
        .map_err(fail)?;
    for (name, m) in rows {
        w.write_record([
            name.clone(),
            format!("{:.6}", m.cc_before),
            format!("{:.6}", m.cc_after),
            format!("{:.6}", m.mi_before),
            format!("{:.6}", m.mi_after),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Landmark;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(n: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn([n, n, n], [1.0; 3], |_, _, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn cc_identities() {
        let x = random_volume(10, 1);
        assert!((global_cc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg = Volume::new(x.dims(), [1.0; 3], x.data().iter().map(|v| -v).collect()).unwrap();
        assert!((global_cc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = Volume::new(x.dims(), [1.0; 3], vec![0.5; x.len()]).unwrap();
        assert_eq!(global_cc(&x, &flat).unwrap(), 0.0);
        let y = random_volume(10, 2);
        let scaled = Volume::new(y.dims(), [1.0; 3], y.data().iter().map(|v| 3.0 * v + 0.25).collect()).unwrap();
        let d = global_cc(&x, &y).unwrap() - global_cc(&x, &scaled).unwrap();
        assert!(d.abs() < 1e-9);
        assert!(global_cc(&x, &random_volume(9, 2)).is_err());
    }

    #[test]
    fn mi_identities() {
        let x = random_volume(20, 3);
        let h = entropy(&x, MI_BINS).unwrap();
        assert!((mutual_information(&x, &x, MI_BINS).unwrap() - h).abs() < 1e-9);
        let y = random_volume(20, 4);
        let ab = mutual_information(&x, &y, MI_BINS).unwrap();
        let ba = mutual_information(&y, &x, MI_BINS).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0 && ab <= h.min(entropy(&y, MI_BINS).unwrap()) + 1e-9);
    }

    #[test]
    fn mi_of_shuffled_is_near_zero() {
        let x = random_volume(64, 5);
        let mut data = x.data().to_vec();
        data.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
        let y = Volume::new(x.dims(), [1.0; 3], data).unwrap();
        assert!(mutual_information(&x, &y, MI_BINS).unwrap() < 0.05);
    }

    #[test]
    fn difference_values() {
        assert_eq!(difference_value(0.0), 255);
        assert_eq!(difference_value(1.0), 0);
        assert_eq!(difference_value(-1.0), 0);
        assert_eq!(difference_value(0.5), 128);
        let (a, b) = (random_volume(5, 7), random_volume(5, 8));
        assert_eq!(difference_image(&a, &b).unwrap(), difference_image(&b, &a).unwrap());
    }

    fn set(points: &[[f64; 3]]) -> LandmarkSet {
        let lms = points
            .iter()
            .enumerate()
            .map(|(i, &p)| Landmark { name: format!("p{i}"), position: p })
            .collect();
        LandmarkSet::new(lms, [1.0; 3]).unwrap()
    }

    #[test]
    fn landmark_distances() {
        let field = DisplacementField::zeros([8, 8, 8], [1.0; 3]).unwrap();
        let a = set(&[[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]);
        let r = landmark_report(&a, &a, &field, [1.0; 3]).unwrap();
        assert_eq!(r.distances_mm, vec![0.0, 0.0]);
        let b = set(&[[2.0, 2.0, 3.0], [5.0, 4.0, 4.0]]);
        let spacing = [0.0258, 0.0258, 0.04];
        let r = landmark_report(&a, &b, &field, spacing).unwrap();
        for d in &r.distances_mm {
            assert!((d - 0.0258).abs() < 1e-12);
        }
        assert!(r.std_mm.abs() < 1e-12);
        assert!(landmark_report(&a, &set(&[[0.0; 3]]), &field, spacing).is_err());
    }

    #[test]
    fn population_std() {
        let r = LandmarkReport::from_distances(vec!["a".into(), "b".into()], vec![1.0, 3.0], vec![]);
        assert_eq!(r.mean_mm, 2.0);
        assert_eq!(r.std_mm, 1.0);
        assert!(r.to_csv().unwrap().contains("Std,1.000000"));
    }

    #[test]
    fn overlays() {
        let x = random_volume(6, 9);
        let img = overlay_slice(&x, &x, 2, 3).unwrap();
        for px in img.pixels() {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[2], 0);
        }
        let zero = Volume::zeros(x.dims(), [1.0; 3]).unwrap();
        let red = overlay_slice(&x, &zero, 0, 1).unwrap();
        assert!(red.pixels().all(|p| p[1] == 0 && p[2] == 0));
        assert!(overlay_slice(&x, &x, 1, 6).is_err());

        let checker = |parity: usize| {
            Volume::from_fn([4, 4, 1], [1.0; 3], move |i, j, _| ((i + j + parity) % 2) as f32).unwrap()
        };
        let img = overlay_slice(&checker(0), &checker(1), 2, 0).unwrap();
        for (c, r, px) in img.enumerate_pixels() {
            let red_cell = (c + r) % 2 == 1;
            assert_eq!(px.0, if red_cell { [255, 0, 0] } else { [0, 255, 0] });
        }
    }
}
