//! Volumes, displacement fields and landmark sets, plus their on-disk formats.
//!
//! Binary layout shared by volumes (`IVL1`) and fields (`IVF1`):
//!
//! | bytes   | content                                        |
//! |---------|------------------------------------------------|
//! | 0..4    | ASCII magic                                    |
//! | 4..16   | `nx, ny, nz` as little-endian `u32`            |
//! | 16..28  | `sx, sy, sz` spacing (mm/voxel), LE `f32`      |
//! | 28..    | payload, LE `f32`, index `i` fastest then `j`, `k` |
//!
//! A field payload is the `ux` grid, then `uy`, then `uz`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"IVL1";
pub const FIELD_MAGIC: &[u8; 4] = b"IVF1";
pub const HEADER_LEN: usize = 28;

/// Voxel counts along (x, y, z).
pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Linear offset of voxel `(i, j, k)` with `i` fastest.
#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!("dims must be >= 1, got {dims:?}")));
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Validation(format!("dims exceed u32 range: {dims:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(format!(
            "spacing must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Dense scalar 3D image with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Validation(format!(
                "voxel buffer holds {} values, dims {:?} need {}",
                data.len(),
                dims,
                voxel_count(dims)
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copies the cube `[origin, origin + size)` out of the volume.
    pub fn extract_patch(&self, origin: [usize; 3], size: usize) -> Result<Vec<f32>> {
        for axis in 0..3 {
            if origin[axis] + size > self.dims[axis] {
                return Err(Error::Validation(format!(
                    "patch at {origin:?} of size {size} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let mut out = Vec::with_capacity(size * size * size);
        for k in 0..size {
            for j in 0..size {
                let start = linear_index(self.dims, origin[0], origin[1] + j, origin[2] + k);
                out.extend_from_slice(&self.data[start..start + size]);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(VOLUME_MAGIC, self.dims, self.spacing, &[&self.data])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, spacing, payload) = decode(bytes, VOLUME_MAGIC, 1)?;
        Self::new(dims, spacing, payload)
    }
}

/// Dense per-voxel displacement in voxel units, one grid per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: [f32; 3],
    components: [Vec<f32>; 3],
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: [f32; 3], components: [Vec<f32>; 3]) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let n = voxel_count(dims);
        if components.iter().any(|c| c.len() != n) {
            return Err(Error::Validation(format!(
                "field components must each hold {n} values for dims {dims:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            components,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Result<Self> {
        let n = voxel_count(dims);
        Self::new(dims, spacing, [vec![0.0; n], vec![0.0; n], vec![0.0; n]])
    }

    pub fn constant(dims: Dims, spacing: [f32; 3], value: [f32; 3]) -> Result<Self> {
        let n = voxel_count(dims);
        Self::new(
            dims,
            spacing,
            [vec![value[0]; n], vec![value[1]; n], vec![value[2]; n]],
        )
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let n = voxel_count(dims);
        let mut comps = [
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        ];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let u = f(i, j, k);
                    for c in 0..3 {
                        comps[c].push(u[c]);
                    }
                }
            }
        }
        Self::new(dims, spacing, comps)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn components(&self) -> &[Vec<f32>; 3] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [Vec<f32>; 3] {
        &mut self.components
    }

    pub fn component(&self, axis: usize) -> &[f32] {
        &self.components[axis]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        let idx = linear_index(self.dims, i, j, k);
        [
            self.components[0][idx],
            self.components[1][idx],
            self.components[2][idx],
        ]
    }

    /// Largest per-voxel displacement magnitude.
    pub fn max_magnitude(&self) -> f32 {
        (0..voxel_count(self.dims))
            .map(|idx| {
                let [x, y, z] = [
                    self.components[0][idx],
                    self.components[1][idx],
                    self.components[2][idx],
                ];
                (x * x + y * y + z * z).sqrt()
            })
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Flattened channel-major copy (`ux`, `uy`, `uz`).
    pub fn to_channel_major(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(3 * voxel_count(self.dims));
        for c in &self.components {
            out.extend_from_slice(c);
        }
        out
    }

    pub fn from_channel_major(dims: Dims, spacing: [f32; 3], data: &[f32]) -> Result<Self> {
        let n = voxel_count(dims);
        if data.len() != 3 * n {
            return Err(Error::Validation(format!(
                "channel-major field needs {} values, got {}",
                3 * n,
                data.len()
            )));
        }
        Self::new(
            dims,
            spacing,
            [
                data[..n].to_vec(),
                data[n..2 * n].to_vec(),
                data[2 * n..].to_vec(),
            ],
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [x, y, z] = &self.components;
        encode(FIELD_MAGIC, self.dims, self.spacing, &[x, y, z])
    }

    /// Decodes a field. With `strict`, non-finite displacements are rejected.
    pub fn from_bytes(bytes: &[u8], strict: bool) -> Result<Self> {
        let (dims, spacing, payload) = decode(bytes, FIELD_MAGIC, 3)?;
        if strict {
            if let Some(pos) = payload.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite displacement at payload index {pos} (byte {})",
                    HEADER_LEN + 4 * pos
                )));
            }
        }
        Self::from_channel_major(dims, spacing, &payload)
    }
}

fn encode(magic: &[u8; 4], dims: Dims, spacing: [f32; 3], grids: &[&[f32]]) -> Vec<u8> {
    let payload: usize = grids.iter().map(|g| g.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * payload);
    out.extend_from_slice(magic);
    for d in dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for s in spacing {
        out.write_f32::<LittleEndian>(s).unwrap();
    }
    for g in grids {
        let start = out.len();
        out.resize(start + 4 * g.len(), 0);
        LittleEndian::write_f32_into(g, &mut out[start..]);
    }
    out
}

fn decode(bytes: &[u8], magic: &[u8; 4], grids: usize) -> Result<(Dims, [f32; 3], Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "file shorter than magic"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        *d = LittleEndian::read_u32(&bytes[4 + 4 * a..8 + 4 * a]) as usize;
        if *d == 0 {
            return Err(Error::format(4 + 4 * a as u64, "zero dimension"));
        }
    }
    let mut spacing = [0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = LittleEndian::read_f32(&bytes[16 + 4 * a..20 + 4 * a]);
        if !(s.is_finite() && *s > 0.0) {
            return Err(Error::format(
                16 + 4 * a as u64,
                format!("spacing must be finite and > 0, got {s}"),
            ));
        }
    }
    let expected = (voxel_count(dims) as u64)
        .checked_mul(4 * grids as u64)
        .ok_or_else(|| Error::format(4, "dims overflow"))?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if actual != expected {
        let offset = HEADER_LEN as u64 + actual.min(expected);
        return Err(Error::format(
            offset,
            format!("payload is {actual} bytes, dims {dims:?} require {expected}"),
        ));
    }
    let mut payload = vec![0f32; voxel_count(dims) * grids];
    LittleEndian::read_f32_into(&bytes[HEADER_LEN..], &mut payload);
    Ok((dims, spacing, payload))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::from_bytes(&read_bytes(path.as_ref())?)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &volume.to_bytes())
}

/// Reads a field without rejecting non-finite values.
pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    DisplacementField::from_bytes(&read_bytes(path.as_ref())?, false)
}

/// Reads a field, failing on any NaN or infinite component.
pub fn read_field_strict(path: impl AsRef<Path>) -> Result<DisplacementField> {
    DisplacementField::from_bytes(&read_bytes(path.as_ref())?, true)
}

pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &field.to_bytes())
}

/// Maps voxels linearly onto `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_intensity(volume: &Volume) -> Volume {
    let (lo, hi) = volume.min_max();
    let mut out = volume.clone();
    if !(hi > lo) {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    let (lo, range) = (lo as f64, (hi - lo) as f64);
    for v in out.data.iter_mut() {
        *v = ((*v as f64 - lo) / range) as f32;
    }
    out
}

/// One named point in continuous voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub position: [f64; 3],
}

/// Ordered landmarks with the spacing used for millimetre conversion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub landmarks: Vec<Landmark>,
    pub spacing: [f64; 3],
}

impl LandmarkSet {
    pub fn new(landmarks: Vec<Landmark>, spacing: [f64; 3]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for lm in &landmarks {
            if !seen.insert(lm.name.as_str()) {
                return Err(Error::Validation(format!("duplicate landmark '{}'", lm.name)));
            }
        }
        Ok(Self { landmarks, spacing })
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.iter()
    }

    /// Fails if any landmark lies outside `[0, n - 1]` on some axis.
    pub fn check_bounds(&self, dims: Dims) -> Result<()> {
        for lm in &self.landmarks {
            for axis in 0..3 {
                let p = lm.position[axis];
                if !(p >= 0.0 && p <= (dims[axis] - 1) as f64) {
                    return Err(Error::Validation(format!(
                        "landmark '{}' at {:?} outside dims {dims:?}",
                        lm.name, lm.position
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# name,x,y,z (voxel coordinates)\n");
        for lm in &self.landmarks {
            let [x, y, z] = lm.position;
            out.push_str(&format!("{},{x},{y},{z}\n", lm.name));
        }
        out
    }

    pub fn from_csv(text: &str, bounds: Option<Dims>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut landmarks = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            if record.len() != 4 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 4 fields name,x,y,z, got {}", record.len()),
                });
            }
            let name = record[0].to_string();
            let mut position = [0f64; 3];
            for axis in 0..3 {
                let field = &record[axis + 1];
                position[axis] = field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric coordinate '{field}'"),
                })?;
                if !position[axis].is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite coordinate '{field}'"),
                    });
                }
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate landmark name '{name}'"),
                });
            }
            landmarks.push(Landmark { name, position });
        }
        let set = Self {
            landmarks,
            spacing: [1.0; 3],
        };
        if let Some(dims) = bounds {
            set.check_bounds(dims)?;
        }
        Ok(set)
    }
}

/// Reads `name,x,y,z` CSV. `bounds`, when given, rejects out-of-volume points.
pub fn read_landmarks(path: impl AsRef<Path>, bounds: Option<Dims>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LandmarkSet::from_csv(&text, bounds)
}

pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), set.to_csv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> Volume {
        let mut n = 0.0;
        Volume::from_fn(dims, [1.0, 1.0, 1.0], |_, _, _| {
            n += 1.0;
            n
        })
        .unwrap()
    }

    #[test]
    fn volume_file_size_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ivl");
        let v = ramp([2, 2, 2]);
        write_volume(&v, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 60);
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn zero_volume_roundtrip() {
        let v = Volume::zeros([3, 1, 2], [0.5, 0.5, 2.0]).unwrap();
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        assert!(back.data().iter().all(|&x| x == 0.0));
        assert_eq!(back, v);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = ramp([2, 2, 2]).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Volume::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = ramp([2, 2, 2]).to_bytes();
        match Volume::from_bytes(&bytes[..50]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 50),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            Volume::from_bytes(&bytes[..20]),
            Err(Error::Format { .. })
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            Volume::from_bytes(&long),
            Err(Error::Format { offset: 60, .. })
        ));
    }

    #[test]
    fn field_file_size() {
        let f = DisplacementField::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 124);
        assert_eq!(&bytes[..4], FIELD_MAGIC);
        assert_eq!(DisplacementField::from_bytes(&bytes, true).unwrap(), f);
    }

    #[test]
    fn field_magic_differs_from_volume() {
        let v = ramp([2, 2, 2]);
        assert!(DisplacementField::from_bytes(&v.to_bytes(), false).is_err());
    }

    #[test]
    fn nan_field_rejected_only_in_strict_mode() {
        let mut f = DisplacementField::zeros([2, 2, 2], [1.0; 3]).unwrap();
        f.components_mut()[1][3] = f32::NAN;
        let bytes = f.to_bytes();
        assert!(matches!(
            DisplacementField::from_bytes(&bytes, true),
            Err(Error::Validation(_))
        ));
        let lax = DisplacementField::from_bytes(&bytes, false).unwrap();
        assert!(lax.components()[1][3].is_nan());
    }

    #[test]
    fn normalize_examples() {
        let c = Volume::new([3, 1, 1], [1.0; 3], vec![7.0; 3]).unwrap();
        assert_eq!(normalize_intensity(&c).data(), &[0.0, 0.0, 0.0]);

        let v = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize_intensity(&v).data(), &[0.0, 0.5, 1.0]);

        let unit = Volume::new([4, 1, 1], [1.0; 3], vec![0.0, 0.25, 1.0, 0.75]).unwrap();
        assert_eq!(normalize_intensity(&unit), unit);
    }

    #[test]
    fn invalid_construction() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0]).is_err());
    }

    #[test]
    fn landmark_parsing() {
        let set = LandmarkSet::from_csv("p1,10,20,30\n", None).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.landmarks[0].position, [10.0, 20.0, 30.0]);

        let err = LandmarkSet::from_csv("# header\np1,1,2,3\np1,4,5,6\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");

        let err = LandmarkSet::from_csv("p1,1,2,3\np2,x,5,6\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");

        assert!(LandmarkSet::from_csv("p1,10,20,30\n", Some([16, 16, 16])).is_err());
        assert!(LandmarkSet::from_csv("p1,10,2,3\n", Some([16, 16, 16])).is_ok());
    }

    #[test]
    fn twelve_landmark_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.csv");
        let text: String = (0..12)
            .map(|n| format!("L{n},{}.5,{},{}\n", n, n + 1, 2 * n))
            .collect();
        fs::write(&path, text).unwrap();
        let set = read_landmarks(&path, Some([32, 32, 32])).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.landmarks[11].name, "L11");
        assert_eq!(set.landmarks[3].position, [3.5, 4.0, 6.0]);

        let again = LandmarkSet::from_csv(&set.to_csv(), None).unwrap();
        assert_eq!(again.landmarks, set.landmarks);
    }

    proptest! {
        #[test]
        fn volume_roundtrip_bit_exact(
            dims in (1usize..5, 1usize..5, 1usize..5),
            spacing in (0.001f32..10.0, 0.001f32..10.0, 0.001f32..10.0),
            seed in any::<u32>(),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let mut bits = seed;
            let data: Vec<f32> = (0..voxel_count(dims)).map(|_| {
                bits = bits.wrapping_mul(1664525).wrapping_add(1013904223);
                f32::from_bits(bits & 0x7f7f_ffff)
            }).collect();
            let v = Volume::new(dims, [spacing.0, spacing.1, spacing.2], data).unwrap();
            let back = Volume::from_bytes(&v.to_bytes()).unwrap();
            prop_assert_eq!(back.dims(), v.dims());
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(back.spacing().iter().zip(v.spacing()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn field_roundtrip_bit_exact(
            dims in (1usize..4, 1usize..4, 1usize..4),
            values in proptest::collection::vec(-100f32..100.0, 3 * 27),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let n = voxel_count(dims);
            let f = DisplacementField::from_channel_major(dims, [1.0, 2.0, 3.0], &values[..3 * n]).unwrap();
            prop_assert_eq!(DisplacementField::from_bytes(&f.to_bytes(), true).unwrap(), f);
        }

        #[test]
        fn normalize_idempotent(values in proptest::collection::vec(-1000f32..1000.0, 1..64)) {
            let n = values.len();
            let v = Volume::new([n, 1, 1], [1.0; 3], values).unwrap();
            let once = normalize_intensity(&v);
            prop_assert!(once.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            let twice = normalize_intensity(&once);
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
