//! Intensity-weighted rejection sampling of co-located training patches and
//! an on-disk archive for pre-extracted patch pairs.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{Dims, Volume};

pub const PATCH_ARCHIVE_MAGIC: &[u8; 4] = b"IVP1";

/// A cubic window into a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub size: usize,
}

impl PatchSpec {
    pub fn fits(&self, dims: Dims) -> bool {
        self.size > 0 && (0..3).all(|a| self.origin[a] + self.size <= dims[a])
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        if !self.fits(dims) {
            return Err(Error::Validation(format!(
                "patch at {:?} of size {} exceeds dims {dims:?}",
                self.origin, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Accept with probability `min(1, patch_weight(mu))`.
    Weighted,
    /// Older scheme: keep any patch whose mean exceeds a fixed threshold.
    /// Biased toward bright regions; kept only for comparison runs.
    FixedThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub low: f64,
    pub high: f64,
    /// Decay constant above `high`.
    pub k: f64,
    /// Numerator of the decay branch.
    pub scale: f64,
    pub patch_size: usize,
    pub seed: u64,
    /// Draw budget before giving up on a request.
    pub max_draws: u64,
    pub mode: SamplingMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            low: 0.1,
            high: 0.35,
            k: 6.6,
            scale: 10.0,
            patch_size: 64,
            seed: 0,
            max_draws: 1_000_000,
            mode: SamplingMode::Weighted,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= low < high <= 1, got low {} high {}",
                self.low, self.high
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("decay constant must be > 0, got {}", self.k)));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be >= 0, got {}", self.scale)));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Selection weight of a patch with mean intensity `x`: 1 on `[low, high]`,
/// `scale * exp(-k x)` above `high`, 0 below `low`.
pub fn patch_weight(x: f64, config: &SamplerConfig) -> f64 {
    if x < config.low || x.is_nan() {
        0.0
    } else if x <= config.high {
        1.0
    } else {
        config.scale * (-config.k * x).exp()
    }
}

/// Probability that a patch of mean `x` is kept under the configured mode.
pub fn acceptance_probability(x: f64, config: &SamplerConfig) -> f64 {
    match config.mode {
        SamplingMode::Weighted => patch_weight(x, config).min(1.0),
        SamplingMode::FixedThreshold(t) => {
            if x > t {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Summed-area table over the voxelwise average of two volumes.
struct MeanTable {
    dims: Dims,
    sat: Vec<f64>,
}

impl MeanTable {
    fn new(source: &Volume, target: &Volume) -> Self {
        let dims = source.dims();
        let (sx, sy) = (dims[0] + 1, dims[1] + 1);
        let mut sat = vec![0.0f64; sx * sy * (dims[2] + 1)];
        let (s, t) = (source.data(), target.data());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let v = 0.5 * (s[i + dims[0] * (j + dims[1] * k)] as f64
                        + t[i + dims[0] * (j + dims[1] * k)] as f64);
                    let at = |i: usize, j: usize, k: usize| i + sx * (j + sy * k);
                    sat[at(i + 1, j + 1, k + 1)] = v + sat[at(i, j + 1, k + 1)]
                        + sat[at(i + 1, j, k + 1)]
                        + sat[at(i + 1, j + 1, k)]
                        - sat[at(i, j, k + 1)]
                        - sat[at(i, j + 1, k)]
                        - sat[at(i + 1, j, k)]
                        + sat[at(i, j, k)];
                }
            }
        }
        Self { dims, sat }
    }

    fn mean(&self, spec: &PatchSpec) -> f64 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |i: usize, j: usize, k: usize| self.sat[i + sx * (j + sy * k)];
        let [i0, j0, k0] = spec.origin;
        let (i1, j1, k1) = (i0 + spec.size, j0 + spec.size, k0 + spec.size);
        let sum = at(i1, j1, k1) - at(i0, j1, k1) - at(i1, j0, k1) - at(i1, j1, k0)
            + at(i0, j0, k1)
            + at(i0, j1, k0)
            + at(i1, j0, k0)
            - at(i0, j0, k0);
        sum / (spec.size * spec.size * spec.size) as f64
    }
}

/// Outcome of a single proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub spec: PatchSpec,
    pub mean: f64,
    pub accepted: bool,
}

/// Running counters of a sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub draws: u64,
    pub accepted: u64,
}

/// Stateful rejection sampler over one volume pair.
pub struct Sampler {
    config: SamplerConfig,
    table: MeanTable,
    rng: ChaCha8Rng,
    stats: SamplerStats,
}

impl Sampler {
    pub fn new(source: &Volume, target: &Volume, config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        if source.dims() != target.dims() {
            return Err(Error::DimsMismatch {
                left: source.dims(),
                right: target.dims(),
            });
        }
        let dims = source.dims();
        if dims.iter().any(|&d| d < config.patch_size) {
            return Err(Error::Sampling(format!(
                "patch size {} does not fit volume dims {dims:?}",
                config.patch_size
            )));
        }
        Ok(Self {
            config: config.clone(),
            table: MeanTable::new(source, target),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            stats: SamplerStats::default(),
        })
    }

    pub fn stats(&self) -> SamplerStats {
        self.stats
    }

    /// Mean of the averaged source/target intensities inside `spec`.
    pub fn patch_mean(&self, spec: &PatchSpec) -> f64 {
        self.table.mean(spec)
    }

    /// Proposes one uniform origin and decides acceptance.
    pub fn draw(&mut self) -> Draw {
        let p = self.config.patch_size;
        let dims = self.table.dims;
        let origin = std::array::from_fn(|a| self.rng.gen_range(0..=dims[a] - p));
        let spec = PatchSpec { origin, size: p };
        let mean = self.table.mean(&spec);
        let u: f64 = self.rng.gen();
        let accepted = u < acceptance_probability(mean, &self.config);
        self.stats.draws += 1;
        self.stats.accepted += accepted as u64;
        Draw {
            spec,
            mean,
            accepted,
        }
    }

    /// Draws until `n` patches are accepted or the budget runs out.
    pub fn sample(&mut self, n: usize) -> Result<Vec<PatchSpec>> {
        let mut out = Vec::with_capacity(n);
        let mut drawn = 0u64;
        let mut brightest = f64::NEG_INFINITY;
        while out.len() < n {
            if drawn >= self.config.max_draws {
                return Err(Error::Sampling(format!(
                    "accepted {} of {n} patches after {drawn} draws; brightest patch mean seen {brightest:.4} \
                     (weighted range {}..{})",
                    out.len(),
                    self.config.low,
                    self.config.high
                )));
            }
            let d = self.draw();
            drawn += 1;
            brightest = brightest.max(d.mean);
            if d.accepted {
                out.push(d.spec);
            }
        }
        Ok(out)
    }
}

/// `n` accepted patch windows for a volume pair, deterministic under the seed.
pub fn sample_patches(
    source: &Volume,
    target: &Volume,
    n: usize,
    config: &SamplerConfig,
) -> Result<Vec<PatchSpec>> {
    Sampler::new(source, target, config)?.sample(n)
}

pub fn specs_to_csv(specs: &[PatchSpec]) -> String {
    let mut out = String::from("i,j,k,P\n");
    for s in specs {
        out.push_str(&format!("{},{},{},{}\n", s.origin[0], s.origin[1], s.origin[2], s.size));
    }
    out
}

pub fn specs_from_csv(text: &str) -> Result<Vec<PatchSpec>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n as u64 + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields i,j,k,P, got {}", record.len()),
            });
        }
        let field = |c: usize| {
            record[c].parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("field {c} '{}': {e}", &record[c]),
            })
        };
        out.push(PatchSpec {
            origin: [field(0)?, field(1)?, field(2)?],
            size: field(3)?,
        });
    }
    Ok(out)
}

/// A pre-extracted co-located patch pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub spec: PatchSpec,
    pub source: Vec<f32>,
    pub target: Vec<f32>,
}

pub fn extract_records(
    source: &Volume,
    target: &Volume,
    specs: &[PatchSpec],
) -> Result<Vec<PatchRecord>> {
    specs
        .iter()
        .map(|spec| {
            Ok(PatchRecord {
                spec: *spec,
                source: source.extract_patch(spec.origin, spec.size)?,
                target: target.extract_patch(spec.origin, spec.size)?,
            })
        })
        .collect()
}

/// Archive layout: magic, u32 patch size, u64 record count, then per record
/// three u32 origin coordinates and `2 P^3` little-endian f32 values.
pub fn write_patch_archive(path: impl AsRef<Path>, records: &[PatchRecord]) -> Result<()> {
    let path = path.as_ref();
    let size = records.first().map_or(0, |r| r.spec.size);
    let n = size * size * size;
    let mut buf = Vec::with_capacity(16 + records.len() * (12 + 8 * n));
    buf.extend_from_slice(PATCH_ARCHIVE_MAGIC);
    buf.write_u32::<LittleEndian>(size as u32).unwrap();
    buf.write_u64::<LittleEndian>(records.len() as u64).unwrap();
    for r in records {
        if r.spec.size != size || r.source.len() != n || r.target.len() != n {
            return Err(Error::Validation(format!(
                "archive records must all be {size}^3 patches, got size {} with {}/{} values",
                r.spec.size,
                r.source.len(),
                r.target.len()
            )));
        }
        for &o in &r.spec.origin {
            buf.write_u32::<LittleEndian>(o as u32).unwrap();
        }
        for &v in r.source.iter().chain(&r.target) {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_patch_archive(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_patch_archive(&bytes)
}

pub fn decode_patch_archive(bytes: &[u8]) -> Result<Vec<PatchRecord>> {
    if bytes.len() < 4 || &bytes[..4] != PATCH_ARCHIVE_MAGIC {
        return Err(Error::format(0, "not a patch archive (bad magic)"));
    }
    let mut cur = std::io::Cursor::new(&bytes[4..]);
    let truncated = |cur: &std::io::Cursor<&[u8]>| {
        Error::format(4 + cur.position(), "patch archive is truncated")
    };
    let size = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
    let count = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))?;
    let n = size * size * size;
    let record_len = 12 + 8 * n as u64;
    let remaining = bytes.len() as u64 - 16;
    if count.checked_mul(record_len) != Some(remaining) {
        return Err(Error::format(
            16,
            format!("{count} records of size {size} need {} payload bytes, found {remaining}",
                count.saturating_mul(record_len)),
        ));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut origin = [0usize; 3];
        for o in origin.iter_mut() {
            *o = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
        }
        let mut read = |len: usize| -> Result<Vec<f32>> {
            let mut raw = vec![0u8; 4 * len];
            cur.read_exact(&mut raw).map_err(|_| truncated(&cur))?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let source = read(n)?;
        let target = read(n)?;
        out.push(PatchRecord {
            spec: PatchSpec { origin, size },
            source,
            target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(dims: Dims, v: f32) -> Volume {
        Volume::new(dims, [1.0; 3], vec![v; dims.iter().product()]).unwrap()
    }

    fn cfg(p: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            patch_size: p,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn weight_branches() {
        let c = SamplerConfig::default();
        assert_eq!(patch_weight(0.2, &c), 1.0);
        assert_eq!(patch_weight(0.05, &c), 0.0);
        assert!((patch_weight(0.4, &c) - 10.0 * (-6.6f64 * 0.4).exp()).abs() < 1e-15);
        assert!((patch_weight(0.4, &c) - 0.71362).abs() < 1e-5);
        let mut prev = patch_weight(0.3500001, &c);
        for i in 1..100 {
            let w = patch_weight(0.35 + i as f64 * 0.0065, &c);
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn in_range_volume_accepts_everything() {
        let v = constant([24, 20, 18], 0.2);
        let mut s = Sampler::new(&v, &v, &cfg(16, 3)).unwrap();
        let specs = s.sample(50).unwrap();
        assert_eq!(specs.len(), 50);
        assert_eq!(s.stats(), SamplerStats { draws: 50, accepted: 50 });
    }

    #[test]
    fn blank_volume_exhausts_budget() {
        let v = constant([20, 20, 20], 0.0);
        let c = SamplerConfig { max_draws: 500, ..cfg(16, 1) };
        match sample_patches(&v, &v, 4, &c) {
            Err(Error::Sampling(msg)) => assert!(msg.contains("after 500 draws"), "{msg}"),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn mean_uses_both_volumes() {
        let a = constant([16, 16, 16], 0.1);
        let b = constant([16, 16, 16], 0.3);
        let s = Sampler::new(&a, &b, &cfg(16, 0)).unwrap();
        let m = s.patch_mean(&PatchSpec { origin: [0; 3], size: 16 });
        assert!((m - 0.2).abs() < 1e-6);
        assert!(Sampler::new(&a, &constant([16, 16, 17], 0.1), &cfg(16, 0)).is_err());
        assert!(Sampler::new(&a, &b, &cfg(32, 0)).is_err());
    }

    #[test]
    fn fixed_threshold_mode() {
        let c = SamplerConfig { mode: SamplingMode::FixedThreshold(0.2), ..SamplerConfig::default() };
        assert_eq!(acceptance_probability(0.25, &c), 1.0);
        assert_eq!(acceptance_probability(0.9, &c), 1.0);
        assert_eq!(acceptance_probability(0.15, &c), 0.0);
    }

    #[test]
    fn csv_roundtrip() {
        let specs = vec![
            PatchSpec { origin: [0, 4, 9], size: 16 },
            PatchSpec { origin: [3, 2, 1], size: 16 },
        ];
        let text = specs_to_csv(&specs);
        assert!(text.starts_with("i,j,k,P\n0,4,9,16\n"));
        assert_eq!(specs_from_csv(&text).unwrap(), specs);
        assert!(matches!(specs_from_csv("i,j,k,P\n1,2,x,4\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn archive_roundtrip() {
        let v = Volume::from_fn([20, 20, 20], [1.0; 3], |i, j, k| (i + 2 * j + 3 * k) as f32 / 120.0).unwrap();
        let specs = vec![PatchSpec { origin: [1, 2, 3], size: 16 }, PatchSpec { origin: [4, 0, 2], size: 16 }];
        let recs = extract_records(&v, &v, &specs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ivp");
        write_patch_archive(&path, &recs).unwrap();
        assert_eq!(read_patch_archive(&path).unwrap(), recs);
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(decode_patch_archive(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(decode_patch_archive(b"NOPE"), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sampled_patches_fit(
            nx in 16usize..40, ny in 16usize..40, nz in 16usize..40, seed in 0u64..1000, v in 0.1f32..0.35
        ) {
            let vol = constant([nx, ny, nz], v);
            let specs = sample_patches(&vol, &vol, 20, &cfg(16, seed)).unwrap();
            prop_assert_eq!(specs.len(), 20);
            for s in specs {
                prop_assert!(s.fits([nx, ny, nz]));
            }
        }
    }
}
