//! Portable binary cache of pre-extracted backbone features.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "KGFPCAC1"
//! version    u32      1
//! levels     u32      L
//! level[i]   3 x u32  channels, height, width
//! d_wk       u32
//! count      u64      number of records that follow
//! dtype      u8       0 = f32
//! record * count:
//!   id       u16 length + UTF-8 bytes
//!   pyramid  L tensors of channels*height*width f32, in level order, [C,H,W] row-major
//!   wk       d_wk f32
//!   label    u8       0 safe, 1 unsafe
//!   gt       u32
//!   matched  u32
//!   pred     u32
//!   domain   u16 length + UTF-8 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::LeReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 8] = b"KGFPCAC1";
pub const CACHE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One level of a feature pyramid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Level {
    pub fn new(name: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self { name: name.into(), channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Ordered pyramid levels, finest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<Level>,
}

impl PyramidSpec {
    /// Builds a spec from `(channels, height, width)` triples, naming levels `P3, P4, ...`.
    pub fn from_dims(dims: &[(usize, usize, usize)]) -> Result<Self> {
        let levels = dims.iter().enumerate().map(|(i, &(c, h, w))| Level::new(format!("P{}", i + 3), c, h, w)).collect();
        let spec = Self { levels };
        spec.validate()?;
        Ok(spec)
    }

    /// Full-size detector pyramid at 640x640 input.
    pub fn full() -> Self {
        Self::from_dims(&[(256, 80, 80), (512, 40, 40), (512, 20, 20)]).expect("valid")
    }

    /// Same 2x geometry, small enough for single-core training.
    pub fn desk() -> Self {
        Self::from_dims(&[(16, 16, 16), (32, 8, 8), (32, 4, 4)]).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        for l in &self.levels {
            if l.channels == 0 || l.height == 0 || l.width == 0 {
                return Err(Error::InvalidArgument(format!("level {} has a zero extent", l.name)));
            }
        }
        for pair in self.levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.height > a.height || b.width > a.width || b.height * b.width >= a.height * a.width {
                return Err(Error::InvalidArgument(format!(
                    "spatial size must strictly decrease: {} {}x{} then {} {}x{}",
                    a.name, a.height, a.width, b.name, b.height, b.width
                )));
            }
        }
        Ok(())
    }

    pub fn finest(&self) -> &Level {
        &self.levels[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SafetyLabel {
    Safe = 0,
    Unsafe = 1,
}

impl SafetyLabel {
    /// Failure label: unsafe iff some safety-critical object went unmatched.
    pub fn from_counts(gt_count: u32, matched_count: u32) -> Self {
        if matched_count < gt_count {
            SafetyLabel::Unsafe
        } else {
            SafetyLabel::Safe
        }
    }

    pub fn is_unsafe(self) -> bool {
        self == SafetyLabel::Unsafe
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

/// One image: pyramid features, world-knowledge embedding, and detection outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub pyramid: Vec<Tensor<f32>>,
    pub wk: Tensor<f32>,
    pub label: SafetyLabel,
    pub gt_count: u32,
    pub matched_count: u32,
    pub pred_count: u32,
    pub domain: String,
}

impl FeatureRecord {
    pub fn check_counts(&self) -> Result<()> {
        let ok = self.matched_count <= self.gt_count
            && self.matched_count <= self.pred_count
            && self.label == SafetyLabel::from_counts(self.gt_count, self.matched_count);
        if ok {
            Ok(())
        } else {
            Err(Error::LabelInvariant(self.id.clone()))
        }
    }

    pub fn check_shapes(&self, spec: &PyramidSpec, d_wk: usize) -> Result<()> {
        if self.pyramid.len() != spec.levels.len() {
            return Err(Error::shape(
                "record",
                format!("{}: {} pyramid levels, spec has {}", self.id, self.pyramid.len(), spec.levels.len()),
            ));
        }
        for (t, l) in self.pyramid.iter().zip(&spec.levels) {
            if t.shape() != l.shape() {
                return Err(Error::shape(
                    "record",
                    format!("{}: level {} is {:?}, expected {:?}", self.id, l.name, t.shape(), l.shape()),
                ));
            }
        }
        if self.wk.len() != d_wk {
            return Err(Error::shape("record", format!("{}: wk length {}, expected {d_wk}", self.id, self.wk.len())));
        }
        Ok(())
    }

    pub fn validate(&self, spec: &PyramidSpec, d_wk: usize) -> Result<()> {
        self.check_shapes(spec, d_wk)?;
        self.check_counts()
    }
}

/// Contents of one cache file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub spec: PyramidSpec,
    pub d_wk: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureCache {
    pub fn new(spec: PyramidSpec, d_wk: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        spec.validate()?;
        for r in &records {
            r.validate(&spec, d_wk)?;
        }
        Ok(Self { spec, d_wk, records })
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("string too long: {} bytes", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Serializes a cache; validates every record first.
pub fn write_cache_to<W: Write>(w: &mut W, spec: &PyramidSpec, d_wk: usize, records: &[FeatureRecord]) -> Result<()> {
    spec.validate()?;
    for r in records {
        r.validate(spec, d_wk)?;
    }
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&u32_of(spec.levels.len(), "level count")?.to_le_bytes())?;
    for l in &spec.levels {
        for v in [l.channels, l.height, l.width] {
            w.write_all(&u32_of(v, "level extent")?.to_le_bytes())?;
        }
    }
    w.write_all(&u32_of(d_wk, "d_wk")?.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    for r in records {
        write_str(w, &r.id)?;
        for t in &r.pyramid {
            write_f32s(w, t.data())?;
        }
        write_f32s(w, r.wk.data())?;
        w.write_all(&[r.label as u8])?;
        for c in [r.gt_count, r.matched_count, r.pred_count] {
            w.write_all(&c.to_le_bytes())?;
        }
        write_str(w, &r.domain)?;
    }
    Ok(())
}

pub fn write_cache(path: impl AsRef<Path>, spec: &PyramidSpec, d_wk: usize, records: &[FeatureRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cache_to(&mut w, spec, d_wk, records)?;
    w.flush()?;
    Ok(())
}

/// Parses a cache, checking the header, every record's shapes and the label invariant.
pub fn read_cache_from<R: Read>(r: R) -> Result<FeatureCache> {
    let mut r = LeReader::new(r, "cache");
    r.magic(CACHE_MAGIC)?;
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Version { expected: CACHE_VERSION, found: version });
    }
    let n_levels = r.u32("level count")? as usize;
    let mut dims = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let c = r.u32("level channels")? as usize;
        let h = r.u32("level height")? as usize;
        let w = r.u32("level width")? as usize;
        dims.push((c, h, w));
    }
    let spec = PyramidSpec::from_dims(&dims).map_err(|e| Error::Format(format!("bad pyramid header: {e}")))?;
    let d_wk = r.u32("d_wk")? as usize;
    if d_wk == 0 {
        return Err(Error::Format("d_wk must be positive".into()));
    }
    let count = r.u64("record count")?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let mut records = Vec::new();
    for i in 0..count {
        let field = |f: &str| format!("record {i} {f}");
        let id = r.string(&field("id"))?;
        let mut pyramid = Vec::with_capacity(spec.levels.len());
        for l in &spec.levels {
            let data = r.f32s(l.len(), &field(&l.name))?;
            pyramid.push(Tensor::new(l.shape().to_vec(), data)?);
        }
        let wk = Tensor::new([d_wk], r.f32s(d_wk, &field("wk"))?)?;
        let label = match r.u8(&field("label"))? {
            0 => SafetyLabel::Safe,
            1 => SafetyLabel::Unsafe,
            other => return Err(Error::Format(format!("record {i}: label byte {other}"))),
        };
        let gt_count = r.u32(&field("gt count"))?;
        let matched_count = r.u32(&field("matched count"))?;
        let pred_count = r.u32(&field("pred count"))?;
        let domain = r.string(&field("domain"))?;
        let rec = FeatureRecord { id, pyramid, wk, label, gt_count, matched_count, pred_count, domain };
        rec.check_counts()?;
        records.push(rec);
    }
    if !r.at_end()? {
        return Err(Error::Format(format!("trailing bytes after {count} records")));
    }
    Ok(FeatureCache { spec, d_wk, records })
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<FeatureCache> {
    read_cache_from(BufReader::new(File::open(path)?))
}
