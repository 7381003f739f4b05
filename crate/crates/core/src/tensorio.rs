//! Dense-matrix data model and the bit-exact RSQT / RSQB / RSQQ file formats.
//!
//! On-disk payloads are little-endian float32; in memory everything is f64.
//! Writers are atomic (temp file + rename) and readers reject every invariant
//! violation before a value escapes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const RSQT_MAGIC: &[u8; 4] = b"RSQT";
pub const RSQB_MAGIC: &[u8; 4] = b"RSQB";
pub const RSQQ_MAGIC: &[u8; 4] = b"RSQQ";
pub const FORMAT_VERSION: u32 = 1;

/// Dense M x N real matrix, row-major. Rows are the output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Validation(format!(
                "matrix dims must be >= 1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry at flat index {i}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols]).expect("zero matrix is valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Per-calibration-sample loss gradients, all shaped like the target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    samples: Vec<WeightMatrix>,
}

impl GradientBundle {
    pub fn new(samples: Vec<WeightMatrix>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation(
                "gradient bundle must contain at least one sample".into(),
            ));
        }
        let (rows, cols) = (samples[0].rows(), samples[0].cols());
        for (i, s) in samples.iter().enumerate() {
            if s.rows() != rows || s.cols() != cols {
                return Err(Error::Validation(format!(
                    "sample {i} has shape {}x{} but sample 0 is {rows}x{cols}",
                    s.rows(),
                    s.cols()
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[WeightMatrix] {
        &self.samples
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn rows(&self) -> usize {
        self.samples[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.samples[0].cols()
    }

    /// Element-wise mean over the samples, each an equally-weighted draw.
    pub fn mean(&self) -> WeightMatrix {
        let (rows, cols) = (self.rows(), self.cols());
        let mut acc = vec![0.0; rows * cols];
        for s in &self.samples {
            for (a, v) in acc.iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / self.samples.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        WeightMatrix::new(rows, cols, acc).expect("mean of finite samples is finite")
    }

    /// FNV-1a 64 over the canonical f32 byte stream of every sample, used as
    /// a provenance link between a quantized artifact and its calibration data.
    pub fn digest(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf29ce484222325;
        const FNV_PRIME: u64 = 0x100000001b3;
        let mut h = FNV_OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        eat(&(self.rows() as u64).to_le_bytes());
        eat(&(self.cols() as u64).to_le_bytes());
        eat(&(self.samples.len() as u32).to_le_bytes());
        for s in &self.samples {
            for v in s.data() {
                eat(&(*v as f32).to_le_bytes());
            }
        }
        h
    }

    pub fn transpose(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s.transpose()).collect(),
        }
    }
}

/// One sensitivity group of a quantized artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    /// Channel ids in this group, sorted ascending.
    pub channel_indices: Vec<u32>,
    /// Unified bits per weight for the group.
    pub group_bits: f32,
    /// K x v centroids, row-major.
    pub codebook: Vec<f64>,
    /// Codeword ids, one per v-vector, in (channel order, position) order.
    pub indices: Vec<u32>,
}

impl GroupBlock {
    pub fn codebook_len(&self) -> usize {
        self.codebook.len()
    }
}

/// Quantized form of a weight matrix: group layout, codebooks, packed indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub vector_length: usize,
    /// Zero-padding appended to the last vector of each channel row.
    pub pad: usize,
    /// Digest of the gradient bundle used for calibration.
    pub mean_gradient_digest: u64,
    pub groups: Vec<GroupBlock>,
}

impl QuantizedTensor {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.vector_length == 0 {
            return Err(Error::Validation("zero dimension in artifact".into()));
        }
        let padded = self.cols + self.pad;
        if padded % self.vector_length != 0 {
            return Err(Error::Validation(format!(
                "cols {} + pad {} not divisible by vector length {}",
                self.cols, self.pad, self.vector_length
            )));
        }
        if self.pad >= self.vector_length {
            return Err(Error::Validation(format!(
                "pad {} must be < vector length {}",
                self.pad, self.vector_length
            )));
        }
        let per_channel = padded / self.vector_length;
        let mut seen = vec![false; self.rows];
        for (gi, g) in self.groups.iter().enumerate() {
            if g.codebook.is_empty() || g.codebook.len() % self.vector_length != 0 {
                return Err(Error::Validation(format!(
                    "group {gi}: codebook length {} not a multiple of v={}",
                    g.codebook.len(),
                    self.vector_length
                )));
            }
            let k = g.codebook.len() / self.vector_length;
            if g.indices.len() != g.channel_indices.len() * per_channel {
                return Err(Error::Validation(format!(
                    "group {gi}: {} indices for {} channels x {} vectors",
                    g.indices.len(),
                    g.channel_indices.len(),
                    per_channel
                )));
            }
            for &idx in &g.indices {
                if idx as usize >= k {
                    return Err(Error::Validation(format!(
                        "group {gi}: index {idx} out of codebook range {k}"
                    )));
                }
            }
            if let Some(v) = g.codebook.iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "group {gi}: non-finite codebook entry {v}"
                )));
            }
            for &c in &g.channel_indices {
                let c = c as usize;
                if c >= self.rows || seen[c] {
                    return Err(Error::Validation(format!(
                        "group {gi}: channel {c} out of range or repeated"
                    )));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation(
                "groups do not cover every channel".into(),
            ));
        }
        Ok(())
    }

    pub fn vectors_per_channel(&self) -> usize {
        (self.cols + self.pad) / self.vector_length
    }
}

// ---------------------------------------------------------------------------
// byte-level helpers

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated at offset {} (wanted {n} more bytes)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn check_magic(r: &mut ByteReader, magic: &[u8; 4], what: &str) -> Result<()> {
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {:?} for {what}",
            r.path.display(),
            String::from_utf8_lossy(m)
        )));
    }
    Ok(())
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: what.into(),
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Atomic write: temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into()),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// RSQT: single tensor

fn encode_tensor(w: &WeightMatrix, out: &mut Vec<u8>) {
    out.extend_from_slice(RSQT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(w.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(w.cols() as u64).to_le_bytes());
    for v in w.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn decode_tensor(r: &mut ByteReader) -> Result<WeightMatrix> {
    check_magic(r, RSQT_MAGIC, "RSQT tensor")?;
    check_version(r.u32()?, "RSQT tensor")?;
    let ndims = r.u32()?;
    if ndims != 2 {
        return Err(Error::Format(format!(
            "{}: expected 2 dims, got {ndims}",
            r.path.display()
        )));
    }
    let rows = r.u64()?;
    let cols = r.u64()?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n > 0 && n <= (u32::MAX as u64))
        .ok_or_else(|| {
            Error::Validation(format!(
                "{}: dim overflow or zero dim ({rows}x{cols})",
                r.path.display()
            ))
        })? as usize;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = r.f32()? as f64;
        if !v.is_finite() {
            return Err(Error::Validation(format!(
                "{}: non-finite payload value at index {i}",
                r.path.display()
            )));
        }
        data.push(v);
    }
    WeightMatrix::new(rows as usize, cols as usize, data)
}

pub fn write_tensor(w: &WeightMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(w, &mut bytes);
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    let path = path.as_ref();
    let buf = read_all(path)?;
    let mut r = ByteReader {
        buf: &buf,
        pos: 0,
        path,
    };
    let w = decode_tensor(&mut r)?;
    if !r.done() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// RSQB: gradient bundle (single container file), or a directory of RSQT files

pub fn write_bundle(b: &GradientBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(RSQB_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(b.sample_count() as u32).to_le_bytes());
    for s in b.samples() {
        encode_tensor(s, &mut bytes);
    }
    write_atomic(path.as_ref(), &bytes)
}

/// Reads a bundle from a RSQB container file or a directory of `grad_*.rsqt`
/// files consumed in filename order.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<GradientBundle> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "rsqt").unwrap_or(false))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Validation(format!(
                "{}: no .rsqt files in bundle directory",
                path.display()
            )));
        }
        let mut samples = Vec::with_capacity(names.len());
        for n in &names {
            let s = read_tensor(n)?;
            if let Some(first) = samples.first() {
                let first: &WeightMatrix = first;
                if !s.same_shape(first) {
                    return Err(Error::Validation(format!(
                        "{}: shape {}x{} disagrees with first sample {}x{}",
                        n.display(),
                        s.rows(),
                        s.cols(),
                        first.rows(),
                        first.cols()
                    )));
                }
            }
            samples.push(s);
        }
        return GradientBundle::new(samples);
    }
    let buf = read_all(path)?;
    let mut r = ByteReader {
        buf: &buf,
        pos: 0,
        path,
    };
    check_magic(&mut r, RSQB_MAGIC, "RSQB bundle")?;
    check_version(r.u32()?, "RSQB bundle")?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Validation(format!(
            "{}: empty bundle (sample count 0)",
            path.display()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let s = decode_tensor(&mut r)?;
        if let Some(first) = samples.first() {
            let first: &WeightMatrix = first;
            if !s.same_shape(first) {
                return Err(Error::Validation(format!(
                    "{}: sample {i} shape {}x{} disagrees with sample 0 {}x{}",
                    path.display(),
                    s.rows(),
                    s.cols(),
                    first.rows(),
                    first.cols()
                )));
            }
        }
        samples.push(s);
    }
    if !r.done() {
        return Err(Error::Format(format!(
            "{}: trailing bytes after last sample",
            path.display()
        )));
    }
    GradientBundle::new(samples)
}

// ---------------------------------------------------------------------------
// RSQQ: quantized artifact

pub fn index_width(k: usize) -> u8 {
    debug_assert!(k >= 1);
    let w = (usize::BITS - (k - 1).leading_zeros()) as u8;
    w.max(1)
}

fn pack_indices(indices: &[u32], width: u8) -> Vec<u8> {
    let total_bits = indices.len() * width as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &idx in indices {
        for b in 0..width as usize {
            if (idx >> b) & 1 == 1 {
                out[(bit + b) / 8] |= 1 << ((bit + b) % 8);
            }
        }
        bit += width as usize;
    }
    out
}

fn unpack_indices(bytes: &[u8], width: u8, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..width as usize {
            if (bytes[(bit + b) / 8] >> ((bit + b) % 8)) & 1 == 1 {
                v |= 1 << b;
            }
        }
        out.push(v);
        bit += width as usize;
    }
    out
}

pub fn write_quantized(q: &QuantizedTensor, path: impl AsRef<Path>) -> Result<()> {
    q.validate()?;
    let mut b = Vec::new();
    b.extend_from_slice(RSQQ_MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&(q.rows as u64).to_le_bytes());
    b.extend_from_slice(&(q.cols as u64).to_le_bytes());
    b.extend_from_slice(&(q.vector_length as u32).to_le_bytes());
    b.extend_from_slice(&(q.pad as u32).to_le_bytes());
    b.extend_from_slice(&q.mean_gradient_digest.to_le_bytes());
    b.extend_from_slice(&(q.groups.len() as u32).to_le_bytes());
    for g in &q.groups {
        b.extend_from_slice(&(g.channel_indices.len() as u32).to_le_bytes());
        for &c in &g.channel_indices {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b.extend_from_slice(&g.group_bits.to_le_bytes());
        let k = g.codebook.len() / q.vector_length;
        b.extend_from_slice(&(k as u32).to_le_bytes());
        for v in &g.codebook {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let width = index_width(k);
        b.push(width);
        b.extend_from_slice(&pack_indices(&g.indices, width));
    }
    write_atomic(path.as_ref(), &b)
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let path = path.as_ref();
    let buf = read_all(path)?;
    let mut r = ByteReader {
        buf: &buf,
        pos: 0,
        path,
    };
    check_magic(&mut r, RSQQ_MAGIC, "RSQQ artifact")?;
    check_version(r.u32()?, "RSQQ artifact")?;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let vector_length = r.u32()? as usize;
    let pad = r.u32()? as usize;
    let digest = r.u64()?;
    let group_count = r.u32()? as usize;
    if vector_length == 0 || rows == 0 || cols == 0 {
        return Err(Error::Validation(format!(
            "{}: zero dimension in header",
            path.display()
        )));
    }
    if (cols + pad) % vector_length != 0 {
        return Err(Error::Validation(format!(
            "{}: cols {cols} + pad {pad} not divisible by v={vector_length}",
            path.display()
        )));
    }
    let per_channel = (cols + pad) / vector_length;
    let mut groups = Vec::with_capacity(group_count);
    for gi in 0..group_count {
        let channel_count = r.u32()? as usize;
        let mut channel_indices = Vec::with_capacity(channel_count);
        for _ in 0..channel_count {
            channel_indices.push(r.u32()?);
        }
        let group_bits = r.f32()?;
        let k = r.u32()? as usize;
        if k == 0 {
            return Err(Error::Validation(format!(
                "{}: group {gi} has empty codebook",
                path.display()
            )));
        }
        let mut codebook = Vec::with_capacity(k * vector_length);
        for _ in 0..k * vector_length {
            codebook.push(r.f32()? as f64);
        }
        let width = r.u8()?;
        if width != index_width(k) {
            return Err(Error::Format(format!(
                "{}: group {gi} index width {width} inconsistent with K={k}",
                path.display()
            )));
        }
        let count = channel_count * per_channel;
        let packed = r.take((count * width as usize).div_ceil(8))?;
        let indices = unpack_indices(packed, width, count);
        groups.push(GroupBlock {
            channel_indices,
            group_bits,
            codebook,
            indices,
        });
    }
    if !r.done() {
        return Err(Error::Format(format!(
            "{}: trailing bytes after last group",
            path.display()
        )));
    }
    let q = QuantizedTensor {
        rows,
        cols,
        vector_length,
        pad,
        mean_gradient_digest: digest,
        groups,
    };
    q.validate()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn tensor_roundtrip_small() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.rsqt");
        let w = WeightMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&w, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn tensor_file_length_is_fixed_by_format() {
        // header: magic 4 + version 4 + ndims 4 + dims 16 = 28, plus one f32
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.rsqt");
        write_tensor(&WeightMatrix::new(1, 1, vec![0.0]).unwrap(), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 32);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.rsqt");
        fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        match read_tensor(&p) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_hard_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.rsqt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(RSQT_MAGIC);
        bytes.extend_from_slice(&7u32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        match read_tensor(&p) {
            Err(Error::UnsupportedVersion { found: 7, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected_before_write() {
        assert!(WeightMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn bundle_roundtrip_and_order() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.rsqb");
        let z = WeightMatrix::zeros(2, 3);
        let b = GradientBundle::new(vec![z.clone(), z.clone(), z]).unwrap();
        write_bundle(&b, &p).unwrap();
        let back = read_bundle(&p).unwrap();
        assert_eq!(b, back);
        assert_eq!(back.sample_count(), 3);
    }

    #[test]
    fn bundle_directory_filename_order() {
        let dir = tempdir().unwrap();
        let a = WeightMatrix::new(1, 1, vec![1.0]).unwrap();
        let b = WeightMatrix::new(1, 1, vec![2.0]).unwrap();
        write_tensor(&b, dir.path().join("grad_00001.rsqt")).unwrap();
        write_tensor(&a, dir.path().join("grad_00000.rsqt")).unwrap();
        let bundle = read_bundle(dir.path()).unwrap();
        assert_eq!(bundle.samples()[0].data(), &[1.0]);
        assert_eq!(bundle.samples()[1].data(), &[2.0]);
    }

    #[test]
    fn empty_bundle_rejected() {
        assert!(GradientBundle::new(vec![]).is_err());
    }

    #[test]
    fn bundle_shape_mismatch_names_sample() {
        let dir = tempdir().unwrap();
        write_tensor(
            &WeightMatrix::new(1, 1, vec![1.0]).unwrap(),
            dir.path().join("grad_00000.rsqt"),
        )
        .unwrap();
        write_tensor(
            &WeightMatrix::new(1, 2, vec![1.0, 2.0]).unwrap(),
            dir.path().join("grad_00001.rsqt"),
        )
        .unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("grad_00001"), "{err}");
    }

    #[test]
    fn quantized_roundtrip_single_group() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("q.rsqq");
        let q = QuantizedTensor {
            rows: 2,
            cols: 4,
            vector_length: 2,
            pad: 0,
            mean_gradient_digest: 42,
            groups: vec![GroupBlock {
                channel_indices: vec![0, 1],
                group_bits: 0.0,
                codebook: vec![0.5, -0.5],
                indices: vec![0, 0, 0, 0],
            }],
        };
        write_quantized(&q, &p).unwrap();
        assert_eq!(read_quantized(&p).unwrap(), q);
    }

    #[test]
    fn corrupted_index_out_of_range_rejected() {
        let q = QuantizedTensor {
            rows: 1,
            cols: 2,
            vector_length: 2,
            pad: 0,
            mean_gradient_digest: 0,
            groups: vec![GroupBlock {
                channel_indices: vec![0],
                group_bits: 1.0,
                codebook: vec![0.0, 0.0, 1.0, 1.0],
                indices: vec![2],
            }],
        };
        assert!(q.validate().is_err());
    }

    #[test]
    fn index_width_rules() {
        assert_eq!(index_width(1), 1);
        assert_eq!(index_width(2), 1);
        assert_eq!(index_width(3), 2);
        assert_eq!(index_width(4), 2);
        assert_eq!(index_width(5), 3);
        assert_eq!(index_width(256), 8);
    }

    #[test]
    fn pack_unpack_lsb_first() {
        let idx = vec![1u32, 0, 3, 2, 1];
        let packed = pack_indices(&idx, 2);
        // 01 00 11 10 01 LSB-first -> byte0 = 0b10110001
        assert_eq!(packed[0], 0b1011_0001);
        assert_eq!(unpack_indices(&packed, 2, 5), idx);
    }
}
