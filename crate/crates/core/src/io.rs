//! Binary file formats.
//!
//! All integers and floats are little-endian.
//!
//! Tensor file (`SPRF`):
//!
//! ```text
//! magic "SPRF" | version u32 = 1 | dtype u8 (0 = f32) | ndim u32 | dims u32 * ndim | values
//! ```
//!
//! Reference KV cache (`SPRK`):
//!
//! ```text
//! magic "SPRK" | version u32 = 1 | count u32 (>= 1)
//! count * ( t u32 | layer u32 | K tensor file | V tensor file )
//! crc32 u32 of every preceding byte
//! ```
//!
//! Cross-attention maps (`SPRM`) follow the same layout with entries
//! `t u32 | layer u32 | token u32 | map tensor file [h, w]`.
//!
//! Entries are sorted by key with no duplicates. A latent trajectory is a
//! single tensor file of shape `[T + 1, C, H, W]`.
//!
//! Images are binary netpbm: P6 (RGB) and P5 (gray), maxval 255.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};

use crate::attention::ReferenceFeatureCache;
use crate::error::{Result, SpecRefError};
use crate::image::{GrayImage, RgbImage};
use crate::masks::CrossAttnRecord;
use crate::schedule::{LatentState, LatentTrajectory};

pub const TENSOR_MAGIC: &[u8; 4] = b"SPRF";
pub const KV_MAGIC: &[u8; 4] = b"SPRK";
pub const MAPS_MAGIC: &[u8; 4] = b"SPRM";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

const MAX_NDIM: usize = 8;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(SpecRefError::TruncatedPayload)?;
        if end > self.buf.len() {
            return Err(SpecRefError::TruncatedPayload);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| SpecRefError::CorruptHeader("file too short".into()))?;
        if got != expected {
            return Err(SpecRefError::CorruptHeader(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(SpecRefError::CorruptHeader(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SpecRefError::InvalidRequest(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Appends the tensor file encoding of `(shape, values)` to `out`.
pub fn encode_tensor<'a>(
    out: &mut Vec<u8>,
    shape: &[usize],
    values: impl IntoIterator<Item = &'a f32>,
) -> Result<()> {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    let start = out.len();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let expected: usize = shape.iter().product::<usize>() * 4;
    if out.len() - start != expected {
        return Err(SpecRefError::shape(expected / 4, (out.len() - start) / 4));
    }
    Ok(())
}

fn decode_tensor(r: &mut ByteReader<'_>) -> Result<ArrayD<f32>> {
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(SpecRefError::CorruptHeader(format!("unknown dtype code {dtype}")));
    }
    let ndim = r.u32()? as usize;
    if ndim > MAX_NDIM {
        return Err(SpecRefError::CorruptHeader(format!("implausible rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| SpecRefError::CorruptHeader(format!("dims {dims:?} overflow")))?;
    let payload = r.take(count)?;
    let values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length matches dims"))
}

pub fn tensor_to_bytes(tensor: &ArrayD<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 4 * tensor.ndim() + 4 * tensor.len());
    encode_tensor(&mut out, tensor.shape(), tensor.iter())?;
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let mut r = ByteReader::new(bytes);
    let t = decode_tensor(&mut r)?;
    if !r.is_empty() {
        return Err(SpecRefError::CorruptHeader("trailing bytes after payload".into()));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &ArrayD<f32>) -> Result<()> {
    fs::write(path, tensor_to_bytes(tensor)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    tensor_from_bytes(&fs::read(path)?)
}

/// CRC-32 of the latent's values as little-endian `f32` bytes.
pub fn latent_checksum(latent: &LatentState) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for v in latent.data.iter() {
        hasher.update(&v.to_le_bytes());
    }
    hasher.finalize()
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn unseal(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(SpecRefError::CorruptHeader("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(SpecRefError::ChecksumMismatch { stored, computed });
    }
    Ok(body)
}

fn as_2d(t: ArrayD<f32>, what: &str) -> Result<Array2<f32>> {
    t.into_dimensionality().map_err(|_| SpecRefError::CorruptHeader(format!("{what} is not a matrix")))
}

pub fn kv_cache_to_bytes(cache: &ReferenceFeatureCache) -> Result<Vec<u8>> {
    if cache.is_empty() {
        return Err(SpecRefError::InvalidRequest("refusing to write an empty KV cache".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(KV_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, cache.len())?;
    for (t, layer, k, v) in cache.iter() {
        put_u32(&mut out, t)?;
        put_u32(&mut out, layer)?;
        encode_tensor(&mut out, k.shape(), k.iter())?;
        encode_tensor(&mut out, v.shape(), v.iter())?;
    }
    Ok(seal(out))
}

pub fn kv_cache_from_bytes(bytes: &[u8]) -> Result<ReferenceFeatureCache> {
    ByteReader::new(bytes).magic(KV_MAGIC)?;
    let body = unseal(bytes)?;
    let mut r = ByteReader { buf: body, pos: 4 };
    r.version()?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(SpecRefError::CorruptHeader("KV cache has no entries".into()));
    }
    let mut cache = ReferenceFeatureCache::new();
    let mut last: Option<(usize, usize)> = None;
    for _ in 0..count {
        let key = (r.u32()? as usize, r.u32()? as usize);
        let k = as_2d(decode_tensor(&mut r)?, "key tensor")?;
        let v = as_2d(decode_tensor(&mut r)?, "value tensor")?;
        if last == Some(key) {
            return Err(SpecRefError::DuplicateEntry { t: key.0, layer: key.1 });
        }
        if last.is_some_and(|l| l > key) {
            return Err(SpecRefError::CorruptHeader(format!("entry {key:?} out of order")));
        }
        last = Some(key);
        cache.insert(key.0, key.1, k, v)?;
    }
    if !r.is_empty() {
        return Err(SpecRefError::CorruptHeader("trailing bytes after entries".into()));
    }
    Ok(cache)
}

pub fn write_kv_cache(path: impl AsRef<Path>, cache: &ReferenceFeatureCache) -> Result<()> {
    fs::write(path, kv_cache_to_bytes(cache)?)?;
    Ok(())
}

pub fn read_kv_cache(path: impl AsRef<Path>) -> Result<ReferenceFeatureCache> {
    kv_cache_from_bytes(&fs::read(path)?)
}

pub fn maps_to_bytes(record: &CrossAttnRecord) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAPS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, record.len())?;
    for ((t, layer, token), map) in record.iter() {
        let res = record.resolution(layer).expect("every recorded layer has a resolution");
        put_u32(&mut out, t)?;
        put_u32(&mut out, layer)?;
        put_u32(&mut out, token)?;
        encode_tensor(&mut out, &[res.0, res.1], map.iter())?;
    }
    Ok(seal(out))
}

pub fn maps_from_bytes(bytes: &[u8]) -> Result<CrossAttnRecord> {
    ByteReader::new(bytes).magic(MAPS_MAGIC)?;
    let body = unseal(bytes)?;
    let mut r = ByteReader { buf: body, pos: 4 };
    r.version()?;
    let count = r.u32()? as usize;
    let mut record = CrossAttnRecord::new();
    let mut last: Option<(usize, usize, usize)> = None;
    for _ in 0..count {
        let key = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let map = as_2d(decode_tensor(&mut r)?, "attention map")?;
        if last.is_some_and(|l| l >= key) {
            return Err(SpecRefError::CorruptHeader(format!("entry {key:?} out of order")));
        }
        last = Some(key);
        let res = map.dim();
        record.insert(key.0, key.1, res, key.2, map.into_iter().collect())?;
    }
    if !r.is_empty() {
        return Err(SpecRefError::CorruptHeader("trailing bytes after entries".into()));
    }
    Ok(record)
}

pub fn write_maps(path: impl AsRef<Path>, record: &CrossAttnRecord) -> Result<()> {
    fs::write(path, maps_to_bytes(record)?)?;
    Ok(())
}

pub fn read_maps(path: impl AsRef<Path>) -> Result<CrossAttnRecord> {
    maps_from_bytes(&fs::read(path)?)
}

pub fn trajectory_to_tensor(traj: &LatentTrajectory) -> ArrayD<f32> {
    let views: Vec<_> = traj.states().iter().map(|s| s.data.view()).collect();
    ndarray::stack(Axis(0), &views).expect("trajectory latents share a shape").into_dyn()
}

pub fn trajectory_from_tensor(t: ArrayD<f32>) -> Result<LatentTrajectory> {
    if t.ndim() != 4 || t.shape()[0] < 2 {
        return Err(SpecRefError::CorruptHeader(format!(
            "trajectory tensor must be [T+1, C, H, W] with T >= 1, got {:?}",
            t.shape()
        )));
    }
    let states = t
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, s)| {
            let data: Array3<f32> = s.to_owned().into_dimensionality().expect("rank checked");
            LatentState::new(data, i)
        })
        .collect();
    LatentTrajectory::new(states)
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &LatentTrajectory) -> Result<()> {
    write_tensor(path, &trajectory_to_tensor(traj))
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<LatentTrajectory> {
    trajectory_from_tensor(read_tensor(path)?)
}

struct NetpbmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<NetpbmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(SpecRefError::MalformedHeader("missing netpbm magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    match &magic {
        b"P5" | b"P6" => {}
        b"P1" | b"P2" | b"P3" => {
            return Err(SpecRefError::UnsupportedFormat(format!(
                "ASCII netpbm variant {}",
                String::from_utf8_lossy(&magic)
            )))
        }
        b"P4" | b"P7" => {
            return Err(SpecRefError::UnsupportedFormat(format!(
                "netpbm variant {}",
                String::from_utf8_lossy(&magic)
            )))
        }
        _ => return Err(SpecRefError::MalformedHeader("unknown netpbm magic".into())),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(SpecRefError::MalformedHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(SpecRefError::MalformedHeader(format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| SpecRefError::MalformedHeader("number too large".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(SpecRefError::MalformedHeader("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(SpecRefError::MalformedHeader("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(SpecRefError::MalformedHeader(format!("invalid maxval {maxval}")));
    }
    if maxval != 255 {
        return Err(SpecRefError::UnsupportedFormat(format!(
            "maxval {maxval}; only 8-bit (255) images are supported"
        )));
    }
    Ok(NetpbmHeader { magic, width, height, data_start: pos })
}

fn netpbm_payload(bytes: &[u8], header: &NetpbmHeader, channels: usize) -> Result<Vec<u8>> {
    let len = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| SpecRefError::MalformedHeader("image too large".into()))?;
    let data = &bytes[header.data_start..];
    if data.len() < len {
        return Err(SpecRefError::TruncatedPayload);
    }
    Ok(data[..len].to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_netpbm_header(bytes)?;
    if &header.magic != b"P6" {
        return Err(SpecRefError::UnsupportedFormat("expected a P6 image".into()));
    }
    let pixels = netpbm_payload(bytes, &header, 3)?;
    RgbImage::new(header.width, header.height, pixels)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let header = parse_netpbm_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(SpecRefError::UnsupportedFormat("expected a P5 image".into()));
    }
    let pixels = netpbm_payload(bytes, &header, 1)?;
    GrayImage::new(header.width, header.height, pixels)
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(image))?;
    Ok(())
}
