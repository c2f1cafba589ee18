//! Binary PGM/PPM images, FMT1 tensor records and parameter checkpoints.
//!
//! FMT1 layout: `b"FMT1"`, `u32` rank, `rank × u64` extents, `u8` dtype
//! (0 = f64, 1 = f32, 2 = interleaved complex f64), then the little-endian
//! payload. Images are written with the canonical header
//! `P5\n<w> <h>\n255\n` (or `P6`), so files in that form round-trip byte
//! for byte.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, ComplexTensor, Tensor};

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

/// Decoded 8-bit PNM raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major, channels interleaved.
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(parse_err(1, "only binary P5 and P6 are supported")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image extent"));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(parse_err(cur.pos, "expected single whitespace after maxval")),
    }
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(parse_err(bytes.len(), format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(parse_err(cur.pos + need, "trailing bytes after payload"));
    }
    Ok(Pnm {
        channels,
        width,
        height,
        pixels: payload.to_vec(),
    })
}

pub fn encode_pnm(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Pnm {
    /// `[C, H, W]` tensor with values `p / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        let mut data = vec![0.0; c * hw];
        for (i, px) in self.pixels.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * hw + i] = v as f64 / 255.0;
            }
        }
        Tensor::from_vec(&[c, self.height, self.width], data).expect("sized from header")
    }

    /// Accepts `[H, W]` (gray) or `[C, H, W]` with `C ∈ {1, 3}`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] if c == 1 || c == 3 => (c, h, w),
            _ => return Err(shape_err("Pnm::from_tensor", "[H,W] or [1|3,H,W]", format!("{:?}", t.shape()))),
        };
        let hw = h * w;
        let d = t.data();
        let mut pixels = vec![0u8; c * hw];
        for i in 0..hw {
            for ch in 0..c {
                pixels[i * c + ch] = to_u8(d[ch * hw + i]);
            }
        }
        Ok(Self { channels: c, width: w, height: h, pixels })
    }
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    decode_pnm(&fs::read(path)?)
}

/// Grayscale image as `[H, W]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let img = read_pnm(path)?;
    if img.channels != 1 {
        return Err(invalid("read_pgm", format!("{} is not a P5 file", path.display())));
    }
    let t = img.to_tensor();
    t.reshape(&t.shape()[1..])
}

/// Colour image as `[3, H, W]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = read_pnm(path)?;
    if img.channels != 3 {
        return Err(invalid("read_ppm", format!("{} is not a P6 file", path.display())));
    }
    Ok(img.to_tensor())
}

pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let img = Pnm::from_tensor(t)?;
    if img.channels != 1 {
        return Err(shape_err("write_pgm", "one channel", format!("{:?}", t.shape())));
    }
    fs::write(path, encode_pnm(&img))?;
    Ok(())
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let img = Pnm::from_tensor(t)?;
    if img.channels != 3 {
        return Err(shape_err("write_ppm", "three channels", format!("{:?}", t.shape())));
    }
    fs::write(path, encode_pnm(&img))?;
    Ok(())
}

const MAGIC: &[u8; 4] = b"FMT1";

/// Payload of one FMT1 record.
#[derive(Clone, Debug, PartialEq)]
pub enum Fmt1 {
    F64(Tensor),
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Complex(ComplexTensor),
}

impl Fmt1 {
    pub fn shape(&self) -> &[usize] {
        match self {
            Fmt1::F64(t) => t.shape(),
            Fmt1::F32 { shape, .. } => shape,
            Fmt1::Complex(c) => c.shape(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Fmt1::F64(_) => 0,
            Fmt1::F32 { .. } => 1,
            Fmt1::Complex(_) => 2,
        }
    }

    /// Real tensor view; f32 payloads are widened.
    pub fn into_real(self) -> Result<Tensor> {
        match self {
            Fmt1::F64(t) => Ok(t),
            Fmt1::F32 { shape, data } => Tensor::from_vec(&shape, data.into_iter().map(f64::from).collect()),
            Fmt1::Complex(_) => Err(invalid("Fmt1::into_real", "complex payload")),
        }
    }
}

pub fn encode_fmt1(rec: &Fmt1) -> Vec<u8> {
    let shape = rec.shape();
    let mut out = Vec::with_capacity(9 + 8 * shape.len() + 16 * numel(shape));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(rec.dtype());
    match rec {
        Fmt1::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Fmt1::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Fmt1::Complex(c) => {
            for (re, im) in c.re().data().iter().zip(c.im().data()) {
                out.extend_from_slice(&re.to_le_bytes());
                out.extend_from_slice(&im.to_le_bytes());
            }
        }
    }
    out
}

/// Decodes one record starting at `bytes[0]`, returning it and the number
/// of bytes consumed. Parse offsets are relative to `base`.
pub fn decode_fmt1_at(bytes: &[u8], base: usize) -> Result<(Fmt1, usize)> {
    let take = |pos: usize, n: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(pos..pos + n)
            .ok_or_else(|| parse_err(base + bytes.len(), format!("truncated {what}: need {n} bytes at offset {}", base + pos)))
    };
    if take(0, 4, "magic")? != MAGIC {
        return Err(parse_err(base, "bad magic, expected FMT1"));
    }
    let rank = u32::from_le_bytes(take(4, 4, "rank")?.try_into().expect("4 bytes")) as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(pos, 8, "extent")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| parse_err(base + pos, "extent too large"))?);
        pos += 8;
    }
    let dtype = take(pos, 1, "dtype")?[0];
    let dtype_at = pos;
    pos += 1;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| parse_err(base + 8, "element count overflows"))?;
    let width = match dtype {
        0 => 8,
        1 => 4,
        2 => 16,
        t => return Err(parse_err(base + dtype_at, format!("unknown dtype tag {t}"))),
    };
    let payload = take(pos, n * width, "payload")?;
    let f64s = |chunk: &[u8]| f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    let rec = match dtype {
        0 => Fmt1::F64(Tensor::from_vec(&shape, payload.chunks_exact(8).map(f64s).collect())?),
        1 => Fmt1::F32 {
            shape,
            data: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
        },
        _ => {
            let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for c in payload.chunks_exact(16) {
                re.push(f64s(&c[..8]));
                im.push(f64s(&c[8..]));
            }
            Fmt1::Complex(ComplexTensor::new(Tensor::from_vec(&shape, re)?, Tensor::from_vec(&shape, im)?)?)
        }
    };
    Ok((rec, pos + n * width))
}

pub fn decode_fmt1(bytes: &[u8]) -> Result<Fmt1> {
    let (rec, used) = decode_fmt1_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(parse_err(used, "trailing bytes after record"));
    }
    Ok(rec)
}

pub fn write_fmt1(path: &Path, rec: &Fmt1) -> Result<()> {
    fs::write(path, encode_fmt1(rec))?;
    Ok(())
}

pub fn read_fmt1(path: &Path) -> Result<Fmt1> {
    decode_fmt1(&fs::read(path)?)
}

pub const CHECKPOINT_TENSORS: &str = "params.fmt1";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub config: C,
    pub params: Vec<ManifestEntry>,
}

/// Writes every parameter as consecutive f64 FMT1 records into
/// `dir/params.fmt1`, plus a JSON manifest with names, shapes and offsets.
pub fn save_checkpoint<C: Serialize>(dir: &Path, config: &C, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for p in store.params() {
        let rec = encode_fmt1(&Fmt1::F64(p.value.clone()));
        params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            bytes: rec.len(),
        });
        blob.extend_from_slice(&rec);
    }
    fs::write(dir.join(CHECKPOINT_TENSORS), blob)?;
    let manifest = Manifest { config, params };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), json)?;
    Ok(())
}

pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path) -> Result<(C, Vec<(String, Tensor)>)> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: Manifest<C> = serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let blob = fs::read(dir.join(CHECKPOINT_TENSORS))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let slice = blob
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| parse_err(blob.len(), format!("record {} extends past end of file", e.name)))?;
        let (rec, used) = decode_fmt1_at(slice, e.offset)?;
        if used != e.bytes || rec.shape() != e.shape {
            return Err(parse_err(e.offset, format!("record {} disagrees with manifest", e.name)));
        }
        out.push((e.name, rec.into_real()?));
    }
    Ok((manifest.config, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_scaling() {
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[128; 6]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(encode_pnm(&img), bytes);
        let t = img.to_tensor();
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-15));
        assert_eq!(Pnm::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn comments_are_skipped() {
        let mut bytes = b"P6 # colour\n1 1\n255 ".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn truncated_and_malformed_files_report_offsets() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 5]);
        assert!(matches!(decode_pnm(&bytes), Err(Error::Parse { offset: 16, .. })));
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n"), Err(Error::Parse { offset: 1, .. })));
        assert!(matches!(decode_pnm(b"P5\n1 x"), Err(Error::Parse { offset: 5, .. })));
        let rec = encode_fmt1(&Fmt1::F64(Tensor::ones(&[2, 2])));
        assert!(matches!(decode_fmt1(&rec[..rec.len() - 1]), Err(Error::Parse { .. })));
        let mut bad = rec.clone();
        bad[0] = b'X';
        assert!(matches!(decode_fmt1(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn fmt1_round_trips_bit_exactly() {
        let vals = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308, std::f64::consts::PI, -7.25];
        let rec = Fmt1::F64(Tensor::from_vec(&[2, 3], vals).unwrap());
        let bytes = encode_fmt1(&rec);
        assert_eq!(bytes.len(), 4 + 4 + 16 + 1 + 48);
        let back = decode_fmt1(&bytes).unwrap();
        assert_eq!(encode_fmt1(&back), bytes);
        let c = Fmt1::Complex(ComplexTensor::new(Tensor::full(&[1], 1.5), Tensor::full(&[1], -2.5)).unwrap());
        assert_eq!(decode_fmt1(&encode_fmt1(&c)).unwrap(), c);
        let f = Fmt1::F32 { shape: vec![2], data: vec![0.1, 3.0] };
        assert_eq!(decode_fmt1(&encode_fmt1(&f)).unwrap(), f);
    }
}
