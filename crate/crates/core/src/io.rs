//! File formats: binary PGM images, `.tsr` tensors and volume directories.
//!
//! TSR layout (little-endian, no padding):
//!
//! ```text
//! "DTSR" | version: u16 = 1 | dtype: u8 = 0 (f32) | ndim: u8 | ndim x u32 extents | f32 payload
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

const TSR_MAGIC: &[u8; 4] = b"DTSR";
const TSR_VERSION: u16 = 1;
const TSR_MAX_NDIM: usize = 8;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Reads a binary (P5) PGM into `[H, W]` with values scaled to [0, 1].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (header, offset) = parse_pgm_header(&bytes).map_err(|m| format_err(path, m))?;
    let [width, height, maxval] = header;
    let n = width * height;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let payload = &bytes[offset..];
    if payload.len() < n * bpp {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "{}: payload has {} bytes, expected {}",
                path.display(),
                payload.len(),
                n * bpp
            ),
        )));
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<f32> = if bpp == 1 {
        payload[..n].iter().map(|&b| (b as f64 * scale) as f32).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 * scale) as f32)
            .collect()
    };
    Tensor::new(vec![height, width], data)
}

fn parse_pgm_header(bytes: &[u8]) -> std::result::Result<([usize; 3], usize), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (expected magic P5)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad number at byte {start}"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(format!("zero extent {w}x{h}"));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(format!("unsupported maxval {maxval} (need 255 or 65535)"));
    }
    Ok((fields, pos))
}

/// Quantizes a value in [0, 1] the way [`write_pgm`] does, clamping first.
pub fn quantize_level(v: f64, maxval: u32) -> u32 {
    let v = v.clamp(0.0, 1.0);
    (v * maxval as f64 + 0.5).floor() as u32
}

/// Writes a rank-2 tensor as binary PGM with round-half-up quantization.
pub fn write_pgm<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>, maxval: u32) -> Result<()> {
    let path = path.as_ref();
    if t.ndim() != 2 {
        return Err(shape_err!("PGM needs a 2-D tensor, got {:?}", t.dims()));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Contract(format!("maxval {maxval} not in {{255, 65535}}")));
    }
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n{maxval}\n")?;
    for &v in t.data() {
        let q = quantize_level(v.to_f64(), maxval);
        if maxval == 255 {
            out.write_all(&[q as u8])?;
        } else {
            out.write_all(&(q as u16).to_be_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_tsr<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    if t.ndim() > TSR_MAX_NDIM {
        return Err(shape_err!("TSR supports at most {TSR_MAX_NDIM} dims"));
    }
    let mut buf = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    buf.extend_from_slice(TSR_MAGIC);
    buf.extend_from_slice(&TSR_VERSION.to_le_bytes());
    buf.push(0);
    buf.push(t.ndim() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| shape_err!("extent {d} exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut file = fs::File::open(path)?;
    let mut head = [0u8; 8];
    file.read_exact(&mut head)?;
    if &head[..4] != TSR_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != TSR_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    if head[6] != 0 {
        return Err(format_err(path, format!("unsupported dtype code {}", head[6])));
    }
    let ndim = head[7] as usize;
    if ndim == 0 || ndim > TSR_MAX_NDIM {
        return Err(format_err(path, format!("ndim {ndim} outside 1..={TSR_MAX_NDIM}")));
    }
    let mut ext = vec![0u8; 4 * ndim];
    file.read_exact(&mut ext)?;
    let dims: Vec<usize> = ext
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(format_err(path, format!("zero extent in {dims:?}")));
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; 4 * n];
    file.read_exact(&mut payload)?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "OCT")]
    Oct,
    #[serde(rename = "OCTA")]
    Octa,
}

/// Contents of a volume directory's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub subject_id: String,
    pub modality: Modality,
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(default = "unit_range")]
    pub intensity_range: (f64, f64),
}

fn unit_range() -> (f64, f64) {
    (0.0, 1.0)
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Consistency(format!(
                "volume {} has a zero extent",
                self.subject_id
            )));
        }
        let (lo, hi) = self.intensity_range;
        if !(lo < hi) {
            return Err(Error::Consistency(format!(
                "intensity range ({lo}, {hi}) is empty"
            )));
        }
        Ok(())
    }
}

pub fn slice_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("slice_{index:04}.pgm"))
}

/// Loads `meta.json` plus `slice_0000.pgm ...` as a `[D, H, W]` tensor.
pub fn load_volume(dir: impl AsRef<Path>) -> Result<(VolumeMeta, Tensor)> {
    let dir = dir.as_ref();
    let meta: VolumeMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    meta.validate()?;
    let mut slices = Vec::with_capacity(meta.depth);
    for d in 0..meta.depth {
        let p = slice_path(dir, d);
        if !p.exists() {
            return Err(Error::Consistency(format!(
                "{} is missing slice {d} of {}",
                dir.display(),
                meta.depth
            )));
        }
        let s = read_pgm(&p)?;
        if s.dims() != [meta.height, meta.width] {
            return Err(Error::Consistency(format!(
                "{} is {:?}, meta says [{}, {}]",
                p.display(),
                s.dims(),
                meta.height,
                meta.width
            )));
        }
        slices.push(s);
    }
    Ok((meta, Tensor::stack(&slices)?))
}

/// Writes a `[D, H, W]` volume as a directory of 16-bit PGM slices.
pub fn save_volume<T: Scalar>(dir: impl AsRef<Path>, meta: &VolumeMeta, vol: &Tensor<T>) -> Result<()> {
    let dir = dir.as_ref();
    if vol.dims() != [meta.depth, meta.height, meta.width] {
        return Err(shape_err!(
            "volume {:?} does not match meta [{}, {}, {}]",
            vol.dims(),
            meta.depth,
            meta.height,
            meta.width
        ));
    }
    meta.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(meta)?)?;
    for d in 0..meta.depth {
        write_pgm(&vol.outer(d)?, slice_path(dir, d), 65535)?;
    }
    Ok(())
}
