//! On-disk raster formats.
//!
//! `.dmap` holds one [`DenseMap`]: an ASCII header line `DMAP <height> <width>\n`
//! followed by `height * width` little-endian `f32` values in row-major order.
//! RGB images travel as binary PPM (`P6`) and grayscale visualisations as
//! binary PGM (`P5`), both with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};

const DMAP_MAGIC: &str = "DMAP";
const MAX_HEADER_LEN: usize = 64;

pub fn encode_dmap(map: &DenseMap) -> Result<Vec<u8>> {
    let header = format!("{DMAP_MAGIC} {} {}\n", map.height(), map.width());
    let mut out = Vec::with_capacity(header.len() + 4 * map.len());
    out.extend_from_slice(header.as_bytes());
    for (index, &v) in map.values().iter().enumerate() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(Error::NonFinite { index, value: v });
        }
        out.extend_from_slice(&single.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dmap(bytes: &[u8]) -> Result<DenseMap> {
    let newline = bytes
        .iter()
        .take(MAX_HEADER_LEN)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(DMAP_MAGIC) {
        return Err(Error::MalformedHeader(format!("bad magic in {header:?}")));
    }
    let mut dim = |name: &str| -> Result<u64> {
        let field = fields
            .next()
            .ok_or_else(|| Error::MalformedHeader(format!("missing {name}")))?;
        if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::MalformedHeader(format!("bad {name} {field:?}")));
        }
        field.parse::<u64>().map_err(|_| {
            Error::MalformedHeader(format!("{name} {field:?} does not fit in 64 bits"))
        })
    };
    let height = dim("height")?;
    let width = dim("width")?;
    if fields.next().is_some() {
        return Err(Error::MalformedHeader(format!(
            "extra fields in {header:?}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {height}x{width}"
        )));
    }
    let n_bytes = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or(Error::DimensionOverflow { height, width })?;

    let payload = &bytes[newline + 1..];
    if payload.len() < n_bytes {
        return Err(Error::TruncatedPayload {
            expected: n_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > n_bytes {
        return Err(Error::TrailingBytes(payload.len() - n_bytes));
    }
    let mut values = Vec::with_capacity(n_bytes / 4);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinitePayload { index });
        }
        values.push(v as f64);
    }
    DenseMap::from_vec(height as usize, width as usize, values)
}

pub fn save_dmap(map: &DenseMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dmap(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dmap(path: impl AsRef<Path>) -> Result<DenseMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dmap(&bytes)
}

/// Three colour planes with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub r: DenseMap,
    pub g: DenseMap,
    pub b: DenseMap,
}

impl RgbImage {
    pub fn new(r: DenseMap, g: DenseMap, b: DenseMap) -> Result<Self> {
        r.ensure_same_dims(&g)?;
        r.ensure_same_dims(&b)?;
        for plane in [&r, &g, &b] {
            UnitIntervalMap::new(plane.clone())?;
        }
        Ok(Self { r, g, b })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.r.dims()
    }

    pub fn height(&self) -> usize {
        self.r.height()
    }

    pub fn width(&self) -> usize {
        self.r.width()
    }

    pub fn channels(&self) -> [&DenseMap; 3] {
        [&self.r, &self.g, &self.b]
    }

    /// Per-pixel mean of the three channels.
    pub fn intensity(&self) -> DenseMap {
        let values = self
            .r
            .values()
            .iter()
            .zip(self.g.values())
            .zip(self.b.values())
            .map(|((r, g), b)| (r + g + b) / 3.0)
            .collect();
        DenseMap::from_vec(self.height(), self.width(), values).expect("finite mean")
    }

    /// Rounds every sample to the nearest 8-bit level.
    pub fn quantize(&self) -> RgbImage {
        let q = |m: &DenseMap| {
            m.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .expect("finite")
        };
        RgbImage {
            r: q(&self.r),
            g: q(&self.g),
            b: q(&self.b),
        }
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        RgbImage {
            r: self.r.flip_horizontal(),
            g: self.g.flip_horizontal(),
            b: self.b.flip_horizontal(),
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let (h, w) = image.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for ((r, g), b) in image
        .r
        .values()
        .iter()
        .zip(image.g.values())
        .zip(image.b.values())
    {
        out.extend_from_slice(&[to_byte(*r), to_byte(*g), to_byte(*b)]);
    }
    out
}

/// Grayscale visualisation: each pixel is `round(255 * value)`.
pub fn encode_pgm(map: &UnitIntervalMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values().iter().map(|&v| to_byte(v)));
    out
}

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(Error::MalformedHeader("file too short".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("expected a number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader("number out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::MalformedHeader(
            "missing separator before raster".into(),
        ));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::MalformedHeader(format!(
            "unsupported maxval {maxval}"
        )));
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        maxval,
        data_offset: pos + 1,
    })
}

fn raster_payload<'a>(bytes: &'a [u8], header: &PnmHeader, channels: usize) -> Result<&'a [u8]> {
    let n = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(Error::DimensionOverflow {
            height: header.height as u64,
            width: header.width as u64,
        })?;
    let payload = &bytes[header.data_offset..];
    if payload.len() < n {
        return Err(Error::TruncatedPayload {
            expected: n,
            found: payload.len(),
        });
    }
    Ok(&payload[..n])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_pnm_header(bytes)?;
    if &header.magic != b"P6" {
        return Err(Error::MalformedHeader("expected binary PPM (P6)".into()));
    }
    let payload = raster_payload(bytes, &header, 3)?;
    let scale = header.maxval as f64;
    let plane = |offset: usize| {
        DenseMap::from_vec(
            header.height,
            header.width,
            payload
                .iter()
                .skip(offset)
                .step_by(3)
                .map(|&b| (b as f64 / scale).min(1.0))
                .collect(),
        )
    };
    RgbImage::new(plane(0)?, plane(1)?, plane(2)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<UnitIntervalMap> {
    let header = parse_pnm_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(Error::MalformedHeader("expected binary PGM (P5)".into()));
    }
    let payload = raster_payload(bytes, &header, 1)?;
    let scale = header.maxval as f64;
    UnitIntervalMap::new(DenseMap::from_vec(
        header.height,
        header.width,
        payload
            .iter()
            .map(|&b| (b as f64 / scale).min(1.0))
            .collect(),
    )?)
}

pub fn save_ppm(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_pgm(map: &UnitIntervalMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<UnitIntervalMap> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
