//! 8-bit RGB rasters and binary PPM/PGM codecs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, ImageError, Result};
use crate::geometry::{BBox, Size};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Raster {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        assert!(width > 0 && height > 0);
        Raster {
            width,
            height,
            pixels: color.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> Size {
        Size::new(self.width as f64, self.height as f64)
    }

    pub fn full_box(&self) -> BBox {
        BBox::full(self.size())
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Color of pixel `i` in row-major order.
    #[inline]
    pub fn at(&self, i: usize) -> Rgb {
        [
            self.pixels[3 * i],
            self.pixels[3 * i + 1],
            self.pixels[3 * i + 2],
        ]
    }

    /// Reverse the column order of every row.
    pub fn mirror_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Crop to the pixels whose centers fall inside `b` (at least one pixel).
    pub fn crop(&self, b: &BBox) -> Result<Raster> {
        let (x0, y0, x1, y1) = self.pixel_span(b)?;
        let w = x1 - x0;
        let h = y1 - y0;
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y1 {
            let row = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + w * 3]);
        }
        Raster::new(w, h, pixels)
    }

    /// Integer pixel bounds `[x0, x1) x [y0, y1)` covered by a box, clamped
    /// to the image and never empty.
    pub fn pixel_span(&self, b: &BBox) -> Result<(usize, usize, usize, usize)> {
        if !b.is_valid() {
            return Err(Error::invalid(format!("degenerate box {b:?}")));
        }
        let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi) };
        let x0 = clamp(b.x_min.round(), self.width - 1);
        let y0 = clamp(b.y_min.round(), self.height - 1);
        let x1 = clamp(b.x_max.round(), self.width).max(x0 + 1);
        let y1 = clamp(b.y_max.round(), self.height).max(y0 + 1);
        Ok((x0, y0, x1, y1))
    }

    /// Bilinear sample at continuous coordinates, where pixel `(i, j)` has its
    /// center at `(i + 0.5, j + 0.5)`. Out-of-range coordinates are clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
            let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
            out[c] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ImageError::Missing(path.to_path_buf()).into())
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(decode_ppm(&bytes)?)
    }

    /// Canonical binary PPM: `P6\n<w> <h>\n255\n` followed by the pixels.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode_ppm())
    }
}

/// Write `bytes` to a sibling temp file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Raster, ImageError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(ImageError::MalformedHeader(format!(
            "expected P6 magic, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_dim(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_dim(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(next_token(bytes, &mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(ImageError::MalformedHeader(format!(
            "unsupported maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::MalformedHeader(
            "missing whitespace after maxval".into(),
        ));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ImageError::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(Raster {
        width,
        height,
        pixels: payload[..expected].to_vec(),
    })
}

fn parse_dim(tok: &[u8], what: &str) -> Result<usize, ImageError> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| {
            ImageError::MalformedHeader(format!(
                "bad {what} {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::MalformedHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

/// Binary PGM (P5) for single-channel debug dumps such as masks and heatmaps.
pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}
