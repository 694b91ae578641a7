//! 8-bit RGB images in channel-major layout, binary PPM I/O and resizing.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image stored channel-major: index `c·H·W + y·W + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != CHANNELS * height * width {
            return Err(Error::dim(
                "image",
                &[CHANNELS, height, width],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; CHANNELS * height * width],
        }
    }

    /// Builds from interleaved `RGBRGB...` bytes.
    pub fn from_interleaved(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != CHANNELS * height * width {
            return Err(Error::dim(
                "interleaved",
                &[height, width, CHANNELS],
                &[rgb.len()],
            ));
        }
        let plane = height * width;
        let mut pixels = vec![0u8; rgb.len()];
        for (i, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                pixels[c * plane + i] = px[c];
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.pixels.len());
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push(self.pixels[c * plane + i]);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Copies out the `h × w` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::dim(
                "crop",
                &[self.height, self.width],
                &[top, left, h, w],
            ));
        }
        let mut out = Self::filled(h, w, 0);
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }
}

/// Reads a binary P6 PPM with maxval 255.
pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut fields = Vec::with_capacity(4);
    let mut offset = 0u64;
    let bad = |offset: u64, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };

    // Header: magic, width, height, maxval; '#' starts a comment to end of line.
    let mut token = Vec::new();
    let mut in_comment = false;
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad(offset, "truncated PPM header"));
        }
        offset += 1;
        let b = byte[0];
        if in_comment {
            in_comment = b != b'\n';
            continue;
        }
        if b == b'#' {
            in_comment = true;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(b);
        }
    }
    if fields[0] != "P6" {
        return Err(bad(0, "not a binary PPM (expected P6)"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(offset, "bad header number"))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad(offset, "only maxval 255 is supported"));
    }
    let mut rgb = vec![0u8; width * height * CHANNELS];
    reader
        .read_exact(&mut rgb)
        .map_err(|_| bad(offset, "truncated pixel data"))?;
    if !reader.fill_buf().map_err(|e| Error::io(path, e))?.is_empty() {
        return Err(bad(
            offset + rgb.len() as u64,
            "trailing bytes after pixel data",
        ));
    }
    ImageTensor::from_interleaved(height, width, &rgb)
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_interleaved());
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Source coordinate for output pixel `dst` under the half-pixel-center
/// convention (corners not aligned).
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Resizes to `target × target`. Bilinear rounds half away from zero.
pub fn resize(img: &ImageTensor, target: usize, mode: Interpolation) -> Result<ImageTensor> {
    if target < 1 {
        return Err(Error::Parameter("resize target must be at least 1".into()));
    }
    let (h, w) = (img.height, img.width);
    if h == target && w == target {
        return Ok(img.clone());
    }
    let mut out = ImageTensor::filled(target, target, 0);
    match mode {
        Interpolation::Nearest => {
            for y in 0..target {
                let sy = (((y as f64 + 0.5) * h as f64 / target as f64) as usize).min(h - 1);
                for x in 0..target {
                    let sx = (((x as f64 + 0.5) * w as f64 / target as f64) as usize).min(w - 1);
                    for c in 0..CHANNELS {
                        out.set(c, y, x, img.get(c, sy, sx));
                    }
                }
            }
        }
        Interpolation::Bilinear => {
            let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
                (0..dst_len)
                    .map(|d| {
                        let s = source_coord(d, src_len, dst_len);
                        let lo = s.floor() as usize;
                        let hi = (lo + 1).min(src_len - 1);
                        (lo, hi, s - lo as f64)
                    })
                    .collect()
            };
            let ys = taps(target, h);
            let xs = taps(target, w);
            for c in 0..CHANNELS {
                for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let p = |yy, xx| img.get(c, yy, xx) as f64;
                        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                        let v = top * (1.0 - fy) + bottom * fy;
                        out.set(c, y, x, v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
    }
    Ok(out)
}
