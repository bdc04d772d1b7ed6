//! Binary PPM (P6) / PGM (P5) rasters, maxval 255.
//!
//! These two formats carry every image in and out of the pipeline: scenes
//! and patches as P6, instance masks and predicted masks as P5 with 255 =
//! foreground. Headers accept arbitrary whitespace and `#` comments.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

/// 8-bit grayscale raster; as a mask, values > 127 are foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(w: usize, h: usize) -> Self {
        Rgb8 { w, h, data: vec![0; w * h * 3] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Bilinear sample at continuous pixel coordinates (half-pixel centers,
    /// border replicated). Returns channels in [0, 255].
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        bilinear(self.w, self.h, x, y, |px, py| {
            let p = self.get(px, py);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.w, self.h)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Rgb8> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let (w, h, data) = parse_netpbm(&bytes, b"P6", 3).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Ok(Rgb8 { w, h, data })
    }

    /// Resample to `w x h` with bilinear filtering.
    pub fn resize(&self, w: usize, h: usize) -> Rgb8 {
        let mut out = Rgb8::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let sx = (x as f64 + 0.5) * self.w as f64 / w as f64 - 0.5;
                let sy = (y as f64 + 0.5) * self.h as f64 / h as f64 - 0.5;
                let c = self.sample(sx, sy);
                out.set(x, y, [c[0].round() as u8, c[1].round() as u8, c[2].round() as u8]);
            }
        }
        out
    }
}

impl Gray8 {
    pub fn new(w: usize, h: usize) -> Self {
        Gray8 { w, h, data: vec![0; w * h] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    #[inline]
    pub fn is_fg(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 127
    }

    pub fn count_fg(&self) -> usize {
        self.data.iter().filter(|&&v| v > 127).count()
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(self.w, self.h, x, y, |px, py| [self.get(px, py) as f64, 0.0, 0.0])[0]
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.w, self.h)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Gray8> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let (w, h, data) = parse_netpbm(&bytes, b"P5", 1).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Ok(Gray8 { w, h, data })
    }

    /// Tight bounding box of foreground pixels as `[x0, y0, x1, y1)`, or
    /// `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<[usize; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.is_fg(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some([x0, y0, x1, y1])
    }
}

fn bilinear(w: usize, h: usize, x: f64, y: f64, fetch: impl Fn(usize, usize) -> [f64; 3]) -> [f64; 3] {
    let cf = x.floor();
    let rf = y.floor();
    let fx = x - cf;
    let fy = y - rf;
    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (c0, c1) = (clampi(cf, w), clampi(cf + 1.0, w));
    let (r0, r1) = (clampi(rf, h), clampi(rf + 1.0, h));
    let (p00, p01, p10, p11) = (fetch(c0, r0), fetch(c1, r0), fetch(c0, r1), fetch(c1, r1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (1.0 - fy) * ((1.0 - fx) * p00[k] + fx * p01[k]) + fy * ((1.0 - fx) * p10[k] + fx * p11[k]);
    }
    out
}

fn parse_netpbm(bytes: &[u8], magic: &[u8], channels: usize) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected {} file", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().map_err(|_| "bad header number")?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing header terminator".into());
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(format!("truncated pixel data: need {need}, have {}", bytes.len() - pos));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}
