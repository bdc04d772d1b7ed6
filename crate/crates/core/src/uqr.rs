//! Mask codec: a binary instance mask becomes a short vector of
//! low-frequency 2-D DCT coefficients, and back.
//!
//! The ground-truth mask is cropped to its bounding box, bilinearly
//! resampled to an `m x m` grid `S` in [0,1], transformed as `F = A S A^T`
//! with `A` the orthonormal DCT-II basis, and the first `n_c` coefficients
//! in zigzag order are kept. Decoding zero-fills the dropped coefficients,
//! applies `A^T F A` (the inverse, since `A` is orthonormal), pastes the map
//! into the predicted box, and thresholds at 0.5.

use crate::error::{Error, Result};
use crate::raster::Gray8;

/// Orthonormal DCT-II basis matrix, `a[u * m + x] = alpha(u) cos(pi (2x+1) u / 2m)`.
#[derive(Debug, Clone)]
pub struct DctBasis {
    pub m: usize,
    a: Vec<f64>,
}

/// Zigzag-ordered low-frequency DCT coefficients of one instance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    pub coeffs: Vec<f64>,
    pub m: usize,
}

impl DctBasis {
    pub fn new(m: usize) -> DctBasis {
        assert!(m > 0);
        let mut a = vec![0.0; m * m];
        for u in 0..m {
            let alpha = if u == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for x in 0..m {
                a[u * m + x] = alpha * ((std::f64::consts::PI * (2 * x + 1) as f64 * u as f64) / (2.0 * m as f64)).cos();
            }
        }
        DctBasis { m, a }
    }

    /// Full transform `A . S . A^T`, all `m x m` coefficients.
    pub fn forward(&self, s: &[f64]) -> Vec<f64> {
        let m = self.m;
        debug_assert_eq!(s.len(), m * m);
        // tmp = A . S
        let mut tmp = vec![0.0; m * m];
        for u in 0..m {
            for y in 0..m {
                let mut acc = 0.0;
                for x in 0..m {
                    acc += self.a[u * m + x] * s[x * m + y];
                }
                tmp[u * m + y] = acc;
            }
        }
        // out = tmp . A^T
        let mut out = vec![0.0; m * m];
        for u in 0..m {
            for v in 0..m {
                let mut acc = 0.0;
                for y in 0..m {
                    acc += tmp[u * m + y] * self.a[v * m + y];
                }
                out[u * m + v] = acc;
            }
        }
        out
    }

    /// Inverse transform `A^T . F . A`.
    pub fn inverse(&self, f: &[f64]) -> Vec<f64> {
        let m = self.m;
        debug_assert_eq!(f.len(), m * m);
        let mut tmp = vec![0.0; m * m];
        for x in 0..m {
            for v in 0..m {
                let mut acc = 0.0;
                for u in 0..m {
                    acc += self.a[u * m + x] * f[u * m + v];
                }
                tmp[x * m + v] = acc;
            }
        }
        let mut out = vec![0.0; m * m];
        for x in 0..m {
            for y in 0..m {
                let mut acc = 0.0;
                for v in 0..m {
                    acc += tmp[x * m + v] * self.a[v * m + y];
                }
                out[x * m + y] = acc;
            }
        }
        out
    }

    /// `A . A^T` deviation from identity, for the orthonormality check.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.m;
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += self.a[i * m + k] * self.a[j * m + k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - expect).abs());
            }
        }
        worst
    }
}

/// Zigzag scan order of an `m x m` grid: returns flat indices `u * m + v`
/// from lowest to highest frequency diagonal.
pub fn zigzag_order(m: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(m * m);
    for s in 0..(2 * m).saturating_sub(1) {
        let lo = s.saturating_sub(m - 1);
        let hi = s.min(m - 1);
        if s % 2 == 0 {
            for u in (lo..=hi).rev() {
                order.push(u * m + (s - u));
            }
        } else {
            for u in lo..=hi {
                order.push(u * m + (s - u));
            }
        }
    }
    order
}

/// Encode an `m x m` map in [0,1] to its first `n_c` zigzag coefficients.
pub fn dct_encode(basis: &DctBasis, map: &[f64], n_c: usize) -> Result<MaskVector> {
    let m = basis.m;
    if map.len() != m * m {
        return Err(Error::dim("dct_encode", format!("{} values vs {m}x{m} grid", map.len())));
    }
    if n_c == 0 || n_c > m * m {
        return Err(Error::Config(format!("n_c {n_c} out of range for grid {m}")));
    }
    let full = basis.forward(map);
    let order = zigzag_order(m);
    Ok(MaskVector { coeffs: order[..n_c].iter().map(|&i| full[i]).collect(), m })
}

/// Decode a coefficient vector back to an `m x m` real-valued map.
pub fn dct_decode(basis: &DctBasis, v: &MaskVector) -> Result<Vec<f64>> {
    let m = basis.m;
    if v.m != m {
        return Err(Error::dim("dct_decode", format!("vector grid {} vs basis {m}", v.m)));
    }
    if v.coeffs.len() > m * m {
        return Err(Error::dim("dct_decode", format!("{} coefficients on {m}x{m} grid", v.coeffs.len())));
    }
    let order = zigzag_order(m);
    let mut full = vec![0.0; m * m];
    for (k, &c) in v.coeffs.iter().enumerate() {
        full[order[k]] = c;
    }
    Ok(basis.inverse(&full))
}

/// Binarize a decoded map at 0.5.
pub fn threshold_map(map: &[f64]) -> Vec<bool> {
    map.iter().map(|&v| v >= 0.5).collect()
}

/// Crop `mask` to the pixel box `[x0, y0, x1, y1)` and bilinearly resample
/// the foreground indicator to an `m x m` grid of values in [0, 1].
pub fn resample_mask_to_grid(mask: &Gray8, bx: [f64; 4], m: usize) -> Vec<f64> {
    let [x0, y0, x1, y1] = bx;
    let (bw, bh) = ((x1 - x0).max(1e-9), (y1 - y0).max(1e-9));
    let mut out = vec![0.0; m * m];
    for gy in 0..m {
        for gx in 0..m {
            let sx = x0 + (gx as f64 + 0.5) / m as f64 * bw - 0.5;
            let sy = y0 + (gy as f64 + 0.5) / m as f64 * bh - 0.5;
            // sample the binary indicator, not raw bytes
            let v = bilinear_indicator(mask, sx, sy);
            out[gy * m + gx] = v;
        }
    }
    out
}

fn bilinear_indicator(mask: &Gray8, x: f64, y: f64) -> f64 {
    let cf = x.floor();
    let rf = y.floor();
    let fx = x - cf;
    let fy = y - rf;
    let get = |cx: f64, cy: f64| -> f64 {
        if cx < 0.0 || cy < 0.0 {
            return 0.0;
        }
        let (cx, cy) = (cx as usize, cy as usize);
        if cx >= mask.w || cy >= mask.h {
            0.0
        } else if mask.is_fg(cx, cy) {
            1.0
        } else {
            0.0
        }
    };
    (1.0 - fy) * ((1.0 - fx) * get(cf, rf) + fx * get(cf + 1.0, rf))
        + fy * ((1.0 - fx) * get(cf, rf + 1.0) + fx * get(cf + 1.0, rf + 1.0))
}

/// Paste a decoded `m x m` map into an image-sized binary mask over the
/// pixel box `[x0, y0, x1, y1)`, thresholding at 0.5.
pub fn paste_map_to_mask(map: &[f64], m: usize, bx: [f64; 4], img_w: usize, img_h: usize) -> Gray8 {
    let [x0, y0, x1, y1] = bx;
    let mut out = Gray8::new(img_w, img_h);
    let (bw, bh) = (x1 - x0, y1 - y0);
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = (x1.ceil() as usize).min(img_w);
    let py1 = (y1.ceil() as usize).min(img_h);
    for py in py0..py1 {
        for px in px0..px1 {
            // map pixel center into grid coordinates of the box
            let gx = ((px as f64 + 0.5) - x0) / bw * m as f64 - 0.5;
            let gy = ((py as f64 + 0.5) - y0) / bh * m as f64 - 0.5;
            let v = bilinear_map(map, m, gx, gy);
            if v >= 0.5 {
                out.set(px, py, 255);
            }
        }
    }
    out
}

fn bilinear_map(map: &[f64], m: usize, x: f64, y: f64) -> f64 {
    let cf = x.floor();
    let rf = y.floor();
    let fx = x - cf;
    let fy = y - rf;
    let clampi = |v: f64| (v.max(0.0) as usize).min(m - 1);
    let (c0, c1, r0, r1) = (clampi(cf), clampi(cf + 1.0), clampi(rf), clampi(rf + 1.0));
    (1.0 - fy) * ((1.0 - fx) * map[r0 * m + c0] + fx * map[r0 * m + c1])
        + fy * ((1.0 - fx) * map[r1 * m + c0] + fx * map[r1 * m + c1])
}
