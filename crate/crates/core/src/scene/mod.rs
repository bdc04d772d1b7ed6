//! Deterministic synthetic data: procedural SKU assets, cluttered scenes
//! with exact instance masks, and jittered reference patches.
//!
//! Every output is a pure function of `(config, seed)` through the crate's
//! own counter-based RNG, so datasets are bit-reproducible across platforms.
//! Textures combine a structural family (stripes / checker / spots /
//! gradient) with a golden-angle hue rotation per SKU id, which keeps any
//! number of SKUs visually distinct. Scenes are painted back-to-front;
//! pixels taken by a later instance are removed from the masks below it,
//! and instances that end up mostly hidden are dropped from the
//! annotations.

pub mod manifest;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::raster::{Gray8, Rgb8};
use crate::rng::SplitMix64;

/// Canonical asset edge in pixels.
pub const ASSET_SIZE: usize = 64;

/// Clutter level of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clutter {
    Easy,
    Hard,
}

impl std::fmt::Display for Clutter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Clutter::Easy => "easy",
            Clutter::Hard => "hard",
        })
    }
}

impl std::str::FromStr for Clutter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Clutter::Easy),
            "hard" => Ok(Clutter::Hard),
            other => Err(Error::Input(format!("unknown clutter level {other:?}"))),
        }
    }
}

/// One product type: a canonical texture square plus its shape mask.
#[derive(Debug, Clone)]
pub struct SkuAsset {
    pub sku_id: u32,
    pub raster: Rgb8,
    pub mask: Gray8,
    /// `(cx, cy, rx, ry)` of the analytic ellipse, when the shape is one.
    pub ellipse: Option<[f64; 4]>,
}

/// A ground-truth instance inside a composed scene.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sku_id: u32,
    /// Tight pixel box `[x0, y0, x1, y1)` of the visible mask.
    pub bbox: [usize; 4],
    pub mask: Gray8,
    /// Visible fraction of the pixels this instance painted.
    pub visibility: f64,
}

/// A composed scene with its annotations.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Rgb8,
    pub instances: Vec<Instance>,
    pub clutter: Clutter,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

/// Deterministically build the asset for `(seed, sku_id)`.
pub fn generate_sku(seed: u64, sku_id: u32) -> SkuAsset {
    let mut rng = SplitMix64::new(seed).fork(0x5AE5_0000 + sku_id as u64);
    let n = ASSET_SIZE;

    // golden-angle hue rotation keeps palettes distinct across ids
    let hue = (sku_id as f64 * 137.507_764) % 360.0 + rng.range_f64(-8.0, 8.0);
    let c1 = hsv_to_rgb(hue, rng.range_f64(0.55, 0.95), rng.range_f64(0.7, 1.0));
    let c2 = hsv_to_rgb(hue + rng.range_f64(110.0, 240.0), rng.range_f64(0.45, 0.9), rng.range_f64(0.45, 0.9));

    let mut raster = Rgb8::new(n, n);
    match sku_id % 4 {
        0 => {
            // stripes
            let width = rng.range_f64(8.0, 14.0);
            let theta = rng.range_f64(0.0, std::f64::consts::PI);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..n {
                for x in 0..n {
                    let t = (x as f64 * ct + y as f64 * st) / width;
                    raster.set(x, y, if (t.floor() as i64).rem_euclid(2) == 0 { c1 } else { c2 });
                }
            }
        }
        1 => {
            // checkerboard
            let cell = rng.range_usize(8, 14);
            for y in 0..n {
                for x in 0..n {
                    raster.set(x, y, if (x / cell + y / cell) % 2 == 0 { c1 } else { c2 });
                }
            }
        }
        2 => {
            // spots on a plain background
            let r = rng.range_f64(4.0, 7.0);
            let step = rng.range_usize(12, 18);
            let jx = rng.range_f64(0.0, step as f64);
            let jy = rng.range_f64(0.0, step as f64);
            for y in 0..n {
                for x in 0..n {
                    let fx = (x as f64 + jx) % step as f64 - step as f64 / 2.0;
                    let fy = (y as f64 + jy) % step as f64 - step as f64 / 2.0;
                    raster.set(x, y, if fx * fx + fy * fy < r * r { c1 } else { c2 });
                }
            }
        }
        _ => {
            // linear gradient
            let theta = rng.range_f64(0.0, std::f64::consts::TAU);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..n {
                for x in 0..n {
                    let t = ((x as f64 * ct + y as f64 * st) / (n as f64 * 1.42) + 0.5).clamp(0.0, 1.0);
                    let px = [
                        (c1[0] as f64 * (1.0 - t) + c2[0] as f64 * t) as u8,
                        (c1[1] as f64 * (1.0 - t) + c2[1] as f64 * t) as u8,
                        (c1[2] as f64 * (1.0 - t) + c2[2] as f64 * t) as u8,
                    ];
                    raster.set(x, y, px);
                }
            }
        }
    }

    let mut mask = Gray8::new(n, n);
    let ellipse = if rng.next_f64() < 0.5 {
        let (cx, cy) = (n as f64 / 2.0, n as f64 / 2.0);
        let rx = rng.range_f64(0.36, 0.5) * n as f64;
        let ry = rng.range_f64(0.36, 0.5) * n as f64;
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    mask.set(x, y, 255);
                }
            }
        }
        Some([cx, cy, rx, ry])
    } else {
        let inset = rng.range_usize(0, n / 10);
        for y in inset..n - inset {
            for x in inset..n - inset {
                mask.set(x, y, 255);
            }
        }
        None
    };

    SkuAsset { sku_id, raster, mask, ellipse }
}

/// Paint instances of the given assets into a cluttered scene.
///
/// Instance count is 3-6 (easy) or 8-15 (hard). Later instances occlude
/// earlier ones; occluded pixels are removed from the lower masks, and
/// instances whose visible fraction drops below `cfg.visibility_min` (or
/// that never painted a pixel) are dropped from the annotations.
pub fn compose_scene(assets: &[SkuAsset], clutter: Clutter, cfg: &Config, seed: u64) -> Result<Scene> {
    if assets.is_empty() {
        return Err(Error::Usage("compose_scene needs at least one asset".into()));
    }
    let (w, h) = (cfg.image_w, cfg.image_h);
    let mut rng = SplitMix64::new(seed);

    // tote-like background with mild pixel noise
    let mut image = Rgb8::new(w, h);
    let base = rng.range_usize(34, 50) as i32;
    for y in 0..h {
        for x in 0..w {
            let v = (base + rng.range_usize(0, 12) as i32 - 6).clamp(0, 255) as u8;
            image.set(x, y, [v, v, v]);
        }
    }

    let count = match clutter {
        Clutter::Easy => rng.range_usize(3, 6),
        Clutter::Hard => rng.range_usize(8, 15),
    };
    let scale_range = match clutter {
        Clutter::Easy => (0.28, 0.45),
        Clutter::Hard => (0.16, 0.30),
    };

    struct Painted {
        sku_id: u32,
        mask: Gray8,
        painted_px: usize,
    }
    let mut painted: Vec<Painted> = Vec::with_capacity(count);

    let min_dim = w.min(h) as f64;
    for _ in 0..count {
        let asset = &assets[rng.below(assets.len())];
        let size = rng.range_f64(scale_range.0, scale_range.1) * min_dim;
        let theta = rng.range_f64(0.0, std::f64::consts::TAU);
        let (ct, st) = (theta.cos(), theta.sin());
        let cx = rng.range_f64(0.1 * w as f64, 0.9 * w as f64);
        let cy = rng.range_f64(0.1 * h as f64, 0.9 * h as f64);
        let scale = ASSET_SIZE as f64 / size;

        let half = size * 0.75; // covers the rotated square
        let x0 = ((cx - half).floor().max(0.0)) as usize;
        let y0 = ((cy - half).floor().max(0.0)) as usize;
        let x1 = ((cx + half).ceil().min(w as f64)) as usize;
        let y1 = ((cy + half).ceil().min(h as f64)) as usize;

        let mut mask = Gray8::new(w, h);
        let mut painted_px = 0usize;
        for py in y0..y1 {
            for px in x0..x1 {
                // inverse-rotate the pixel center into asset coordinates
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                let ax = (dx * ct + dy * st) * scale + ASSET_SIZE as f64 / 2.0;
                let ay = (-dx * st + dy * ct) * scale + ASSET_SIZE as f64 / 2.0;
                if ax < 0.0 || ay < 0.0 || ax >= ASSET_SIZE as f64 || ay >= ASSET_SIZE as f64 {
                    continue;
                }
                if asset.mask.sample(ax - 0.5, ay - 0.5) < 128.0 {
                    continue;
                }
                let c = asset.raster.sample(ax - 0.5, ay - 0.5);
                image.set(px, py, [c[0].round() as u8, c[1].round() as u8, c[2].round() as u8]);
                mask.set(px, py, 255);
                painted_px += 1;
                for lower in painted.iter_mut() {
                    lower.mask.set(px, py, 0);
                }
            }
        }
        painted.push(Painted { sku_id: asset.sku_id, mask, painted_px });
    }

    let mut instances = Vec::new();
    for p in painted {
        if p.painted_px == 0 {
            continue;
        }
        let visible = p.mask.count_fg();
        let visibility = visible as f64 / p.painted_px as f64;
        if visibility < cfg.visibility_min {
            continue;
        }
        let Some(bbox) = p.mask.tight_bbox() else { continue };
        instances.push(Instance { sku_id: p.sku_id, bbox, mask: p.mask, visibility });
    }

    Ok(Scene { image, instances, clutter })
}

/// Cut `n` jittered reference patches from an asset. The first patch is the
/// full canonical view; later ones vary crop extent, rotation (±10 deg),
/// and brightness (±10%).
pub fn extract_patches(asset: &SkuAsset, n: usize, seed: u64, patch_size: usize) -> Result<Vec<Rgb8>> {
    if n == 0 || n > 10 {
        return Err(Error::Usage(format!("patch count {n} out of range 1..=10")));
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut rng = SplitMix64::new(seed).fork(0x7A7C_0000 + j as u64);
        let (extent, theta, gain) = if j == 0 {
            (1.0, 0.0, 1.0)
        } else {
            (rng.range_f64(0.75, 1.0), rng.range_f64(-0.1745, 0.1745), rng.range_f64(0.9, 1.1))
        };
        let (ct, st) = (theta.cos(), theta.sin());
        let c = ASSET_SIZE as f64 / 2.0;
        let span = ASSET_SIZE as f64 * extent;
        let mut patch = Rgb8::new(patch_size, patch_size);
        for y in 0..patch_size {
            for x in 0..patch_size {
                let u = (x as f64 + 0.5) / patch_size as f64 - 0.5;
                let v = (y as f64 + 0.5) / patch_size as f64 - 0.5;
                let ax = (u * ct - v * st) * span + c;
                let ay = (u * st + v * ct) * span + c;
                let col = asset.raster.sample(ax - 0.5, ay - 0.5);
                patch.set(
                    x,
                    y,
                    [
                        (col[0] * gain).clamp(0.0, 255.0) as u8,
                        (col[1] * gain).clamp(0.0, 255.0) as u8,
                        (col[2] * gain).clamp(0.0, 255.0) as u8,
                    ],
                );
            }
        }
        out.push(patch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> Config {
        Config::default()
    }

    #[test]
    fn sku_generation_is_bitwise_deterministic() {
        let a = generate_sku(42, 7);
        let b = generate_sku(42, 7);
        assert_eq!(a.raster, b.raster);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn fifty_skus_are_pairwise_distinct() {
        let assets: Vec<SkuAsset> = (0..50).map(|i| generate_sku(1, i)).collect();
        for i in 0..assets.len() {
            for j in i + 1..assets.len() {
                assert_ne!(assets[i].raster.data, assets[j].raster.data, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn ellipse_mask_matches_analytic_shape_within_band() {
        // find an ellipse-shaped asset and compare against the analytic test
        let asset = (0..20)
            .map(|i| generate_sku(3, i))
            .find(|a| a.ellipse.is_some())
            .expect("an ellipse asset in 20 draws");
        let [cx, cy, rx, ry] = asset.ellipse.unwrap();
        for y in 0..ASSET_SIZE {
            for x in 0..ASSET_SIZE {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let r = (dx * dx + dy * dy).sqrt();
                // skip a 1-pixel band around the analytic boundary
                let band = 1.0 / rx.min(ry);
                if (r - 1.0).abs() <= band {
                    continue;
                }
                assert_eq!(asset.mask.is_fg(x, y), r < 1.0, "pixel ({x},{y}) r={r}");
            }
        }
    }

    #[test]
    fn scene_composition_is_deterministic() {
        let assets: Vec<SkuAsset> = (0..5).map(|i| generate_sku(9, i)).collect();
        let a = compose_scene(&assets, Clutter::Hard, &cfg(), 123).unwrap();
        let b = compose_scene(&assets, Clutter::Hard, &cfg(), 123).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.instances.len(), b.instances.len());
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.bbox, y.bbox);
        }
    }

    #[test]
    fn masks_are_disjoint_and_bounded() {
        let assets: Vec<SkuAsset> = (0..6).map(|i| generate_sku(11, i)).collect();
        let c = cfg();
        for seed in 0..10 {
            let scene = compose_scene(&assets, Clutter::Hard, &c, seed).unwrap();
            let mut covered = vec![false; c.image_w * c.image_h];
            let mut total = 0usize;
            for inst in &scene.instances {
                for (i, &px) in inst.mask.data.iter().enumerate() {
                    if px > 127 {
                        assert!(!covered[i], "masks overlap at {i}");
                        covered[i] = true;
                        total += 1;
                    }
                }
            }
            assert!(total <= c.image_w * c.image_h);
        }
    }

    #[test]
    fn boxes_are_tight_and_visibility_positive() {
        let assets: Vec<SkuAsset> = (0..6).map(|i| generate_sku(13, i)).collect();
        let c = cfg();
        for seed in 0..10 {
            let scene = compose_scene(&assets, Clutter::Easy, &c, seed).unwrap();
            for inst in &scene.instances {
                assert_eq!(inst.mask.tight_bbox(), Some(inst.bbox));
                assert!(inst.visibility > 0.0 && inst.visibility <= 1.0);
                assert!(inst.visibility >= c.visibility_min);
            }
        }
    }

    #[test]
    fn hard_scenes_average_more_instances_than_easy() {
        let assets: Vec<SkuAsset> = (0..8).map(|i| generate_sku(17, i)).collect();
        let c = cfg();
        let mut easy = 0usize;
        let mut hard = 0usize;
        for seed in 0..100 {
            easy += compose_scene(&assets, Clutter::Easy, &c, seed).unwrap().instances.len();
            hard += compose_scene(&assets, Clutter::Hard, &c, 10_000 + seed).unwrap().instances.len();
        }
        assert!(
            hard as f64 / 100.0 > easy as f64 / 100.0 + 1.0,
            "easy mean {} vs hard mean {}",
            easy as f64 / 100.0,
            hard as f64 / 100.0
        );
    }

    /// Normalized cross-correlation over RGB with per-channel mean removal.
    fn ncc(a: &Rgb8, b: &Rgb8) -> f64 {
        assert_eq!((a.w, a.h), (b.w, b.h));
        let centered = |img: &Rgb8| -> Vec<f64> {
            let n = img.w * img.h;
            let mut means = [0.0f64; 3];
            for i in 0..n {
                for c in 0..3 {
                    means[c] += img.data[i * 3 + c] as f64;
                }
            }
            for m in means.iter_mut() {
                *m /= n as f64;
            }
            (0..n * 3).map(|k| img.data[k] as f64 - means[k % 3]).collect()
        };
        let (va, vb) = (centered(a), centered(b));
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in va.iter().zip(&vb) {
            num += x * y;
            da += x * x;
            db += y * y;
        }
        num / (da.sqrt() * db.sqrt()).max(1e-12)
    }

    /// Render the asset at a candidate (extent, rotation) with the same
    /// geometry convention as patch extraction, for the template search.
    fn render_view(asset: &SkuAsset, extent: f64, theta: f64, size: usize) -> Rgb8 {
        let (ct, st) = (theta.cos(), theta.sin());
        let c = ASSET_SIZE as f64 / 2.0;
        let span = ASSET_SIZE as f64 * extent;
        let mut out = Rgb8::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 - 0.5;
                let v = (y as f64 + 0.5) / size as f64 - 0.5;
                let ax = (u * ct - v * st) * span + c;
                let ay = (u * st + v * ct) * span + c;
                let col = asset.raster.sample(ax - 0.5, ay - 0.5);
                out.set(x, y, [col[0] as u8, col[1] as u8, col[2] as u8]);
            }
        }
        out
    }

    #[test]
    fn patches_template_match_their_source_asset() {
        // NCC template matching: peak correlation over the jitter search
        // grid must be >= 0.8 against the source asset.
        for sku in 0..8u32 {
            let asset = generate_sku(21, sku);
            let patches = extract_patches(&asset, 10, 77, 32).unwrap();
            for (j, p) in patches.iter().enumerate() {
                let mut best = f64::MIN;
                for ext_step in 0..=5 {
                    let extent = 0.75 + 0.05 * ext_step as f64;
                    for rot_step in -10..=10 {
                        let theta = rot_step as f64 * 0.0175;
                        let reference = render_view(&asset, extent, theta, 32);
                        best = best.max(ncc(p, &reference));
                    }
                }
                assert!(best >= 0.8, "sku {sku} patch {j}: peak ncc {best}");
            }
        }
    }

    #[test]
    fn patch_extraction_edge_cases() {
        let asset = generate_sku(23, 0);
        let one = extract_patches(&asset, 1, 5, 32).unwrap();
        let again = extract_patches(&asset, 1, 5, 32).unwrap();
        assert_eq!(one[0], again[0]);
        assert_eq!(one[0].w, 32);
        assert!(extract_patches(&asset, 11, 5, 32).is_err());
        assert!(extract_patches(&asset, 0, 5, 32).is_err());
    }
}
