//! Flat `key = value` configuration with strict key checking.
//!
//! One [`Config`] carries every knob: model hyperparameters, ablation
//! toggles, loss weights, optimizer settings, and data-generation sizes.
//! Files are line-oriented; `#` starts a comment; unknown keys are errors so
//! typos cannot silently fall back to defaults. [`Config::canonical_text`]
//! serializes every key in a fixed order and is the byte-exact form stored
//! in checkpoints and hashed into dataset manifests.

use crate::error::{Error, Result};

macro_rules! config_struct {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// All hyperparameters and toggles. See module docs for the file format.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $key: $default, )* }
            }
        }

        impl Config {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!("invalid value {value:?} for key {key}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Fixed-order serialization of every key.
            pub fn canonical_text(&self) -> String {
                let mut s = String::new();
                $( s.push_str(&format!("{} = {}\n", stringify!($key), self.$key)); )*
                s
            }
        }
    };
}

config_struct! {
    /// Token feature width.
    d: usize = 64,
    /// Encoder levels (and decoder layers, one per level).
    layers: usize = 3,
    /// Number of object queries.
    queries: usize = 32,
    /// Attention heads.
    heads: usize = 4,
    /// Window edge for windowed self-attention over image tokens.
    window: usize = 4,
    /// Image block-embedding stride (pixels per token edge).
    image_stride: usize = 4,
    /// Canonical patch edge in pixels; patches are resampled to this.
    patch_size: usize = 32,
    /// Patch block-embedding stride.
    patch_stride: usize = 4,
    /// Hidden width multiplier of feed-forward blocks.
    ffn_ratio: usize = 2,
    /// Sampling points per query per head in deformable attention.
    points: usize = 4,
    /// Mask codec grid edge.
    mask_grid: usize = 32,
    /// Retained low-frequency DCT coefficients.
    mask_coeffs: usize = 64,
    /// Pre-norm residual attention blocks.
    pre_norm: bool = true,
    /// Pyramid fusion in the decoder (ablation toggle).
    fuse: bool = true,
    /// Patch-aware cross-attention in the decoder (ablation toggle).
    cross_attention: bool = true,
    /// Deformable attention in the decoder; dense attention when off.
    deformable: bool = true,
    /// Deformable logits from query-key dot products instead of a predictor.
    deformable_dot_logits: bool = false,
    /// Patch-image cross-attention branches in the encoder (ablation toggle).
    encoder_patch_cross: bool = true,
    /// Zero the patch tokens right after embedding (guidance ablation).
    zero_patch_tokens: bool = false,
    /// Add losses from every decoder layer, not only the last.
    aux_loss: bool = false,

    /// Class term weight in the matching cost and loss.
    lambda_cls: f64 = 2.0,
    /// Box smooth-L1 weight.
    lambda_l1: f64 = 5.0,
    /// Box GIoU weight.
    lambda_giou: f64 = 2.0,
    /// Mask-vector smooth-L1 weight.
    lambda_mask: f64 = 1.0,
    /// Cross-entropy weight for queries assigned to "no object".
    no_object_weight: f64 = 0.1,
    /// Smooth-L1 transition point.
    smooth_l1_beta: f64 = 1.0,

    /// Learning rate.
    lr: f64 = 1e-4,
    /// Decoupled weight decay.
    weight_decay: f64 = 1e-4,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    /// Training steps (one scene per step).
    steps: usize = 3000,
    /// Linear learning-rate warmup steps (0 = none).
    warmup_steps: usize = 0,
    /// Global gradient-norm clip (0 disables).
    grad_clip: f64 = 1.0,
    /// Patches sampled per training step are uniform in 1..=this.
    train_patches_max: usize = 3,

    /// Scene height in pixels.
    image_h: usize = 64,
    /// Scene width in pixels.
    image_w: usize = 64,
    /// Total SKUs in a generated dataset.
    num_skus: usize = 25,
    /// SKUs available for training scenes; the rest are held out.
    num_seen: usize = 20,
    /// Training scenes (seen SKUs only).
    train_scenes: usize = 48,
    /// Test scenes (each contains at least one unseen SKU).
    test_scenes: usize = 16,
    /// Reference patches generated per SKU.
    patches_per_sku: usize = 10,
    /// Instances more occluded than this are dropped from the annotations.
    visibility_min: f64 = 0.25,

    /// Detections below this object score are ignored by PRF metrics and `infer`.
    score_threshold: f64 = 0.5,
    /// IoU flavor for AP: "mask" or "box".
    iou_kind: String = "mask".to_string(),
}

impl Config {
    /// Parse config text, applying each `key = value` line over defaults.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines over the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse_str(&text)
    }

    /// CRC-32 of the canonical serialization, as 8 hex digits.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.canonical_text().as_bytes()))
    }

    /// Check cross-field constraints that the model relies on.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.d % self.heads != 0 {
            problems.push(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.layers == 0 {
            problems.push("layers must be >= 1".into());
        }
        if self.image_h % self.image_stride != 0 || self.image_w % self.image_stride != 0 {
            problems.push(format!(
                "image {}x{} not divisible by image_stride {}",
                self.image_h, self.image_w, self.image_stride
            ));
        }
        let (gh, gw) = (self.image_h / self.image_stride, self.image_w / self.image_stride);
        let halvings = 1usize << (self.layers - 1);
        if gh % halvings != 0 || gw % halvings != 0 {
            problems.push(format!(
                "token grid {gh}x{gw} cannot be halved {} times for {} layers",
                self.layers - 1,
                self.layers
            ));
        }
        if self.patch_size % self.patch_stride != 0 {
            problems.push(format!(
                "patch_size {} not divisible by patch_stride {}",
                self.patch_size, self.patch_stride
            ));
        }
        let pt = (self.patch_size / self.patch_stride).pow(2);
        if self.layers > 1 && pt % (1usize << (self.layers - 1)) != 0 {
            problems.push(format!("{pt} patch tokens cannot be pair-pooled {} times", self.layers - 1));
        }
        if self.mask_coeffs == 0 || self.mask_coeffs > self.mask_grid * self.mask_grid {
            problems.push(format!(
                "mask_coeffs {} out of range for mask_grid {}",
                self.mask_coeffs, self.mask_grid
            ));
        }
        if self.points == 0 {
            problems.push("points must be >= 1".into());
        }
        if self.queries == 0 {
            problems.push("queries must be >= 1".into());
        }
        if self.num_seen >= self.num_skus {
            problems.push(format!("num_seen {} must leave unseen SKUs of {}", self.num_seen, self.num_skus));
        }
        if self.iou_kind != "mask" && self.iou_kind != "box" {
            problems.push(format!("iou_kind must be mask or box, got {:?}", self.iou_kind));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Token grid of pyramid level `i` (1-based, level 1 finest).
    pub fn grid_at_level(&self, level: usize) -> (usize, usize) {
        let gh = self.image_h / self.image_stride;
        let gw = self.image_w / self.image_stride;
        (gh >> (level - 1), gw >> (level - 1))
    }

    /// Patch token count at pyramid level `i` (pair pooling per level).
    pub fn patch_tokens_at_level(&self, level: usize) -> usize {
        (self.patch_size / self.patch_stride).pow(2) >> (level - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_canonical_text() {
        let cfg = Config::default();
        let again = Config::parse_str(&cfg.canonical_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = Config::parse_str("learning_rate = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse_str("# a comment\n\nqueries = 200  # paper-scale\n").unwrap();
        assert_eq!(cfg.queries, 200);
    }

    #[test]
    fn bad_value_is_an_error() {
        assert!(Config::parse_str("queries = many").is_err());
        assert!(Config::parse_str("queries").is_err());
    }

    #[test]
    fn paper_scale_values_are_expressible() {
        for k in [100usize, 200, 300] {
            let cfg = Config::parse_str(&format!("queries = {k}\nlayers = 4\nimage_h = 128\nimage_w = 128")).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.queries, k);
        }
    }

    #[test]
    fn validate_rejects_indivisible_grid() {
        let cfg = Config::parse_str("image_h = 60").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_levels_halve() {
        let cfg = Config::default();
        assert_eq!(cfg.grid_at_level(1), (16, 16));
        assert_eq!(cfg.grid_at_level(2), (8, 8));
        assert_eq!(cfg.grid_at_level(3), (4, 4));
    }
}
