//! Image and patch tokenization, positional embeddings, and N-to-1 fusion.
//!
//! Images are cut into non-overlapping `stride x stride` pixel blocks; each
//! block's RGB values (scaled to [0,1]) are linearly embedded to width `d`
//! and a learned per-level positional embedding is added. Reference patches
//! go through the same scheme after bilinear resampling to the canonical
//! patch size. The N-to-1 module folds any number of patch token sets into
//! one by sequential cross-attention, starting from the first patch.

use crate::attention::{attention_block, Affine, AttentionParams};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::raster::Rgb8;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, TensorId};

/// A set of width-`d` tokens, optionally laid out on a 2-D grid
/// (`rows == grid.0 * grid.1`, row-major).
#[derive(Debug, Clone, Copy)]
pub struct TokenSet {
    pub id: TensorId,
    pub grid: Option<(usize, usize)>,
}

impl TokenSet {
    pub fn flat(id: TensorId) -> Self {
        TokenSet { id, grid: None }
    }

    pub fn gridded(id: TensorId, h: usize, w: usize) -> Self {
        TokenSet { id, grid: Some((h, w)) }
    }
}

/// Learned embedding tables for images, patches, and object queries.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub image_embed: Affine,
    /// One positional table per pyramid level, finest first.
    pub image_pos: Vec<TensorId>,
    pub patch_embed: Affine,
    pub patch_pos: TensorId,
    /// The K learned object queries.
    pub object_queries: TensorId,
}

impl Embedder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &Config) -> Self {
        let feat = cfg.image_stride * cfg.image_stride * 3;
        let pfeat = cfg.patch_stride * cfg.patch_stride * 3;
        let image_pos = (1..=cfg.layers)
            .map(|lvl| {
                let (gh, gw) = cfg.grid_at_level(lvl);
                ps.alloc(&format!("embed.image_pos{lvl}"), gh * gw, cfg.d, Init::Normal(0.02), rng)
            })
            .collect();
        Embedder {
            image_embed: Affine::new(ps, rng, "embed.image", feat, cfg.d),
            image_pos,
            patch_embed: Affine::new(ps, rng, "embed.patch", pfeat, cfg.d),
            patch_pos: ps.alloc(
                "embed.patch_pos",
                (cfg.patch_size / cfg.patch_stride).pow(2),
                cfg.d,
                Init::Normal(0.02),
                rng,
            ),
            object_queries: ps.alloc("embed.object_queries", cfg.queries, cfg.d, Init::Normal(0.02), rng),
        }
    }
}

/// Flatten `stride x stride` blocks of an RGB raster into a
/// `[blocks, stride*stride*3]` row-major matrix with values in [0,1].
pub(crate) fn image_blocks(img: &Rgb8, stride: usize) -> (usize, usize, Vec<f64>) {
    let (gh, gw) = (img.h / stride, img.w / stride);
    let feat = stride * stride * 3;
    let mut out = Vec::with_capacity(gh * gw * feat);
    for by in 0..gh {
        for bx in 0..gw {
            for dy in 0..stride {
                for dx in 0..stride {
                    let px = img.get(bx * stride + dx, by * stride + dy);
                    out.extend(px.iter().map(|&v| v as f64 / 255.0));
                }
            }
        }
    }
    (gh, gw, out)
}

/// Embed an image into level-1 grid tokens with positional information.
pub fn tokenize_image<T: Scalar>(
    tape: &mut Tape<T>,
    embed: &Embedder,
    img: &Rgb8,
    cfg: &Config,
) -> Result<TokenSet> {
    let s = cfg.image_stride;
    if img.h % s != 0 || img.w % s != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by stride {s}; no implicit crop",
            img.w, img.h
        )));
    }
    let (gh, gw, blocks) = image_blocks(img, s);
    let data: Vec<T> = blocks.iter().map(|&v| T::from_f64c(v)).collect();
    let blocks = tape.constant(gh * gw, s * s * 3, data)?;
    let tok = embed.image_embed.apply(tape, blocks)?;
    let tok = tape.add(tok, embed.image_pos[0])?;
    Ok(TokenSet::gridded(tok, gh, gw))
}

/// Embed one reference patch: bilinear resample to the canonical size, then
/// the block-embedding scheme of [`tokenize_image`].
pub fn tokenize_patch<T: Scalar>(
    tape: &mut Tape<T>,
    embed: &Embedder,
    patch: &Rgb8,
    cfg: &Config,
) -> Result<TokenSet> {
    if patch.w == 0 || patch.h == 0 {
        return Err(Error::Input("degenerate zero-area patch".into()));
    }
    let canonical = if (patch.w, patch.h) == (cfg.patch_size, cfg.patch_size) {
        patch.clone()
    } else {
        patch.resize(cfg.patch_size, cfg.patch_size)
    };
    let (_, _, blocks) = image_blocks(&canonical, cfg.patch_stride);
    let np = (cfg.patch_size / cfg.patch_stride).pow(2);
    let data: Vec<T> = blocks.iter().map(|&v| T::from_f64c(v)).collect();
    let blocks = tape.constant(np, cfg.patch_stride * cfg.patch_stride * 3, data)?;
    let tok = embed.patch_embed.apply(tape, blocks)?;
    let tok = tape.add(tok, embed.patch_pos)?;
    Ok(TokenSet::flat(tok))
}

/// Fuse N patch token sets into one representative set.
///
/// The first patch initializes the output; each remaining patch updates it
/// by cross-attention (the update replaces the tokens; no residual). With
/// N = 1 the input tokens are returned untouched. The update is applied in
/// list order, which is significant for N > 2.
pub fn n_to_1<T: Scalar>(
    tape: &mut Tape<T>,
    params: &AttentionParams,
    patches: &[TokenSet],
) -> Result<TokenSet> {
    let Some(first) = patches.first() else {
        return Err(Error::Usage("n_to_1 requires at least one patch".into()));
    };
    let shape = tape.shape(first.id);
    for p in &patches[1..] {
        if tape.shape(p.id) != shape {
            return Err(Error::dim(
                "n_to_1",
                format!("{:?} vs {:?}", tape.shape(p.id), shape),
            ));
        }
    }
    let mut fused = first.id;
    for p in &patches[1..] {
        fused = attention_block(tape, params, fused, p.id, None)?;
    }
    Ok(TokenSet::flat(fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_vec;

    fn cfg_small() -> Config {
        Config::parse_str("d = 16\nheads = 2\nimage_h = 32\nimage_w = 32\nlayers = 2\nqueries = 4").unwrap()
    }

    fn random_image(rng: &mut SplitMix64, w: usize, h: usize) -> Rgb8 {
        let mut img = Rgb8::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.below(256) as u8;
        }
        img
    }

    #[test]
    fn image_token_grid_arithmetic() {
        let cfg = Config::default(); // 64x64, stride 4, d 64
        let mut rng = SplitMix64::new(1);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let img = random_image(&mut rng, 64, 64);
        let tok = tokenize_image(&mut tape, &embed, &img, &cfg).unwrap();
        assert_eq!(tok.grid, Some((16, 16)));
        assert_eq!(tape.shape(tok.id), (256, 64));
    }

    #[test]
    fn indivisible_image_is_config_error() {
        let cfg = Config::default();
        let mut rng = SplitMix64::new(1);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let img = Rgb8::new(30, 64);
        assert!(matches!(
            tokenize_image(&mut tape, &embed, &img, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_image_yields_positional_embeddings_exactly() {
        let cfg = cfg_small();
        let mut rng = SplitMix64::new(2);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let img = Rgb8::new(32, 32); // all zero, bias is zero-initialized
        let tok = tokenize_image(&mut tape, &embed, &img, &cfg).unwrap();
        let pos = tape.data(embed.image_pos[0]).to_vec();
        for (a, b) in tape.data(tok.id).iter().zip(&pos) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_block_change_touches_exactly_one_token() {
        let cfg = cfg_small();
        let mut rng = SplitMix64::new(3);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let mut poked = img.clone();
        poked.set(9, 13, [255, 0, 255]); // block (3, 2) with stride 4
        let a = tokenize_image(&mut tape, &embed, &img, &cfg).unwrap();
        let b = tokenize_image(&mut tape, &embed, &poked, &cfg).unwrap();
        let (n, d) = tape.shape(a.id);
        let mut changed = Vec::new();
        for t in 0..n {
            let differs = (0..d).any(|c| tape.data(a.id)[t * d + c] != tape.data(b.id)[t * d + c]);
            if differs {
                changed.push(t);
            }
        }
        assert_eq!(changed, vec![3 * 8 + 2]);
    }

    #[test]
    fn patch_token_count() {
        let cfg = Config::default(); // p 32, stride 4 -> 64 tokens
        let mut rng = SplitMix64::new(4);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let patch = random_image(&mut rng, 20, 24); // arbitrary, resampled
        let tok = tokenize_patch(&mut tape, &embed, &patch, &cfg).unwrap();
        assert_eq!(tape.shape(tok.id), (64, 64));
    }

    #[test]
    fn identical_patches_tokenize_identically() {
        let cfg = cfg_small();
        let mut rng = SplitMix64::new(5);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let patch = random_image(&mut rng, 32, 32);
        let a = tokenize_patch(&mut tape, &embed, &patch, &cfg).unwrap();
        let b = tokenize_patch(&mut tape, &embed, &patch.clone(), &cfg).unwrap();
        for (x, y) in tape.data(a.id).iter().zip(tape.data(b.id)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn constant_patch_blocks_are_identical_pre_position() {
        let mut img = Rgb8::new(32, 32);
        for v in img.data.iter_mut() {
            *v = 120;
        }
        let resized = img.resize(32, 32);
        let (_, _, blocks) = image_blocks(&resized, 4);
        let feat = 4 * 4 * 3;
        let first = &blocks[..feat];
        for row in blocks.chunks(feat) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn zero_area_patch_is_input_error() {
        let cfg = cfg_small();
        let mut rng = SplitMix64::new(6);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let patch = Rgb8 { w: 0, h: 0, data: vec![] };
        assert!(matches!(
            tokenize_patch(&mut tape, &embed, &patch, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn n_to_1_single_patch_is_bitwise_identity() {
        let mut rng = SplitMix64::new(7);
        let mut ps = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "fuse", 8, 2, false, false);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let data = random_vec(&mut rng, 6 * 8, -1.0, 1.0);
        let t = tape.constant(6, 8, data.clone()).unwrap();
        let fused = n_to_1(&mut tape, &p, &[TokenSet::flat(t)]).unwrap();
        assert_eq!(fused.id, t);
        for (a, b) in tape.data(fused.id).iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn n_to_1_shape_is_independent_of_n() {
        let mut rng = SplitMix64::new(8);
        let mut ps = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "fuse", 8, 2, false, false);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let sets: Vec<TokenSet> = (0..10)
            .map(|_| {
                let data = random_vec(&mut rng, 6 * 8, -1.0, 1.0);
                TokenSet::flat(tape.constant(6, 8, data).unwrap())
            })
            .collect();
        for n in [1usize, 3, 10] {
            let fused = n_to_1(&mut tape, &p, &sets[..n]).unwrap();
            assert_eq!(tape.shape(fused.id), (6, 8));
        }
    }

    #[test]
    fn n_to_1_two_patches_matches_single_cross_attention() {
        let mut rng = SplitMix64::new(9);
        let mut ps = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "fuse", 8, 2, false, false);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let a = TokenSet::flat(tape.constant(6, 8, random_vec(&mut rng, 48, -1.0, 1.0)).unwrap());
        let b = TokenSet::flat(tape.constant(6, 8, random_vec(&mut rng, 48, -1.0, 1.0)).unwrap());
        let fused = n_to_1(&mut tape, &p, &[a, b]).unwrap();
        let oracle = attention_block(&mut tape, &p, a.id, b.id, None).unwrap();
        for (x, y) in tape.data(fused.id).iter().zip(tape.data(oracle)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn n_to_1_errors() {
        let mut rng = SplitMix64::new(10);
        let mut ps = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "fuse", 8, 2, false, false);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        assert!(matches!(n_to_1(&mut tape, &p, &[]), Err(Error::Usage(_))));
        let a = TokenSet::flat(tape.zeros(6, 8));
        let b = TokenSet::flat(tape.zeros(4, 8));
        assert!(matches!(n_to_1(&mut tape, &p, &[a, b]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn distinct_images_give_distinct_token_sets() {
        let cfg = cfg_small();
        let mut rng = SplitMix64::new(11);
        let mut ps = ParamStore::<f64>::new();
        let embed = Embedder::new(&mut ps, &mut rng, &cfg);
        let mut tape = Tape::new();
        ps.bind(&mut tape, false).unwrap();
        let mut sigs = std::collections::HashSet::new();
        for _ in 0..100 {
            let img = random_image(&mut rng, 32, 32);
            let tok = tokenize_image(&mut tape, &embed, &img, &cfg).unwrap();
            let sig: Vec<u64> = tape.data(tok.id).iter().map(|v| v.to_bits()).collect();
            sigs.insert(sig);
        }
        assert_eq!(sigs.len(), 100);
    }
}
