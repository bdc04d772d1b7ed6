//! Patch-image correlation encoder: a stack of layers that calibrate image
//! tokens with patch information and distill object tokens from them.
//!
//! Per layer, in order: (a) image tokens cross-attend to patch tokens,
//! (b) patch tokens cross-attend to the updated image tokens, (c) windowed
//! self-attention plus feed-forward on image tokens, (d) object tokens
//! cross-attend to the updated image tokens, (e) object self-attention plus
//! feed-forward, (f) 2x2 token merging halves the grid for the next layer.
//! The pyramid keeps the calibrated pre-merge grid of every level; patch
//! tokens are pair-pooled alongside so each level has same-width patch
//! tokens for the decoder.

use crate::attention::{attention_block, windowed_self_attention, Affine, AttentionParams, FfnParams};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, TensorId};
use crate::tokenize::TokenSet;

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    /// (a) image queries, patch keys/values.
    pub patch_to_image: AttentionParams,
    /// (b) patch queries, image keys/values.
    pub image_to_patch: AttentionParams,
    pub patch_ffn: FfnParams,
    /// (c) windowed self-attention over the image grid.
    pub image_self: AttentionParams,
    pub image_ffn: FfnParams,
    /// (d) object queries, image keys/values.
    pub image_to_object: AttentionParams,
    /// (e) object self-attention.
    pub object_self: AttentionParams,
    pub object_ffn: FfnParams,
    /// (f) post-pool projection of merged tokens.
    pub merge: Affine,
}

impl EncoderLayerParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, cfg: &Config) -> Self {
        let d = cfg.d;
        let h = cfg.heads;
        let hidden = d * cfg.ffn_ratio;
        let pn = cfg.pre_norm;
        EncoderLayerParams {
            patch_to_image: AttentionParams::new(ps, rng, &format!("{name}.p2i"), d, h, true, pn),
            image_to_patch: AttentionParams::new(ps, rng, &format!("{name}.i2p"), d, h, true, pn),
            patch_ffn: FfnParams::new(ps, rng, &format!("{name}.patch_ffn"), d, hidden, pn),
            image_self: AttentionParams::new(ps, rng, &format!("{name}.iself"), d, h, true, pn),
            image_ffn: FfnParams::new(ps, rng, &format!("{name}.image_ffn"), d, hidden, pn),
            image_to_object: AttentionParams::new(ps, rng, &format!("{name}.i2o"), d, h, true, pn),
            object_self: AttentionParams::new(ps, rng, &format!("{name}.oself"), d, h, true, pn),
            object_ffn: FfnParams::new(ps, rng, &format!("{name}.object_ffn"), d, hidden, pn),
            merge: Affine::new(ps, rng, &format!("{name}.merge"), d, d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &Config) -> Self {
        EncoderParams {
            layers: (0..cfg.layers).map(|i| EncoderLayerParams::new(ps, rng, &format!("enc.l{i}"), cfg)).collect(),
        }
    }
}

/// Multi-scale output: calibrated image grids (finest first), the matching
/// per-level patch tokens, and the final object tokens.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub image_pyramid: Vec<TokenSet>,
    pub patch_pyramid: Vec<TokenSet>,
    pub objects: TokenSet,
}

/// 2x2 average-pool over the token grid followed by the merge projection.
fn merge_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    merge: &Affine,
    tokens: TensorId,
    grid: (usize, usize),
) -> Result<TensorId> {
    let (h, w) = grid;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("token grid {h}x{w} is not 2x2 mergeable")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut corners: [Vec<usize>; 4] = Default::default();
    for r in 0..oh {
        for c in 0..ow {
            corners[0].push((2 * r) * w + 2 * c);
            corners[1].push((2 * r) * w + 2 * c + 1);
            corners[2].push((2 * r + 1) * w + 2 * c);
            corners[3].push((2 * r + 1) * w + 2 * c + 1);
        }
    }
    let mut acc = tape.gather_rows(tokens, &corners[0])?;
    for idx in &corners[1..] {
        let g = tape.gather_rows(tokens, idx)?;
        acc = tape.add(acc, g)?;
    }
    let pooled = tape.scale(acc, 0.25)?;
    merge.apply(tape, pooled)
}

/// Average-pool consecutive token pairs (patch stream downsampling).
fn pool_pairs<T: Scalar>(tape: &mut Tape<T>, tokens: TensorId) -> Result<TensorId> {
    let summed = tape.group_sum_rows(tokens, 2)?;
    tape.scale(summed, 0.5)
}

/// Output of one encoder layer.
pub struct EncoderLayerOutput {
    /// Calibrated pre-merge image grid (the pyramid entry for this level).
    pub image: TokenSet,
    /// Merged grid for the next layer, when requested.
    pub next_image: Option<TokenSet>,
    pub patch: TokenSet,
    pub next_patch: Option<TokenSet>,
    pub objects: TokenSet,
}

pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &EncoderLayerParams,
    z_i: TokenSet,
    z_p: TokenSet,
    z_o: TokenSet,
    cfg: &Config,
    merge_next: bool,
) -> Result<EncoderLayerOutput> {
    let grid = z_i.grid.ok_or_else(|| Error::Usage("encoder image tokens need a grid layout".into()))?;

    // (a) + (b): patch-image correlation, toggleable for ablations
    let (zi_a, zp_b) = if cfg.encoder_patch_cross {
        let zi = attention_block(tape, &layer.patch_to_image, z_i.id, z_p.id, None)?;
        let zp = attention_block(tape, &layer.image_to_patch, z_p.id, zi, None)?;
        let zp = layer.patch_ffn.apply(tape, zp)?;
        (zi, zp)
    } else {
        (z_i.id, z_p.id)
    };

    // (c) windowed self-attention + feed-forward on the image grid
    let zi_c = windowed_self_attention(tape, &layer.image_self, zi_a, grid, cfg.window)?;
    let zi_c = layer.image_ffn.apply(tape, zi_c)?;

    // (d) object tokens aggregate the calibrated image features
    let zo_d = attention_block(tape, &layer.image_to_object, z_o.id, zi_c, None)?;
    // (e) object self-attention + feed-forward
    let zo_e = attention_block(tape, &layer.object_self, zo_d, zo_d, None)?;
    let zo_e = layer.object_ffn.apply(tape, zo_e)?;

    // (f) token merging for the next level
    let (next_image, next_patch) = if merge_next {
        let merged = merge_tokens(tape, &layer.merge, zi_c, grid)?;
        let pooled = pool_pairs(tape, zp_b)?;
        (
            Some(TokenSet::gridded(merged, grid.0 / 2, grid.1 / 2)),
            Some(TokenSet::flat(pooled)),
        )
    } else {
        (None, None)
    };

    Ok(EncoderLayerOutput {
        image: TokenSet { id: zi_c, grid: Some(grid) },
        next_image,
        patch: TokenSet::flat(zp_b),
        next_patch,
        objects: TokenSet::flat(zo_e),
    })
}

/// Stack all encoder layers; per-level positional embeddings are added to
/// the merged grid between levels.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams,
    image_pos: &[TensorId],
    z_i: TokenSet,
    z_p: TokenSet,
    z_o: TokenSet,
    cfg: &Config,
) -> Result<EncoderOutput> {
    let levels = params.layers.len();
    let (gh, gw) = z_i.grid.ok_or_else(|| Error::Usage("image tokens need a grid".into()))?;
    let halvings = 1usize << (levels - 1);
    if gh % halvings != 0 || gw % halvings != 0 {
        return Err(Error::Config(format!("grid {gh}x{gw} cannot be halved {} times", levels - 1)));
    }

    let mut image_pyramid = Vec::with_capacity(levels);
    let mut patch_pyramid = Vec::with_capacity(levels);
    let (mut zi, mut zp, mut zo) = (z_i, z_p, z_o);
    for (i, layer) in params.layers.iter().enumerate() {
        let merge_next = i + 1 < levels;
        let out = encoder_layer_forward(tape, layer, zi, zp, zo, cfg, merge_next)?;
        image_pyramid.push(out.image);
        patch_pyramid.push(out.patch);
        zo = out.objects;
        if let (Some(ni), Some(np)) = (out.next_image, out.next_patch) {
            let with_pos = tape.add(ni.id, image_pos[i + 1])?;
            zi = TokenSet { id: with_pos, grid: ni.grid };
            zp = np;
        }
    }
    Ok(EncoderOutput { image_pyramid, patch_pyramid, objects: zo })
}
