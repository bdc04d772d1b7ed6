//! Patch-aware decoder: top-down pyramid fusion, then per-level refinement
//! of object queries with patch-calibrated deformable attention.
//!
//! Fusion runs coarse-to-fine: the coarser fused level is bilinearly
//! upsampled x2 and added to the bottleneck-processed finer level, then a
//! second bottleneck produces the fused grid. Each decoder layer (one per
//! pyramid level, coarsest first) re-calibrates the fused image tokens with
//! that level's patch tokens, updates every query from a handful of
//! bilinearly sampled grid locations predicted from the query, and finishes
//! with object self-attention and a feed-forward block.

use crate::attention::{attention_block, Affine, AttentionParams, FfnParams, LayerNormParams, ProjectionTriple};
use crate::config::Config;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, TensorId};
use crate::tokenize::TokenSet;

/// Residual bottleneck `x + expand(relu(reduce(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckParams {
    pub reduce: Affine,
    pub expand: Affine,
}

impl BottleneckParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, d: usize) -> Self {
        BottleneckParams {
            reduce: Affine::new(ps, rng, &format!("{name}.reduce"), d, d / 2),
            expand: Affine::new(ps, rng, &format!("{name}.expand"), d / 2, d),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let h = self.reduce.apply(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.expand.apply(tape, h)?;
        tape.add(x, h)
    }
}

/// One fusion stage between adjacent pyramid levels.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub block_a: BottleneckParams,
    pub block_b: BottleneckParams,
}

impl FusionParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, d: usize) -> Self {
        FusionParams {
            block_a: BottleneckParams::new(ps, rng, &format!("{name}.a"), d),
            block_b: BottleneckParams::new(ps, rng, &format!("{name}.b"), d),
        }
    }
}

/// Bilinear x2 upsample of a token grid (half-pixel centers, no corner
/// alignment), realized by sampling the grid at the finer lattice.
pub fn upsample2x<T: Scalar>(tape: &mut Tape<T>, tokens: TensorId, grid: (usize, usize)) -> Result<TensorId> {
    let (h, w) = grid;
    let (th, tw) = (2 * h, 2 * w);
    let mut pts = Vec::with_capacity(th * tw * 2);
    for r in 0..th {
        for c in 0..tw {
            pts.push(T::from_f64c((c as f64 + 0.5) / tw as f64));
            pts.push(T::from_f64c((r as f64 + 0.5) / th as f64));
        }
    }
    let points = tape.constant(th * tw, 2, pts)?;
    tape.bilinear_sample(tokens, h, w, points)
}

/// Top-down fusion pass. `fusion[i]` joins level `i+2` into level `i+1`
/// (1-based levels, finest first). Output shapes equal input shapes.
pub fn pyramid_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    fusion: &[FusionParams],
    pyramid: &[TokenSet],
) -> Result<Vec<TokenSet>> {
    let levels = pyramid.len();
    if fusion.len() + 1 != levels {
        return Err(Error::dim("pyramid_fuse", format!("{} fusion stages for {levels} levels", fusion.len())));
    }
    let mut fused: Vec<Option<TokenSet>> = vec![None; levels];
    fused[levels - 1] = Some(pyramid[levels - 1]);
    for i in (0..levels - 1).rev() {
        let hi = pyramid[i];
        let lo = fused[i + 1].unwrap();
        let (hh, hw) = hi.grid.ok_or_else(|| Error::Usage("pyramid level without grid".into()))?;
        let (lh, lw) = lo.grid.ok_or_else(|| Error::Usage("pyramid level without grid".into()))?;
        if (lh * 2, lw * 2) != (hh, hw) {
            return Err(Error::dim(
                "pyramid_fuse",
                format!("level {} grid {lh}x{lw} does not upsample to {hh}x{hw}", i + 2),
            ));
        }
        let up = upsample2x(tape, lo.id, (lh, lw))?;
        let a = fusion[i].block_a.apply(tape, hi.id)?;
        let sum = tape.add(a, up)?;
        let out = fusion[i].block_b.apply(tape, sum)?;
        fused[i] = Some(TokenSet::gridded(out, hh, hw));
    }
    Ok(fused.into_iter().map(|t| t.unwrap()).collect())
}

/// Deformable attention: each query predicts a reference point and a small
/// set of offsets, gathers grid tokens there by bilinear interpolation, and
/// attends over exactly those samples.
#[derive(Debug, Clone, Copy)]
pub struct DeformableParams {
    pub norm_q: LayerNormParams,
    pub norm_kv: LayerNormParams,
    pub ref_point: Affine,
    pub offsets: Affine,
    pub weight_logits: Affine,
    pub proj: ProjectionTriple,
    pub out: Affine,
    pub heads: usize,
    pub points: usize,
    pub width: usize,
}

impl DeformableParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, cfg: &Config) -> Self {
        let d = cfg.d;
        DeformableParams {
            norm_q: LayerNormParams::new(ps, rng, &format!("{name}.ln_q"), d),
            norm_kv: LayerNormParams::new(ps, rng, &format!("{name}.ln_kv"), d),
            ref_point: Affine::new(ps, rng, &format!("{name}.ref"), d, 2),
            offsets: Affine::new(ps, rng, &format!("{name}.off"), d, cfg.heads * cfg.points * 2),
            weight_logits: Affine::new(ps, rng, &format!("{name}.wlog"), d, cfg.heads * cfg.points),
            proj: ProjectionTriple::new(ps, rng, name, d),
            out: Affine::new(ps, rng, &format!("{name}.out"), d, d),
            heads: cfg.heads,
            points: cfg.points,
            width: d,
        }
    }

    /// View the shared projections as a dense cross-attention block (the
    /// "deformable off" ablation and the dense-equivalence oracle).
    pub fn as_dense_block(&self, residual: bool, pre_norm: bool) -> AttentionParams {
        AttentionParams {
            proj: self.proj,
            out: self.out,
            norm_q: self.norm_q,
            norm_kv: self.norm_kv,
            heads: self.heads,
            width: self.width,
            residual,
            pre_norm,
        }
    }
}

/// Where the sampling points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Reference point + offsets predicted from each query.
    Predicted,
    /// Every token center, for the dense-attention equivalence check; the
    /// effective point count becomes the grid size.
    PinnedCenters,
}

/// Pre-residual deformable update for already-normalized `queries`.
/// `dot_logits` selects query-key dot products over predicted weights.
pub fn deformable_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &DeformableParams,
    queries: TensorId,
    grid_tokens: TensorId,
    grid: (usize, usize),
    dot_logits: bool,
    mode: SamplingMode,
) -> Result<TensorId> {
    let (h, w) = grid;
    let (k_count, d) = tape.shape(queries);
    if d != p.width {
        return Err(Error::dim("deformable_attention", format!("query width {d} vs {}", p.width)));
    }
    let (n, gd) = tape.shape(grid_tokens);
    if n != h * w || gd != d {
        return Err(Error::dim("deformable_attention", format!("grid {n}x{gd} vs {h}x{w}x{d}")));
    }
    let n_pts = match mode {
        SamplingMode::Predicted => p.points,
        SamplingMode::PinnedCenters => n,
    };
    if n_pts == 0 {
        return Err(Error::Config("deformable attention needs at least one point".into()));
    }
    let dh = d / p.heads;

    // shared per-query geometry
    let (ref_rep, offsets_scaled) = match mode {
        SamplingMode::Predicted => {
            let r = p.ref_point.apply(tape, queries)?;
            let r = tape.sigmoid(r)?;
            let rep = tape.repeat_rows(r, n_pts)?;
            let off = p.offsets.apply(tape, queries)?;
            // offsets live in grid units; scale to the unit square per axis
            let mut pattern = Vec::with_capacity(p.heads * p.points * 2);
            for _ in 0..p.heads * p.points {
                pattern.push(T::from_f64c(1.0 / w as f64));
                pattern.push(T::from_f64c(1.0 / h as f64));
            }
            let scales = tape.constant(1, p.heads * p.points * 2, pattern)?;
            (Some(rep), Some(tape.mul_row(off, scales)?))
        }
        SamplingMode::PinnedCenters => (None, None),
    };

    let pinned_points = if mode == SamplingMode::PinnedCenters {
        let mut pts = Vec::with_capacity(k_count * n * 2);
        for _ in 0..k_count {
            for r in 0..h {
                for c in 0..w {
                    pts.push(T::from_f64c((c as f64 + 0.5) / w as f64));
                    pts.push(T::from_f64c((r as f64 + 0.5) / h as f64));
                }
            }
        }
        Some(tape.constant(k_count * n, 2, pts)?)
    } else {
        None
    };

    let weight_logits_all = if !dot_logits && mode == SamplingMode::Predicted {
        Some(p.weight_logits.apply(tape, queries)?)
    } else {
        None
    };

    let mut heads_out = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let pts = match mode {
            SamplingMode::Predicted => {
                let off_h = tape.slice_cols(offsets_scaled.unwrap(), head * n_pts * 2, n_pts * 2)?;
                let off_h = tape.reshape(off_h, k_count * n_pts, 2)?;
                tape.add(ref_rep.unwrap(), off_h)?
            }
            SamplingMode::PinnedCenters => pinned_points.unwrap(),
        };
        let sampled = tape.bilinear_sample(grid_tokens, h, w, pts)?; // [K*P, d]
        let v_all = p.proj.v.apply(tape, sampled)?;
        let v_h = tape.slice_cols(v_all, head * dh, dh)?;

        let logits = if dot_logits {
            let q_all = p.proj.q.apply(tape, queries)?;
            let q_h = tape.slice_cols(q_all, head * dh, dh)?;
            let q_rep = tape.repeat_rows(q_h, n_pts)?;
            let k_all = p.proj.k.apply(tape, sampled)?;
            let k_h = tape.slice_cols(k_all, head * dh, dh)?;
            let prod = tape.mul(q_rep, k_h)?;
            let ones = tape.constant(dh, 1, vec![T::one(); dh])?;
            let dots = tape.matmul(prod, ones)?; // [K*P, 1]
            let dots = tape.reshape(dots, k_count, n_pts)?;
            tape.scale(dots, 1.0 / (d as f64).sqrt())?
        } else {
            match mode {
                SamplingMode::Predicted => {
                    tape.slice_cols(weight_logits_all.unwrap(), head * n_pts, n_pts)?
                }
                SamplingMode::PinnedCenters => {
                    return Err(Error::Usage(
                        "pinned-center sampling requires dot-product logits".into(),
                    ))
                }
            }
        };
        let weights = tape.softmax(logits, 1)?; // rows sum to 1 over the samples
        let wcol = tape.reshape(weights, k_count * n_pts, 1)?;
        let weighted = tape.scale_rows(v_h, wcol)?;
        heads_out.push(tape.group_sum_rows(weighted, n_pts)?);
    }
    let merged = tape.concat(&heads_out, 1)?;
    p.out.apply(tape, merged)
}

/// One decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    /// Patch-aware calibration of the fused image tokens.
    pub patch_cross: AttentionParams,
    pub deform: DeformableParams,
    pub object_self: AttentionParams,
    pub object_ffn: FfnParams,
}

impl DecoderLayerParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, cfg: &Config) -> Self {
        let d = cfg.d;
        DecoderLayerParams {
            patch_cross: AttentionParams::new(ps, rng, &format!("{name}.p_cross"), d, cfg.heads, true, cfg.pre_norm),
            deform: DeformableParams::new(ps, rng, &format!("{name}.deform"), cfg),
            object_self: AttentionParams::new(ps, rng, &format!("{name}.oself"), d, cfg.heads, true, cfg.pre_norm),
            object_ffn: FfnParams::new(ps, rng, &format!("{name}.offn"), d, d * cfg.ffn_ratio, cfg.pre_norm),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub fusion: Vec<FusionParams>,
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &Config) -> Self {
        DecoderParams {
            fusion: (0..cfg.layers - 1).map(|i| FusionParams::new(ps, rng, &format!("dec.fuse{i}"), cfg.d)).collect(),
            layers: (0..cfg.layers).map(|i| DecoderLayerParams::new(ps, rng, &format!("dec.l{i}"), cfg)).collect(),
        }
    }
}

/// Refine object tokens through one decoder layer at a given level.
pub fn decoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &DecoderLayerParams,
    z_o: TensorId,
    image: TokenSet,
    patches: TokenSet,
    cfg: &Config,
) -> Result<TensorId> {
    let grid = image.grid.ok_or_else(|| Error::Usage("decoder image tokens need a grid".into()))?;

    // (a) patch-aware cross-attention on the image tokens (ablation: skip)
    let zi = if cfg.cross_attention {
        attention_block(tape, &layer.patch_cross, image.id, patches.id, None)?
    } else {
        image.id
    };

    // (b) query refinement from the image tokens
    let z_o = if cfg.deformable {
        let q_in = if cfg.pre_norm { layer.deform.norm_q.apply(tape, z_o)? } else { z_o };
        let kv = if cfg.pre_norm { layer.deform.norm_kv.apply(tape, zi)? } else { zi };
        let update = deformable_attention(
            tape,
            &layer.deform,
            q_in,
            kv,
            grid,
            cfg.deformable_dot_logits,
            SamplingMode::Predicted,
        )?;
        tape.add(z_o, update)?
    } else {
        let dense = layer.deform.as_dense_block(true, cfg.pre_norm);
        attention_block(tape, &dense, z_o, zi, None)?
    };

    // (c) object self-attention + feed-forward
    let z_o = attention_block(tape, &layer.object_self, z_o, z_o, None)?;
    layer.object_ffn.apply(tape, z_o)
}

/// Full decoder pass: fuse the pyramid, then refine queries coarse-to-fine.
/// Returns the object tokens after every layer (last entry is the final
/// level-1 refinement; earlier entries feed auxiliary losses).
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DecoderParams,
    enc: &EncoderOutput,
    cfg: &Config,
) -> Result<Vec<TensorId>> {
    let levels = enc.image_pyramid.len();
    if params.layers.len() != levels {
        return Err(Error::dim(
            "decoder_forward",
            format!("{} layers vs {levels} pyramid levels", params.layers.len()),
        ));
    }
    let fused: Vec<TokenSet> = if cfg.fuse {
        pyramid_fuse(tape, &params.fusion, &enc.image_pyramid)?
    } else {
        // single-scale fallback: every layer sees the coarsest level
        vec![enc.image_pyramid[levels - 1]; levels]
    };
    let mut z_o = enc.objects.id;
    let mut per_layer = Vec::with_capacity(levels);
    for (j, layer) in params.layers.iter().enumerate() {
        let level = levels - 1 - j; // coarse to fine
        let (image, patches) = if cfg.fuse {
            (fused[level], enc.patch_pyramid[level])
        } else {
            (fused[level], enc.patch_pyramid[levels - 1])
        };
        z_o = decoder_layer_forward(tape, layer, z_o, image, patches, cfg)?;
        per_layer.push(z_o);
    }
    Ok(per_layer)
}
