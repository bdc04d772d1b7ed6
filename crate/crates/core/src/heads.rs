//! Parallel task heads: classification, box regression, and mask-vector
//! regression, each a four-layer feed-forward stack over the object tokens.
//!
//! The classifier is binary: class 0 means "an instance of the queried
//! SKU", class 1 means "no object". Boxes are `(cx, cy, w, h)` squashed to
//! (0,1) by a sigmoid. Mask vectors are unbounded DCT coefficients.

use crate::attention::Affine;
use crate::config::Config;
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, TensorId};
use crate::uqr::MaskVector;

pub const NUM_CLASSES: usize = 2;
pub const CLASS_OBJECT: usize = 0;
pub const CLASS_NO_OBJECT: usize = 1;

/// One four-layer feed-forward stack (three hidden ReLU layers).
#[derive(Debug, Clone)]
pub struct FfnStack {
    pub layers: Vec<Affine>,
}

impl FfnStack {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, d: usize, out: usize) -> Self {
        let mut layers = Vec::with_capacity(4);
        for i in 0..3 {
            layers.push(Affine::new(ps, rng, &format!("{name}.fc{i}"), d, d));
        }
        layers.push(Affine::new(ps, rng, &format!("{name}.fc3"), d, out));
        FfnStack { layers }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub class_head: FfnStack,
    pub box_head: FfnStack,
    pub mask_head: FfnStack,
}

impl HeadParams {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &Config) -> Self {
        HeadParams {
            class_head: FfnStack::new(ps, rng, "head.class", cfg.d, NUM_CLASSES),
            box_head: FfnStack::new(ps, rng, "head.box", cfg.d, 4),
            mask_head: FfnStack::new(ps, rng, "head.mask", cfg.d, cfg.mask_coeffs),
        }
    }
}

/// Raw head outputs on the tape, one row per query.
#[derive(Debug, Clone, Copy)]
pub struct HeadsOut {
    pub class_logits: TensorId,
    pub boxes: TensorId,
    pub mask_vecs: TensorId,
}

pub fn heads_forward<T: Scalar>(tape: &mut Tape<T>, p: &HeadParams, z_o: TensorId) -> Result<HeadsOut> {
    let class_logits = p.class_head.apply(tape, z_o)?;
    let boxes_raw = p.box_head.apply(tape, z_o)?;
    let boxes = tape.sigmoid(boxes_raw)?;
    let mask_vecs = p.mask_head.apply(tape, z_o)?;
    Ok(HeadsOut { class_logits, boxes, mask_vecs })
}

/// One decoded prediction, off the tape.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Softmax probability of the "queried SKU" class.
    pub score: f64,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    pub mask: MaskVector,
}

/// Pull plain predictions out of the tape.
pub fn extract_predictions<T: Scalar>(tape: &Tape<T>, heads: &HeadsOut, mask_grid: usize) -> Vec<Prediction> {
    let (k, c) = tape.shape(heads.class_logits);
    debug_assert_eq!(c, NUM_CLASSES);
    let (_, n_c) = tape.shape(heads.mask_vecs);
    let logits = tape.data(heads.class_logits);
    let boxes = tape.data(heads.boxes);
    let masks = tape.data(heads.mask_vecs);
    (0..k)
        .map(|i| {
            let l0 = logits[i * c + CLASS_OBJECT].to_f64c();
            let l1 = logits[i * c + CLASS_NO_OBJECT].to_f64c();
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            Prediction {
                score: e0 / (e0 + e1),
                bbox: [
                    boxes[i * 4].to_f64c(),
                    boxes[i * 4 + 1].to_f64c(),
                    boxes[i * 4 + 2].to_f64c(),
                    boxes[i * 4 + 3].to_f64c(),
                ],
                mask: MaskVector {
                    coeffs: masks[i * n_c..(i + 1) * n_c].iter().map(|v| v.to_f64c()).collect(),
                    m: mask_grid,
                },
            }
        })
        .collect()
}
