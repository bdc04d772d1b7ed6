//! Patch-guided instance segmentation, end to end and from scratch.
//!
//! Given a cluttered scene image and a handful of small reference patches of
//! one product (SKU), the network segments every instance of that product —
//! including products never seen during training. The crate contains the
//! full stack needed to train and evaluate that network on a desk-scale
//! synthetic benchmark:
//!
//! - [`tensor`]: dense 2-D tensors with reverse-mode autodiff on a tape.
//! - [`attention`]: multi-head cross / windowed self-attention blocks.
//! - [`tokenize`]: image/patch block embedding and N-patch fusion.
//! - [`encoder`]: patch-image correlation encoder producing a feature
//!   pyramid calibrated by patch tokens plus object query tokens.
//! - [`decoder`]: top-down pyramid fusion and patch-aware deformable
//!   decoding of object queries.
//! - [`heads`]: classification / box / mask-vector heads; [`uqr`] holds the
//!   DCT mask codec behind the mask head.
//! - [`matching`] and [`losses`]: Hungarian assignment and the composite
//!   set-prediction loss.
//! - [`metrics`]: mAP, recall, and overlap precision/recall/F-measure.
//! - [`scene`]: deterministic synthetic SKU/scene/patch generator and the
//!   dataset manifest format.
//! - [`optim`], [`checkpoint`], [`train`], [`eval`]: AdamW, binary
//!   checkpoint container, training loop, and the evaluation protocol.
//! - [`verify`], [`selftest`]: independent oracles and the self-check
//!   suite exposed by the CLI.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod params;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod tokenize;
pub mod uqr;
pub mod tensor;
pub mod verify;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, TensorId};
