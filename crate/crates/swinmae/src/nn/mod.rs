//! Windowed-attention model components with explicit forward/backward passes.
//!
//! Every layer is a lightweight descriptor naming its tensors in a
//! [`crate::store::ParamStore`]; forward passes return caches that the
//! matching backward passes consume. All math is generic over
//! [`crate::tensor::Scalar`] so gradient checks can run the training code
//! paths at f64.

pub mod attention;
pub mod block;
pub mod encoder;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod resample;

pub use attention::{
    attention, shifted_attention_mask, window_partition, window_reverse, AttnParams, WindowGeometry,
};
pub use block::{BlockLayout, SwinBlock};
pub use encoder::{Encoder, EncoderCache, StageLayout};
pub use linear::Linear;
pub use norm::LayerNorm;
pub use resample::{FinalExpand, PatchExpand, PatchMerge};
