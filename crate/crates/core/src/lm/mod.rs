//! Tiny causal language model with point-token injection and
//! segmentation-token readout.

mod model;
pub mod vocab;

pub use model::{
    argmax_lowest, InjectedSequence, MaskEmbeddings, SegProjector, TinyLm, TinyLmConfig,
    FULL_SCALE_SEG_CHANNELS,
};
pub use vocab::Vocabulary;
