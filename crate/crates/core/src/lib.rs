//! Language-guided point cloud segmentation at desk scale: a geometric stem
//! injected into a transformer point encoder, a small causal language model
//! that emits segmentation tokens, and a geometry-guided propagation head
//! that turns those tokens into per-point masks.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod gem;
pub mod geometry;
pub mod gfp;
pub mod gradcheck;
pub mod lm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod precision;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{IndexSet, NeighborIndex, Point3, PointCloud};
pub use lm::{MaskEmbeddings, Vocabulary};
pub use losses::{LossWeights, MaskLogits};
pub use model::{ModelConfig, Prediction, SegPoint};
pub use precision::Precision;
pub use tasks::{Annotation, ChatSample, TaskKind};
pub use train::TrainConfig;
