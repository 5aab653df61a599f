//! Foveated glimpse models: retinal sampling, factor-analysis image models,
//! glimpse fusion, fixation design and learning from glimpses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data_io;
pub mod design;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod learning;
pub mod models;
pub mod numerics;
pub mod retina;

pub use data_io::{ImageSet, ModelBundle, Payload};
pub use design::{Design, DesignModel, DesignScore, EigKind};
pub use error::{Error, Result};
pub use eval::{EvalReport, ProtocolConfig, SignTest};
pub use fusion::{fused_mixture, fused_posterior, lds_filter, Glimpse, GlimpseSequence};
pub use learning::{GlimpseDataset, GlimpseRecord, LearnState};
pub use models::*;
pub use retina::{build_layout, place, place_all, CellLayout, Offset, RetinaSpec, RetinalTransform};
