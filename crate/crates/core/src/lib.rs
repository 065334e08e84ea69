//! Privileged contrastive pretraining at toy scale.
//!
//! Teachers see privileged inputs (window-level features, optionally fused
//! with frames) and are trained either end-to-end or by supervised
//! contrastive pretraining plus a linear probe; frames-only students then
//! learn from them through the LUPI objective. The crate also contains a
//! synthetic two-modality corpus generator, the windowing / labelling
//! pipeline and a participant-grouped evaluation harness.

mod error;

pub mod data;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use models::{ModelGraph, Role};
pub use nn::{Mode, Parameter, RngStream, Tensor};
