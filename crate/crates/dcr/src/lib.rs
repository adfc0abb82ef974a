//! Dual-path conflict resolution for multimodal emotion recognition.
//!
//! The crate trains two cooperating paths over text, audio and visual
//! sequences:
//!
//! * [`afd`] distils per-timestep class evidence from the audio and visual
//!   branches into the text branch, weighting each timestep by how strongly
//!   the teacher supports the true class, and fuses the three branches with
//!   cross-attention.
//! * [`ada`] treats the choice between the fused prediction and each
//!   unimodal prediction as a one-step contextual bandit and learns a routing
//!   policy with an advantage actor-critic objective.
//!
//! [`pipeline`] runs the two stages in order, freezing the first before the
//! second starts. [`datagen`] produces synthetic samples with controlled
//! benign and severe modality conflicts, and [`eval`] holds the metrics and
//! analysis tables.

pub mod ada;
pub mod afd;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
