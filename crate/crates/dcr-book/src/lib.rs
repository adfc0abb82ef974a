//! Compiles the guide in `book/src` so that `cargo test --doc` runs every
//! snippet against the current `dcr` API.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/afd.md")]
pub mod afd {}
#[doc = include_str!("../../../book/src/ada.md")]
pub mod ada {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
