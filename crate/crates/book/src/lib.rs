//! mdbook cannot run listings that depend on a workspace crate, so every
//! chapter is pulled in here as a doc comment and `cargo test --doc` runs
//! its code blocks. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/dataset.md")]
pub mod dataset {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/encoders.md")]
pub mod encoders {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/mechanisms.md")]
pub mod mechanisms {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
