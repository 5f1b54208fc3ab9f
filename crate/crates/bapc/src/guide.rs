//! The user guide, one module per book chapter.
//!
//! Each chapter of `book/` is included verbatim as the documentation of an
//! empty module, so `cargo test --doc` compiles and runs every code block
//! in the book. The guide cannot drift from the API: a chapter example that
//! stops compiling fails the test suite.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/pretraining.md")]
pub mod pretraining {}

#[doc = include_str!("../../../book/src/transfer.md")]
pub mod transfer {}

#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}

#[doc = include_str!("../../../book/src/tooling.md")]
pub mod tooling {}
