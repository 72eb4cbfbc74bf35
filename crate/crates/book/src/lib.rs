//! The guide in `book/` compiled as doc-tests, one module per chapter, so
//! every listing is checked by `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/common-sense.md")]
pub mod common_sense {}
#[doc = include_str!("../../../book/src/proposals.md")]
pub mod proposals {}
#[doc = include_str!("../../../book/src/captioning.md")]
pub mod captioning {}
#[doc = include_str!("../../../book/src/videoqa.md")]
pub mod videoqa {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
