//! mdbook cannot test code that needs external crates, so the chapters are pulled in
//! here and `cargo test` runs their examples as doc-tests.

#[doc = include_str!("../../../book/src/index.md")]
pub mod index {}
#[doc = include_str!("../../../book/src/packets.md")]
pub mod packets {}
#[doc = include_str!("../../../book/src/tent.md")]
pub mod tent {}
#[doc = include_str!("../../../book/src/flows.md")]
pub mod flows {}
#[doc = include_str!("../../../book/src/parametrix.md")]
pub mod parametrix {}
#[doc = include_str!("../../../book/src/reference.md")]
pub mod reference {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
