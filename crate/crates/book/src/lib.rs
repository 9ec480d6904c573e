//! Doc-tests for the guide.
//!
//! Each chapter under `book/src` is included as module documentation so
//! that `cargo test` compiles and runs every Rust listing in it.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/grid.md")]
pub mod grid {}

#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}

#[doc = include_str!("../../../book/src/pars.md")]
pub mod pars {}

#[doc = include_str!("../../../book/src/bayesopt.md")]
pub mod bayesopt {}

#[doc = include_str!("../../../book/src/meta.md")]
pub mod meta {}

#[doc = include_str!("../../../book/src/baseline.md")]
pub mod baseline {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
