// SPDX-License-Identifier: Apache-2.0

//! The guide under `book/` as doc-tests. Each chapter is its own module, so
//! a failing listing names its chapter.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}
#[doc = include_str!("../../../book/src/moments.md")]
pub mod moments {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/robustness.md")]
pub mod robustness {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
