//! Truncation-free ad matching.
//!
//! The crate holds three matchers over one [`index::TargetingIndex`]:
//!
//! - the truncated two-stage online matcher ([`baseline::TwoStageMatcher`]),
//! - the exhaustive optimal matcher ([`baseline::match_optimal`]), used as the
//!   oracle everywhere,
//! - the near-line matcher: per-user top-n lists maintained by a daily
//!   [`nearline::fully_update`] and a windowed delta pipeline
//!   ([`nearline::DeltaWindow`]), read online through [`serving::fetch`].
//!
//! [`harness`] generates long-tail workloads and replays them against all
//! three, producing comparable revenue and cost reports.

mod codec;
pub mod domain;
pub mod error;
pub mod index;
pub mod baseline;
pub mod nearline;
pub mod serving;
pub mod harness;
pub mod config;

pub use error::{Error, Result};
