//! Cross-scale sparse attention for next-scale autoregressive image models.
//!
//! The crate provides the multi-scale token layout ([`geometry`]), a dense
//! cross-scale attention oracle ([`attention`]), the tiled gather-pack kernel
//! shared by the sparse paths ([`kernel`]), top-k pattern reuse across scales
//! ([`cs4a`]), sink-plus-local-window block masks ([`csla`]), FLOP and
//! quality instruments ([`analysis`]) and the CLI harness ([`harness`]).
//!
//! ```
//! use sparse_scale_attn::csla::{block_mask_direct, mask_sparsity, CslaConfig};
//! use sparse_scale_attn::geometry::ScaleSchedule;
//!
//! let sched = ScaleSchedule::infinity_1k();
//! let mask = block_mask_direct(&sched, 13, &CslaConfig::default()).unwrap();
//! assert!(mask_sparsity(&mask) > 0.8);
//! ```

pub mod analysis;
pub mod attention;
pub mod cs4a;
pub mod csla;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod harness;
pub mod kernel;
pub mod rng;
pub mod tensor;

pub use attention::AttnWorkload;
pub use error::{Error, Result};
pub use exec::Parallelism;
pub use geometry::ScaleSchedule;
pub use tensor::{Real, Tensor};
