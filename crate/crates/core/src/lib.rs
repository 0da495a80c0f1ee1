//! Visual-contrastive preference tuning on a desk-scale conditional token model.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over `f64` tensors,
//!   with finite-difference checks in [`gradcheck`].
//! - [`model`]: a tiny conditional token model `π(y | image, query)` with a
//!   learned "no image" vector, plus its binary checkpoint container.
//! - [`objectives`]: DPO, visual-conditional PO, attend / reject, VCO, S-VCO
//!   and the SFT ablation loss over [`objectives::LogProbBundle`]s.
//! - [`synth`]: seed-deterministic minimal-contrast pair generator with an
//!   injectable style shortcut.
//! - [`mvc`]: embedding-store ingestion, dual-threshold filtering and two-step
//!   language augmentation.
//! - [`probe`]: perplexity neglect probe, pair accuracy, visual dependency and
//!   improvement aggregation.
//! - [`train`]: the deterministic trainer with a frozen reference snapshot.

pub mod autodiff;
pub mod gradcheck;
pub mod model;
pub mod mvc;
pub mod objectives;
pub mod synth;
pub mod probe;
pub mod train;
