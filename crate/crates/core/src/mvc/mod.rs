//! Minimal-visual-contrast dataset construction: embedding store ingestion,
//! dual-threshold filtering and two-step caption augmentation.

pub mod augment;
pub mod filter;
pub mod rewriter;
pub mod store;

pub use augment::{augment_all, augment_step1, augment_step2, AugmentReport, AugmentedRecord, CaptionPair};
pub use filter::{cosine, filter_pair, run_filter, run_filter_path, Decision, FilterConfig, FilterReport};
pub use rewriter::{CachedRewriter, ExternalRewriter, Provenance, Rewriter, TemplateRewriter};
pub use store::EmbeddingRecord;
