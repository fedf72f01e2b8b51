//! Audio-visual correspondence curation engine.
//!
//! Selects, from a pool of clips described by multi-layer audio and visual
//! features, the subset whose two modalities share the most information.
//! The main path clusters every feature space ([`kmeans`]), tallies the
//! resulting cluster IDs per selected set ([`mi`]) and maximizes the averaged
//! pairwise MI with batch greedy search ([`select`]). A contrastive estimator
//! and PCA ranking baselines ([`contrastive`], [`pca`]) score clips
//! individually instead; [`bench`] compares all of them on synthetic
//! correspondence-retrieval tasks.

pub mod assignment;
pub mod bench;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod filter;
pub mod kmeans;
pub mod mi;
pub mod pca;
pub mod pipeline;
pub mod select;
pub mod store;

pub use error::{Error, Result};
