//! Reading and writing activation files, and the token-level reports built
//! on labeled activations.

mod format;
mod report;

pub use format::*;
pub use report::{feature_report, nearest_embedding_report, ActivationRanking, FeatureEntry, FeatureReport, TokenScore};
