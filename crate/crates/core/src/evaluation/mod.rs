//! Metrics and inspection tools for trained models.

mod auc;
mod features;
mod pad;
mod saliency;

pub use auc::{auc_roc, mean_auc, per_label_auc};
pub use features::{compute_features, export_features, read_features, split_by_domain, write_features, FeatureRow};
pub use pad::{pad_from_error, proxy_a_distance, LinearSvm, PadConfig, PadReport};
pub use saliency::{bilinear_upsample, grad_cam, SaliencyMap, SaliencySidecar};
