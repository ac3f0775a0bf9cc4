//! Semi-supervised open-set domain-adversarial training with domain-level and
//! common-label-level alignment, plus the evaluation tools around it:
//! per-label AUC-ROC, Proxy-A-Distance, feature export and Grad-CAM.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod label_space;
pub mod network;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
