//! Union-set multi-source model adaptation for semantic segmentation.
//!
//! Adapts `k` source-pretrained segmentation models, whose label spaces may
//! each cover only a subset of the target classes (their union must equal the
//! target label space), to an unlabeled target domain. Stage one retrains the
//! bundles on their own pseudo labels with cross-model consistency and
//! backbone/classifier adversarial training; stage two distills the adapted
//! bundles into a single final model with one backbone and all classifiers.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod plot;
pub mod pseudo;
pub mod report;
pub mod sched;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u32 = 255;
