//! Metrics: ROC-AUC, calibration, intervention curves and annotation statistics.

mod annotations;
mod curve;
mod metrics;

pub use annotations::{annotation_calibration, annotation_stats, AnnotationStats, ClassAveragedReference, ReferenceProvider};
pub use curve::{intervention_curve, InterventionCurve};
pub use metrics::{bin_index, calibration_curve, curve_auc, ece, roc_auc, value_at_fraction, CalibrationBin, CalibrationReport};
