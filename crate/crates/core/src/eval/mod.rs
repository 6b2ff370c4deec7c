//! Segmentation and detection metrics, post-processing and reports.

pub mod components;
pub mod detection;
pub mod metrics;
pub mod report;

pub use components::{components, decide_postprocessing, largest_components, PostprocessingPolicy};
pub use detection::{detection_score, roc_auc, roc_points, DetectionRecord, Reducer, RocPoint};
pub use metrics::{avd, dice_score, mm3_to_ml};
pub use report::{build_report, read_report_csv, ReportRow, SegmentationReport, VolumeMetrics, ALL};
