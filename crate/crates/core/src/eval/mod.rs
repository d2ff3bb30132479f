//! Detection evaluation: box metrics, annotation files and the bundled
//! reference detector.

mod annotations;
mod detector;
mod metrics;

pub use annotations::{AnnotationFile, BoxRecord, ImageAnnotations};
pub use detector::{connected_components, Detector, DetectorConfig, DetectorSample, ReferenceDetector};
pub use metrics::{
    average_precision, average_precision_with, best_f1, comparison_table, evaluate, f1, iou, iou_key, match_detections,
    operating_point, pr_curve, BBox, BestF1, ComparisonRow, Detection, EvalConfig, EvalReport, GroundTruthBox, Interpolation,
    LabeledDetection, MatchResult, OperatingPoint, PrPoint, COMPARISON_COLUMNS, OPERATING_CONFIDENCE, PRIMARY_IOU,
};
