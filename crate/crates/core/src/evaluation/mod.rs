//! FID, KL divergence, RMSE and R² for generated energy images.

mod features;
mod metrics;
mod report;

pub use features::{ExtractorKind, FeatureExtractor, DEFAULT_FEATURE_DIM};
pub use metrics::{compute_fid, compute_kl, compute_kl_with, compute_rmse_r2, KlOptions};
pub use report::{
    evaluate_all, evaluate_generator, slice_names, EvalReport, ExtractorInfo, MetricSet, MetricStat, ProbeEvaluator, SliceReport,
    EVAL_REPORT_VERSION, METRICS,
};
