//! Matching, metrics and the statistical comparison of layer modes.

mod matching;
mod ptukey;
mod report;
mod stats;

pub use matching::{
    match_detections, precision, sensitivity, Located, MatchPair, MatchResult, DEFAULT_MATCH_CUTOFF_UM,
};
pub use ptukey::{studentized_range_cdf, studentized_range_quantile, studentized_range_sf};
pub use report::{
    build_report, delta_pct, format_delta, format_p, read_samples, write_samples, AverageRow, ComparisonRow,
    LayerMode, Metric, MetricReport, MetricSample, ReportOptions, ResampleUnit,
};
pub use stats::{
    bootstrap_mean, bootstrap_means, one_way_anova, tukey_hsd, AnovaResult, BootstrapSummary, TukeyPair,
    DEFAULT_N_BOOT,
};
