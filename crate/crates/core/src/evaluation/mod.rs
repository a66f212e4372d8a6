//! Cross-validated scoring and posterior weight summaries.

mod cv;
mod metrics;
mod weights;

pub use cv::{
    run_cv_experiment, Baselines, CvConfig, EvaluationReport, FoldScore, ModelReport, Pooled,
    SubjectPrediction,
};
pub use metrics::{
    accuracy, accuracy_reject_curve, balanced_accuracy, brier, chance_test, hard_decisions,
    ChanceTest, CurvePoint, CURVE_POINTS,
};
pub use weights::{
    quantile, weight_posterior_summary, ConcentrationSummary, WeightQuartiles, WeightSummary,
};
