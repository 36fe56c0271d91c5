//! Downstream evaluation: frozen features, cluster separation, probing and
//! fine-tuning metrics, attention maps and zero-shot localization.

mod attention;
mod features;
mod metrics;
mod plot;
mod probe;
mod report;

pub use attention::{
    attention_volume, crop_attention, interpolate_cells, localize_attention, rescale_unit, upsample_cells,
    zero_shot_localize, AttentionMap, AttentionOptions, LocalizationCase, LocalizationReport, LOCALIZATION_DEFINITION,
};
pub use features::{
    extract_features, load_dataset, prepare_input, Extraction, FeatureMatrix, FeatureSource, PhantomSet, SampleFailure,
};
pub use metrics::{
    auc, cluster_metrics, dice, euclidean, percentile, precision_recall, precision_recall_at_half, ClusterReport, MeanSd,
    MetricMode, PrecisionRecall, CLUSTER_DEFINITION,
};
pub use plot::{embedding_plot, pca_2d, read_coordinates};
pub use probe::{
    finetune, linear_probe, score_predictions, stratified_folds, stratified_subset, ClassificationReport,
    FinetuneConfig, FinetuneReport, FoldMetrics, Logistic, ProbeConfig, SkippedFold,
};
pub use report::{write_report, ReportText};
