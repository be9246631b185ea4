//! Evaluation, alignment diagnostics, projections, plots and studies.

mod eval;
mod plot;
mod projection;
mod studies;
mod toy;

pub use eval::{alignment_from_features, alignment_from_stats, class_alignment_metric, evaluate_accuracy};
pub use plot::{bar_svg, errorbar_svg, scatter_svg, Series};
pub use projection::{
    feature_projection_2d, pca_2d, silhouette, tsne_2d, write_projection_csv, Projection, ProjectionMethod,
};
pub use studies::{
    ablation_configs, ablation_from_runs, ablation_label, mean_std, run_ablation, run_scaling_study, AblationReport,
    AblationRow, Cell, ScalingReport, ScalingRow, ABLATION_LABELS,
};
pub use toy::{ToyDiscResult, ToyTask};
