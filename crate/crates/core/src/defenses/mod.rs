//! Defense evaluations run against trained models: activation-based channel
//! pruning, input-superimposition entropy analysis, reverse-engineered
//! trigger anomaly detection, and attention heatmaps.

mod fine_pruning;
mod gradcam;
mod neural_cleanse;
mod strip;

pub use fine_pruning::{fine_pruning_curve, FinePruningPoint};
pub use gradcam::{gradcam_heatmap, render_heatmap};
pub use neural_cleanse::{
    anomaly_index, neural_cleanse, ClassCleanse, CleanseConfig, CleanseReport,
};
pub use strip::{strip_entropy, StripConfig};
