//! Task models assembled from the sparse blocks: a detection network and an
//! optical-flow network, their metrics, and checkpoint serialization.

pub mod backbone;
pub mod checkpoint;
pub mod detect;
pub mod flow;
pub mod metrics;

pub use backbone::{Backbone, BackboneSpec, LayerKind, LayerSpec, ModelError};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CkptError, TaskKind};
pub use detect::{
    build_targets, decode, detection_loss, DetectConfig, DetectModel, DetectTargets,
    DetectionOutput,
};
pub use flow::{FlowModel, FlowSpec, FLOW_STRIDE};
pub use metrics::{flow_metrics, iou, map_lite, FlowMetrics, MetricsError, ScoredBox};
