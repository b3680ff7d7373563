//! Forecast directional route-level mobility flows from undirected per-segment
//! cellular traffic counts with a two-stage spatio-temporal graph network.
//!
//! Stage 1 is a spatio-temporal backbone pre-trained on cellular flows and
//! then frozen as a feature extractor. Stage 2 turns segment features into
//! route features by directional differencing, mixes each route with its
//! upstream routes through channel-wise graph attention, runs a second
//! backbone over the route graph and maps the result to forecasts.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod framework;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod topology;
pub mod train;

pub use backbone::{pretrain_stage1, AdjacencyMode, BackboneConfig, BackboneModel, Graph};
pub use error::{Error, Result};
pub use evaluation::{compute_metrics, improvement_ratio, run_ablations, run_comparison, ExperimentConfig, ExperimentData, MetricsReport};
pub use framework::{train_framework, Ablation, FrameworkConfig, FrameworkModel, Setting};
pub use tensor::Tensor;
pub use train::TrainConfig;
pub use topology::{RoadTopology, Route, Segment, TopologyOptions};
