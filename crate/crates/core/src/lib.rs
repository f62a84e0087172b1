//! Single-pass action localization driven by the errors of a continually
//! trained next-frame feature predictor.
//!
//! Frames are encoded into a feature grid, a hierarchical recurrent stack
//! predicts the next grid, and the motion-weighted prediction error becomes a
//! spatial attention map. Box proposals closest to the attention peak are
//! selected and linked into tubes; the same errors flag temporal action
//! extents, drive gaze saliency and, pooled with the top hidden state, give
//! video-level features for clustering.

pub mod attention;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod frame;
pub mod lstm;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod proposals;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use attention::{ActionTube, AttentionMap, EnergyConfig, Saliency, ScoredBox, TubeEntry, TubeLinker};
pub use checkpoint::Checkpoint;
pub use cluster::{ClusteringResult, VideoFeature};
pub use config::{Mode, RunConfig, Strategy, CONFIG_ENV};
pub use encoder::{Encoder, EncoderConfig, FeatureGrid, GridDims};
pub use error::{Category, Error, Result};
pub use evaluate::EvalConfig;
pub use frame::{Frame, FrameReader};
pub use metrics::{GtVideo, MetricRecord};
pub use pipeline::{FrameRecord, RunSummary, StreamProcessor};
pub use predictor::{Predictor, PredictorConfig};
pub use proposals::BoxProposal;
pub use synth::{SceneConfig, Subset, SuiteManifest};
pub use tensor::Tensor;
