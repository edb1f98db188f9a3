//! Split-learning simulator with label-aware channel scoring and adaptive
//! channel pruning of the cut-layer traffic.

pub mod acp;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod lcis;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod tensor;

pub use acp::{AdaptivePruner, PruneDecision, RatioBounds};
pub use baselines::{SchemeConfig, SchemeKind, ScoringKind};
pub use config::RunConfig;
pub use data::{Dataset, Partition};
pub use error::{Error, Result};
pub use harness::{
    run_experiment, run_scheme, ExperimentReport, SchemeRun, Stage, StageTracker, TrainSetup,
};
pub use lcis::{FeatureBatch, ScoreState};
pub use metrics::{RoundMetrics, SchemeSummary};
pub use nn::{LayerSpec, ModelSpec, SplitModel};
pub use protocol::{ByteLedger, Direction, Envelope, MessageKind, SimulatedLink, WireMessage};
pub use tensor::Tensor;
