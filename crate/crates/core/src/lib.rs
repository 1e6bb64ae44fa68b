//! Benchmarking toolkit for machine unlearning.
//!
//! The crate covers the full evaluation loop: deterministic split plans and a
//! content-addressed experiment store ([`store`]), a small CPU classifier
//! engine ([`nn`], [`zoo`]), eight unlearning algorithms with cost accounting
//! ([`unlearn`]), membership-inference attacks including offline LiRA and an
//! update-leakage attack ([`attack`]), worst-case privacy metrics
//! ([`metrics`]) and the iterative benchmark pipeline ([`pipeline`]).

pub mod attack;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod store;
pub mod unlearn;
pub mod zoo;

pub use attack::{AttackResult, PairedScoreMatrix, ScoreMatrix};
pub use data::{Dataset, ExampleSource, SyntheticSpec};
pub use error::{BenchError, Result};
pub use metrics::{EpsilonEstimate, RocCurve, WorstCaseReport};
pub use nn::{ArchFamily, ArchitectureSpec, Network};
pub use pipeline::{BenchConfig, Workspace};
pub use store::{CheckpointRef, IndexSet, Provenance, SplitPlan, Store};
pub use unlearn::{AlgorithmId, CostReport, UnlearnOutcome, UnlearnRequest};
pub use zoo::{Checkpoint, TrainConfig};
