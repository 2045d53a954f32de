//! Multiclass transfer learning with shared representations: softmax
//! geometry, hypothesis spaces, synthetic data, ERM training and diagnostics.

// `!(x > 0.0)` is used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod harness;
pub mod data;
pub mod diagnostics;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod softmax;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use model::{LinearHead, MlpRep, RepKind, Representation, SubspaceRep};
pub use softmax::{NaturalParams, OneHotLabel};
pub use data::{CovariateSpec, GroundTruth, LabeledDataset, TruthConfig};
pub use harness::{ExperimentRecord, SweepConfig};
pub use io::ModelBundle;
pub use train::{HypothesisConfig, OptimConfig, TrainTrace};
