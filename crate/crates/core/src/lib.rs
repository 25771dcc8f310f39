//! Calibration of GTN ductile-damage parameters from force-displacement
//! curves and full-field strain snapshots.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod bayes;
pub mod config;
pub mod dataset;
pub mod design;
pub mod error;
pub mod features;
pub mod gp;
pub mod gtn;
pub mod optim;
pub mod pipeline;
pub mod specimen;
pub mod stages;
pub mod surrogate;

pub use bayes::{PosteriorSampleSet, TmcmcConfig};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use features::{Modality, PcaBasis};
pub use gtn::{GtnParams, ParamBox};
pub use pipeline::{Order, OrderComparison};
pub use specimen::{CurveSegment, StrainSnapshot};
pub use surrogate::SurrogateBundle;
