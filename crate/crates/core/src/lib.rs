//! Detector discovery from mixed supervision.
//!
//! A shared representation `φ` feeds one linear detector per category plus a
//! background detector. Training runs in stages: image-level classification,
//! region-level training on strongly labelled images, then rounds of
//! multiple-instance mining on weakly labelled images alternated with joint
//! training on both.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod mining;
pub mod model;
pub mod objective;
pub mod repr;
pub mod synth;
pub mod trainer;

pub use data::{validate_dataset, BBox, Bag, Dataset, Label, Region, Source, BACKGROUND};
pub use error::{Error, Result};
pub use eval::{Detection, GroundTruth, MapReport};
pub use mining::{MiningAssignment, MiningConfig};
pub use model::{HyperParams, Model, ModelGrad, Slot};
pub use objective::{ObjectiveKind, ObjectiveValue};
pub use repr::{Activation, ReprParams};
pub use synth::{SynthConfig, SynthOutput, SynthTruth};
pub use trainer::{run_pipeline, TrainConfig, TrainReport};
