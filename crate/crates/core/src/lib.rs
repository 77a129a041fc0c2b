//! Dual music/dance sequence generation.
//!
//! Two transformer sequence-to-sequence generators map music features to
//! dance poses and back. Training combines per-domain reconstruction
//! losses, a cycle-consistency loss and an entropic Gromov-Wasserstein
//! alignment between the two encoders' embedding spaces.
//!
//! Module map:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode tape and Adam.
//! - [`rotations`]: SO(3) helpers, the 6D rotation encoding, geodesic
//!   distance and spherical resampling.
//! - [`skeleton`]: the 24-joint skeleton and forward kinematics.
//! - [`features`]: music/dance sequence types, the `.mdseq` file format,
//!   dataset manifests and synthetic paired data.
//! - [`gw`]: the entropic Gromov-Wasserstein solver.
//! - [`losses`]: domain metrics, reconstruction and cycle losses.
//! - [`model`]: transformer generators, checkpoints and the training step.
//! - [`metrics`]: Fréchet distance, diversity, beat alignment and notes
//!   accuracy.
//! - [`config`]: run configuration, presets and field provenance.

pub mod config;
pub mod features;
pub mod gw;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod rotations;
pub mod skeleton;
pub mod tensor;

pub use features::{ChordQuality, ChordSeed, DanceSequence, MusicSequence, PairedDataset};
pub use gw::{GwConfig, GwSolution, TransportPlan};
pub use losses::LossBreakdown;
pub use metrics::EvalReport;
pub use model::{Direction, Generator, ModelConfig, TrainConfig, Trainer};
pub use rotations::Rotation6D;
pub use skeleton::Skeleton;
pub use tensor::{Tape, Tensor, Var};
