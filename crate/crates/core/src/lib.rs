//! Label-free measurement of how far an evaluation dataset drifts from a
//! detector's training data, plus the detection-curve statistics used to
//! decide whether the detector still generalizes.
//!
//! The crate is organised bottom-up:
//!
//! * [`ingest`] parses and cross-validates every input artifact into a
//!   [`ingest::DatasetBundle`].
//! * [`mace`] fits Gaussian moments to embedding sets and computes the
//!   squared Fréchet distance between them.
//! * [`stats`] is a seeded, order-independent bootstrap engine with
//!   percentile intervals, z-tests and superiority / non-inferiority tests.
//! * [`deteval`] turns per-frame detections into temporally filtered alarms,
//!   TPR / FAPM operating points and curves.
//! * [`modality`] handles NBI / chromoendoscopy flags, visibility fractions
//!   and the cohorts built from them.
//! * [`project`] holds PCA and exact t-SNE for 2-D figure projections.
//! * [`synth`] generates datasets with planted ground truth.
//! * [`cli`] wires everything into the `mace` command-line tool.

pub mod cli;
pub mod deteval;
pub mod ingest;
pub mod mace;
pub mod modality;
pub mod project;
pub mod report;
pub mod stats;
pub mod synth;

pub use deteval::{Curve, CurvePoint, FilterConfig, MatchConfig};
pub use ingest::{DatasetBundle, EmbeddingSet, FrameKey};
pub use mace::{GaussianMoments, MaceScore};
pub use stats::{BootstrapConfig, Decision, TestResult};
