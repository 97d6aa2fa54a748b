//! Camera-radar bird's-eye-view fusion at toy scale, with intensity-aware
//! distillation from a frozen LiDAR teacher.
//!
//! Every operation carries a hand-written backward pass; [`checks`] verifies
//! them against brute-force and finite-difference oracles.

pub mod camera;
pub mod checks;
pub mod config;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod head;
pub mod intensity;
pub mod model;
pub mod nn;
pub mod objective;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod radar;
pub mod run;
pub mod scene;
pub mod teacher;
pub mod tensor;

pub use checks::{run_suite, CheckOutcome, Report, Suite};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use grid::{BevGridSpec, VoxelSpec};
pub use head::Box3D;
pub use intensity::{IntensityMap, LidarPoint};
pub use model::{Forward, Model, ModelConfig, PreparedScene};
pub use objective::{LossBreakdown, LossWeights};
pub use params::ParamStore;
pub use radar::RadarPoint;
pub use run::{train, StepRecord, TrainOutcome};
pub use scene::{generate_scene, SceneConfig, SceneSample};
pub use tensor::{Precision, Tensor};
