//! Synthetic scenes, benchmark protocol, gradient checks and report output
//! around the `posefit` refiner.

pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod report;
pub mod scene;
pub mod seeds;

pub use bench::{run_benchmark, run_trials, Ablations, BenchConfig, BenchReport, Level, TrialRecord};
pub use error::HarnessError;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use report::{write_report, write_trace};
pub use scene::{builtin_mesh, synth_scene, Corruption, MeshRef, ScenePackage};
