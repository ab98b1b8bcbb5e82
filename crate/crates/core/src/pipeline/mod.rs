//! End-to-end orchestration: scene generation, the three-stage forward pass,
//! the corruption sweep and report files.

pub mod config;
pub mod forward;
pub mod io;
pub mod robustness;
pub mod scene;

pub use config::{Ablation, GridConfig, PipelineConfig, SceneConfig, Seeds};
pub use forward::{run_forward, FrameOutputs, ForwardOutput, Model, StageTimings};
pub use robustness::{
    emit_report, run_robustness_suite, Cell, DetectionFiles, DetectionProvider, GroundTruthProvider, ProxyScorer,
    RobustnessReport, REPORT_SCHEMA,
};
pub use scene::{generate_scene, Frame, SyntheticScene};
