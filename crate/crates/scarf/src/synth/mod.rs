//! Synthetic two-modality detection harness.
//!
//! Scenes are rectangles rendered into a visible and an infrared image with
//! per-object visibility (both / VIS-only / IR-only), so the modalities carry
//! genuinely complementary information. A toy detector (shared 1×1 stem,
//! Scarf Neck, dense per-cell head) trains on these scenes under any dropout
//! policy and is scored by the modality-incomplete benchmark.

mod detector;
mod experiment;
mod scene;

pub use detector::{
    decode, detection_loss, forward_detector, ground_truth_of, ToyConfig, ToyDetectorParams,
    BOX_SCALE,
};
pub use experiment::{
    ablate_blocks, ablate_double_sampling, ablate_ratio, dominant_modality, experiment_table,
    run_robustness_experiment, train_detector, AblationReport, AblationRow, ArmReport,
    EvalSuite, ExperimentConfig, ExperimentReport, TrainConfig, TrainLog, SPLIT_COMPLETE,
    SPLIT_IR_ONLY, SPLIT_VIS_ONLY,
};
pub use scene::{generate_scene, generate_pairs, SceneSpec, Visibility};
