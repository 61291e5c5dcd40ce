//! Fixed workloads for the kernel benchmarks.

use detdisc_core::eval::{detect, Detection, GroundTruth};
use detdisc_core::mining::with_background_labels;
use detdisc_core::synth::{generate, Split, SynthConfig};
use detdisc_core::trainer::{run_stage_init, run_stage_strong, ReprConfig, TrainConfig};
use detdisc_core::{Dataset, Model};

pub struct Workload {
    pub data: Dataset,
    pub test: Dataset,
    pub test_truth: GroundTruth,
    pub cfg: TrainConfig,
    /// Model after the classification and strong stages.
    pub model: Model,
    pub detections: Vec<Detection>,
}

/// Default synthetic benchmark with a two-layer representation, trained
/// through the strong stage.
pub fn workload(seed: u64) -> Workload {
    let out = generate(&SynthConfig {
        seed,
        ..Default::default()
    })
    .expect("synthetic data");
    let cfg = TrainConfig {
        seed,
        repr: ReprConfig {
            layers: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = with_background_labels(&out.train, cfg.iou_bg_threshold);
    let mut model = cfg.initial_model(&data).expect("model");
    run_stage_init(&mut model, &data, &cfg).expect("stage A");
    run_stage_strong(&mut model, &data, &cfg).expect("stage B");
    let test_truth = out.truth.ground_truth(&[Split::Test]);
    let cats: Vec<String> = data.categories_weak.iter().cloned().collect();
    let detections = detect(&model, &out.test, &cats, 0.3).expect("detections");
    Workload {
        data,
        test: out.test,
        test_truth,
        cfg,
        model,
        detections,
    }
}
