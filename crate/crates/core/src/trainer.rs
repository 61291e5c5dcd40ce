//! Staged alternating minimisation.
//!
//! 1. init: image-level classification over W ∪ S trains φ and every category detector.
//! 2. strong: region-level training on S trains φ, the C_S detectors and the
//!    background detector; detectors of weak-only categories stay frozen.
//! 3. mine: φ fixed, one positive region per (weak bag, positive category).
//! 4. joint: region-level training on S and the mined W trains everything.
//!
//! Steps 3 and 4 repeat for `outer_rounds` rounds. Every stage is mini-batch
//! SGD with momentum; objective traces are full-dataset evaluations taken
//! through the `objective` module once before training and after every epoch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mining::{mine_dataset_detailed, with_background_labels, MiningAssignment, MiningConfig};
use crate::model::{HyperParams, Model, Slot};
use crate::objective::{
    add_regularizer_grad, classification_instances, classification_objective, classification_slots, data_term,
    joint_instances, joint_objective, joint_slots, strong_instances, strong_objective, strong_slots, Instance,
    ObjectiveValue,
};
use crate::repr::{init_repr, Activation, ReprParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub init: usize,
    pub strong: usize,
    pub joint: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs {
            init: 30,
            strong: 20,
            joint: 20,
        }
    }
}

/// Shape of the representation stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprConfig {
    /// Number of layers, 0 to 3. Zero gives the identity map.
    pub layers: usize,
    /// Width of every layer; the input dimension when absent.
    pub width: Option<usize>,
    pub activation: Activation,
    /// Keep φ fixed in every stage.
    pub frozen: bool,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            layers: 1,
            width: None,
            activation: Activation::RectifiedLinear,
            frozen: false,
        }
    }
}

impl ReprConfig {
    pub fn build(&self, seed: u64, input_dim: usize) -> Result<ReprParams> {
        if self.layers > 3 {
            return Err(Error::InvalidConfig(format!(
                "representation supports at most 3 layers, got {}",
                self.layers
            )));
        }
        let width = self.width.unwrap_or(input_dim);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(width, self.layers));
        init_repr(seed, &dims, &vec![self.activation; self.layers])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub epochs: StageEpochs,
    pub outer_rounds: usize,
    /// Bags per batch in the init stage.
    pub batch_bags: usize,
    /// Regions per batch in the strong and joint stages.
    pub batch_regions: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub iou_bg_threshold: f64,
    pub repr: ReprConfig,
    pub mining: MiningConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 1.0,
            epochs: StageEpochs::default(),
            outer_rounds: 2,
            batch_bags: 32,
            batch_regions: 128,
            alpha: 1.0,
            lambda: 1e-3,
            iou_bg_threshold: 0.3,
            repr: ReprConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            lambda: self.lambda,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.outer_rounds == 0 {
            return bad("outer_rounds must be at least 1");
        }
        if self.batch_bags == 0 || self.batch_regions == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.iou_bg_threshold > 0.0 && self.iou_bg_threshold <= 1.0) {
            return bad("iou_bg_threshold must lie in (0, 1]");
        }
        self.hyper().check()?;
        self.mining.check()
    }

    /// Fresh model for `d`: initialised φ and zero detectors.
    pub fn initial_model(&self, d: &Dataset) -> Result<Model> {
        let repr = self.repr.build(self.seed, d.feature_dim)?;
        Model::new(repr, d, self.hyper())
    }
}

/// Momentum update: `v ← momentum·v − lr·g`, `θ ← θ + v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dims("sgd step", params.len(), grads.len().min(velocity.len())));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Init,
    Strong,
    Joint(usize),
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Init => "stageA".into(),
            Stage::Strong => "stageB".into(),
            Stage::Joint(t) => format!("round{t}"),
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Stage::Init => 1,
            Stage::Strong => 2,
            Stage::Joint(t) => 10 + *t as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub total: f64,
    pub regularization: f64,
    pub data_loss: f64,
}

impl TracePoint {
    fn new(epoch: usize, v: &ObjectiveValue) -> Self {
        TracePoint {
            epoch,
            total: v.total,
            regularization: v.regularization,
            data_loss: v.data_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Epoch 0 is the value before training.
    pub trace: Vec<TracePoint>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub assignments: Vec<MiningAssignment>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    pub rounds: Vec<RoundReport>,
    pub model: Model,
}

impl TrainReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// Pipeline failure carrying everything completed before the error.
#[derive(Debug)]
pub struct PipelineFailure {
    pub error: Error,
    pub partial: TrainReport,
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for PipelineFailure {}

/// Progress notifications emitted by [`run_pipeline_with`].
pub enum PipelineEvent<'a> {
    StageDone {
        stage: Stage,
        model: &'a Model,
    },
    Mined {
        round: usize,
        assignments: &'a [MiningAssignment],
    },
}

/// Which parameters a stage may move.
struct Trainable {
    repr: bool,
    slots: Vec<Slot>,
}

fn run_sgd_stage(
    model: &mut Model,
    instances: &[Instance<'_>],
    reg_slots: &[Slot],
    trainable: &Trainable,
    batch: usize,
    epochs: usize,
    stage: Stage,
    cfg: &TrainConfig,
    eval: &dyn Fn(&Model) -> Result<ObjectiveValue>,
) -> Result<StageReport> {
    let started = Instant::now();
    let check = |v: ObjectiveValue, epoch: usize| -> Result<TracePoint> {
        if v.total.is_finite() {
            Ok(TracePoint::new(epoch, &v))
        } else {
            Err(Error::Numerical(format!(
                "{} objective became non-finite at epoch {epoch}",
                stage.name()
            )))
        }
    };
    let mut trace = vec![check(eval(model)?, 0)?];
    let n = instances.len();
    if n > 0 && epochs > 0 {
        let layout = model.layout();
        let mut ranges = Vec::new();
        if trainable.repr {
            ranges.push(layout.repr.clone());
        }
        ranges.extend(trainable.slots.iter().map(|&s| layout.slot(s)));
        let mut params = model.to_flat();
        let mut velocity = vec![0.0; params.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stage.stream());
        let mut order: Vec<usize> = (0..n).collect();
        let mut lr = cfg.learning_rate;
        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(batch) {
                let refs: Vec<&Instance> = idx.iter().map(|&i| &instances[i]).collect();
                let mut grad = data_term(model, &refs, true)?.grad.expect("gradient requested");
                // stochastic gradient of (objective / n)
                grad.scale(model.hyper.alpha / idx.len() as f64);
                add_regularizer_grad(model, reg_slots, 1.0 / n as f64, &mut grad);
                let g = grad.to_flat();
                for r in &ranges {
                    sgd_step(
                        &mut params[r.clone()],
                        &g[r.clone()],
                        &mut velocity[r.clone()],
                        lr,
                        cfg.momentum,
                    )?;
                }
                model.set_flat(&params);
            }
            lr *= cfg.lr_decay;
            trace.push(check(eval(model)?, epoch)?);
        }
    }
    Ok(StageReport {
        stage,
        trace,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Image-level classification over W ∪ S; background untouched.
pub fn run_stage_init(model: &mut Model, d: &Dataset, cfg: &TrainConfig) -> Result<StageReport> {
    let instances = classification_instances(model, d)?;
    let slots = classification_slots(model, d)?;
    let trainable = Trainable {
        repr: !cfg.repr.frozen,
        slots: slots.clone(),
    };
    run_sgd_stage(
        model,
        &instances,
        &slots,
        &trainable,
        cfg.batch_bags,
        cfg.epochs.init,
        Stage::Init,
        cfg,
        &|m| classification_objective(m, d),
    )
}

/// Region-level training on the strong split. Expects background labels on
/// strong regions. Detectors of categories only in C_W are not touched.
pub fn run_stage_strong(model: &mut Model, d: &Dataset, cfg: &TrainConfig) -> Result<StageReport> {
    let instances = strong_instances(model, d)?;
    let slots = strong_slots(model, d)?;
    let trainable = Trainable {
        repr: !cfg.repr.frozen,
        slots: slots.clone(),
    };
    run_sgd_stage(
        model,
        &instances,
        &slots,
        &trainable,
        cfg.batch_regions,
        cfg.epochs.strong,
        Stage::Strong,
        cfg,
        &|m| strong_objective(m, d),
    )
}

/// Region-level training on S and the mined W; every parameter moves.
pub fn run_stage_joint(
    model: &mut Model,
    d: &Dataset,
    assignments: &[MiningAssignment],
    cfg: &TrainConfig,
    round: usize,
) -> Result<StageReport> {
    let instances = joint_instances(model, d, assignments)?;
    let slots = joint_slots(model, d)?;
    let trainable = Trainable {
        repr: !cfg.repr.frozen,
        slots: slots.clone(),
    };
    run_sgd_stage(
        model,
        &instances,
        &slots,
        &trainable,
        cfg.batch_regions,
        cfg.epochs.joint,
        Stage::Joint(round),
        cfg,
        &|m| joint_objective(m, d, assignments),
    )
}

pub fn run_pipeline(d: &Dataset, cfg: &TrainConfig) -> std::result::Result<TrainReport, PipelineFailure> {
    run_pipeline_with(d, cfg, &mut |_| {})
}

/// Full pipeline: init, strong, then `outer_rounds` × (mine, joint).
pub fn run_pipeline_with(
    d: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(PipelineEvent<'_>),
) -> std::result::Result<TrainReport, PipelineFailure> {
    let fail = |error: Error, model: Option<Model>, stages, rounds| PipelineFailure {
        error,
        partial: TrainReport {
            stages,
            rounds,
            model: model.unwrap_or_else(|| Model {
                repr: ReprParams::identity(d.feature_dim),
                categories: Vec::new(),
                detectors: Vec::new(),
                background: vec![0.0],
                hyper: cfg.hyper(),
            }),
        },
    };
    if let Err(e) = cfg.check().and_then(|_| d.ensure_valid()) {
        return Err(fail(e, None, Vec::new(), Vec::new()));
    }
    let data = with_background_labels(d, cfg.iou_bg_threshold);
    let mut model = match cfg.initial_model(&data) {
        Ok(m) => m,
        Err(e) => return Err(fail(e, None, Vec::new(), Vec::new())),
    };
    let mut stages = Vec::new();
    let mut rounds = Vec::new();

    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err(fail(err, Some(model), stages, rounds)),
            }
        };
    }

    stages.push(attempt!(run_stage_init(&mut model, &data, cfg)));
    observer(PipelineEvent::StageDone {
        stage: Stage::Init,
        model: &model,
    });
    stages.push(attempt!(run_stage_strong(&mut model, &data, cfg)));
    observer(PipelineEvent::StageDone {
        stage: Stage::Strong,
        model: &model,
    });
    for round in 1..=cfg.outer_rounds {
        let started = Instant::now();
        let outcomes = attempt!(mine_dataset_detailed(&model, &data, &cfg.mining, round));
        let warnings = outcomes.iter().flat_map(|o| o.warnings.clone()).collect();
        let assignments: Vec<MiningAssignment> = outcomes.into_iter().flat_map(|o| o.assignments).collect();
        observer(PipelineEvent::Mined {
            round,
            assignments: &assignments,
        });
        rounds.push(RoundReport {
            round,
            assignments,
            warnings,
            seconds: started.elapsed().as_secs_f64(),
        });
        let assignments = &rounds.last().unwrap().assignments;
        let report = run_stage_joint(&mut model, &data, assignments, cfg, round);
        stages.push(attempt!(report));
        observer(PipelineEvent::StageDone {
            stage: Stage::Joint(round),
            model: &model,
        });
    }
    Ok(TrainReport { stages, rounds, model })
}
