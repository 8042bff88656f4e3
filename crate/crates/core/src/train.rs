//! Two-stage optimisation: Adam with step-decayed learning rate over
//! single-pair batches.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{ConfigError, DecoderConfig, EncoderConfig, ModelConfig, TaeConfig};
use crate::data::{augment, AugmentationSpec, RegisteredPair};
use crate::fusion::FUSION_PREFIX;
use crate::image::Plane;
use crate::losses::{
    scalar_of, stage1_objective, stage2_objective, total_stage1, total_stage2, LossError, LossReport, LossWeights,
};
use crate::model::{stage1_parts, stage2_parts, TaGat, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vessel::{extract_graph, skeletonize, VesselGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    /// `(height, width)` every pair is resized to.
    pub input_size: (usize, usize),
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub tae: TaeConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    /// Replace sizes, epochs, learning rate and architecture with the desk-scale preset.
    pub toy_mode: bool,
    /// Random flip/rotation/translation of every training pair.
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            stage1_epochs: 40,
            stage2_epochs: 80,
            lr: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 20,
            batch_size: 1,
            input_size: (288, 360),
            weights: LossWeights::default(),
            encoder: model.encoder,
            tae: model.tae,
            decoder: model.decoder,
            seed: 0,
            toy_mode: false,
            augment: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

pub const TOY_SIZE: (usize, usize) = (64, 80);
pub const TOY_EPOCHS: usize = 25;
pub const TOY_LR: f64 = 2e-3;

impl TrainConfig {
    pub fn toy() -> Self {
        Self { toy_mode: true, ..Self::default() }.effective()
    }

    /// The config actually trained: with `toy_mode` set, the desk-scale
    /// preset replaces sizes, epochs, learning rate and architecture.
    pub fn effective(&self) -> Self {
        if !self.toy_mode {
            return self.clone();
        }
        let model = ModelConfig::toy();
        Self {
            stage1_epochs: TOY_EPOCHS,
            stage2_epochs: TOY_EPOCHS,
            lr: TOY_LR,
            input_size: TOY_SIZE,
            encoder: model.encoder,
            tae: model.tae,
            decoder: model.decoder,
            augment: false,
            ..self.clone()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), tae: self.tae.clone(), decoder: self.decoder.clone() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model().validate()?;
        self.weights.validate()?;
        if self.batch_size != 1 {
            return Err(invalid("only batch_size 1 is supported"));
        }
        if self.lr_decay_every == 0 || !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(invalid("learning rate schedule must be positive"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(invalid("input size must be positive"));
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_epochs,
            Stage::Two => self.stage2_epochs,
        }
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * libm::pow(self.lr_decay, (epoch / self.lr_decay_every) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigErrorKind),
    #[error("empty training set")]
    EmptyDataset,
    #[error("pair `{id}` is {got:?}, expected {want:?}")]
    Size { id: String, got: (usize, usize), want: (usize, usize) },
    #[error("stage {stage} step {step}: {source}")]
    NonFinite {
        stage: u8,
        step: usize,
        source: LossError,
        /// State before the failing step.
        last_good: Box<CheckpointState>,
    },
    #[error("checkpoint does not match the configured architecture")]
    Incompatible,
}

/// Configuration problems, from either the model or the training setup.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigErrorKind {
    #[error(transparent)]
    Model(#[from] ConfigError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{0}")]
    Other(&'static str),
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e.into())
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Config(e.into())
    }
}

fn invalid(msg: &'static str) -> TrainError {
    TrainError::Config(ConfigErrorKind::Other(msg))
}

/// One training pair with the graphs of both modalities at the pair's size.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub pair: RegisteredPair,
    pub graph1: VesselGraph,
    pub graph2: VesselGraph,
}

impl TrainingSample {
    /// Graphs from the pair's own masks (empty graph where a mask is absent).
    pub fn from_masks(pair: RegisteredPair) -> Self {
        let (graph1, graph2) = graphs_from_masks(&pair);
        Self { pair, graph1, graph2 }
    }
}

fn graphs_from_masks(pair: &RegisteredPair) -> (VesselGraph, VesselGraph) {
    let g = |m: &Option<crate::image::Mask>| match m {
        Some(m) => extract_graph(&skeletonize(m)),
        None => VesselGraph::empty(pair.size()),
    };
    (g(&pair.mask1), g(&pair.mask2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Everything needed to resume or run a model.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointState {
    pub config: TrainConfig,
    pub stage: Stage,
    pub variant: Variant,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
}

impl CheckpointState {
    /// Fresh weights for stage one.
    pub fn initial(config: &TrainConfig, variant: Variant) -> Result<Self, TrainError> {
        let config = config.effective();
        config.validate()?;
        let (_, params) = TaGat::init::<f32>(&config.model(), config.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self { config, stage: Stage::One, variant, epoch: 0, params, adam })
    }

    /// Hands a finished stage-one state to stage two: fusion layers are
    /// re-drawn, optimiser moments and the epoch counter reset.
    pub fn into_stage2(mut self) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0002);
        self.params.reinitialize_prefix(FUSION_PREFIX, &mut rng);
        self.adam = AdamState::new(&self.params);
        self.stage = Stage::Two;
        self.epoch = 0;
        self
    }

    pub fn model(&self) -> Result<TaGat, TrainError> {
        let (model, fresh) = TaGat::structure::<f32>(&self.config.model())?;
        let same = fresh.len() == self.params.len()
            && fresh.entries().iter().zip(self.params.entries()).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(TrainError::Incompatible);
        }
        Ok(model)
    }
}

/// One optimisation step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub variant: String,
    pub epoch: usize,
    /// 1-based step index within the stage.
    pub step: usize,
    pub pair: String,
    pub lr: f64,
    pub loss: LossReport,
}

fn adam_update(state: &mut CheckpointState, grads: &crate::autograd::Gradients<f32>, lr: f64) {
    let cfg = &state.config;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    state.adam.step += 1;
    let t = state.adam.step as f64;
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    let step = (lr * libm::sqrt(c2) / c1) as f32;
    let (b1, b2, eps) = (b1 as f32, b2 as f32, (eps * libm::sqrt(c2)) as f32);
    let ids: Vec<_> = state.params.ids().collect();
    for id in ids {
        let Some(g) = grads.param(id) else { continue };
        let i = id.index();
        let m = state.adam.m[i].data_mut();
        let v = state.adam.v[i].data_mut();
        let p = state.params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            p[k] -= step * m[k] / (libm::sqrtf(v[k]) + eps);
        }
    }
}

/// Forward, loss and gradient for one pair. Returns the report and the
/// gradients without touching the weights.
pub fn loss_and_gradients(
    model: &TaGat,
    state: &CheckpointState,
    sample: &TrainingSample,
) -> Result<(LossReport, crate::autograd::Gradients<f32>), LossError> {
    let mut tape = Tape::<f32>::new();
    let i1 = tape.constant(sample.pair.image1.to_tensor());
    let i2 = tape.constant(sample.pair.image2.to_tensor());
    let w = &state.config.weights;
    let v = state.variant;
    let (root, report) = match state.stage {
        Stage::One => {
            let out = model.stage1_forward(&mut tape, &state.params, i1, i2, &sample.graph1, &sample.graph2, v);
            let parts = stage1_parts(&mut tape, &out, i1, i2, w, v);
            let values = crate::losses::Stage1Parts {
                recon1: scalar_of(&tape, parts.recon1),
                recon2: scalar_of(&tape, parts.recon2),
                decomp: scalar_of(&tape, parts.decomp),
                graph: parts.graph.map(|g| scalar_of(&tape, g)),
            };
            let report = total_stage1(&values, w)?;
            (stage1_objective(&mut tape, &parts, w), report)
        }
        Stage::Two => {
            let out = model.stage2_forward(&mut tape, &state.params, i1, i2, &sample.graph1, &sample.graph2, v);
            let parts = stage2_parts(&mut tape, &out, i1, i2, w, v);
            let values = crate::losses::Stage2Parts {
                intensity: scalar_of(&tape, parts.intensity),
                graph: parts.graph.map(|g| scalar_of(&tape, g)),
                gradient: scalar_of(&tape, parts.gradient),
                decomp: scalar_of(&tape, parts.decomp),
            };
            let report = total_stage2(&values, w)?;
            (stage2_objective(&mut tape, &parts, w), report)
        }
    };
    let grads = tape.backward(root);
    Ok((report, grads))
}

fn augmented(sample: &TrainingSample, rng: &mut ChaCha8Rng) -> TrainingSample {
    let spec = AugmentationSpec::sample(rng);
    let pair = augment(&sample.pair, &spec);
    if pair.mask1.is_none() && pair.mask2.is_none() {
        // graphs come from elsewhere and cannot follow the transform
        return sample.clone();
    }
    TrainingSample::from_masks(pair)
}

/// Runs the remaining epochs of `state.stage`, calling `log` after every step.
/// Pair order is shuffled per epoch from the seed, so runs are reproducible.
pub fn train_stage(
    mut state: CheckpointState,
    samples: &[TrainingSample],
    mut log: impl FnMut(&StepRecord),
) -> Result<CheckpointState, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let want = state.config.input_size;
    for s in samples {
        if s.pair.size() != want || s.graph1.image_size != want || s.graph2.image_size != want {
            return Err(TrainError::Size { id: s.pair.id.clone(), got: s.pair.size(), want });
        }
    }
    let model = state.model()?;
    let epochs = state.config.epochs(state.stage);
    let stage = state.stage.number();
    let mut step = state.epoch * samples.len();
    while state.epoch < epochs {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ ((stage as u64) << 32) ^ epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let lr = state.config.lr_at(epoch);
        for &i in &order {
            step += 1;
            let sample =
                if state.config.augment { augmented(&samples[i], &mut rng) } else { samples[i].clone() };
            let (report, grads) = match loss_and_gradients(&model, &state, &sample) {
                Ok(r) => r,
                Err(source) => {
                    return Err(TrainError::NonFinite { stage, step, source, last_good: Box::new(state) })
                }
            };
            if let Some(bad) = state.params.ids().find(|&id| grads.param(id).is_some_and(|g| !g.is_finite())) {
                let name: String = state.params.name(bad).into();
                return Err(TrainError::NonFinite {
                    stage,
                    step,
                    source: LossError::NonFinite(alloc::format!("gradient of {name}"), f64::NAN),
                    last_good: Box::new(state),
                });
            }
            adam_update(&mut state, &grads, lr);
            log(&StepRecord {
                stage,
                variant: state.variant.id().into(),
                epoch,
                step,
                pair: sample.pair.id.clone(),
                lr,
                loss: report,
            });
        }
        state.epoch += 1;
    }
    Ok(state)
}

/// Stage-one reconstructions of both images.
pub fn reconstruct(model: &TaGat, state: &CheckpointState, sample: &TrainingSample) -> (Plane, Plane) {
    let mut tape = Tape::<f32>::new();
    let i1 = tape.constant(sample.pair.image1.to_tensor());
    let i2 = tape.constant(sample.pair.image2.to_tensor());
    let out = model.stage1_forward(&mut tape, &state.params, i1, i2, &sample.graph1, &sample.graph2, state.variant);
    (Plane::from_tensor(tape.value(out.recon1)), Plane::from_tensor(tape.value(out.recon2)))
}

/// Fused image of one pair (a single forward pass, weights untouched).
pub fn fuse_sample(model: &TaGat, state: &CheckpointState, sample: &TrainingSample) -> Plane {
    let mut tape = Tape::<f32>::new();
    let i1 = tape.constant(sample.pair.image1.to_tensor());
    let i2 = tape.constant(sample.pair.image2.to_tensor());
    let out = model.stage2_forward(&mut tape, &state.params, i1, i2, &sample.graph1, &sample.graph2, state.variant);
    Plane::from_tensor(tape.value(out.fused))
}
