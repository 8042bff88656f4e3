//! Two-stage training, inference, evaluation and the ablation runner.

use std::num::NonZeroUsize;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use tagat_core::data::{generate_synthetic_pair, resize_pair, resize_plane, RegisteredPair, SyntheticSceneSpec};
use tagat_core::image::{Gray8, Mask, Plane};
use tagat_core::metrics::{evaluate_pair, MetricConfig, MetricReport, METRIC_NAMES};
use tagat_core::model::Variant;
use tagat_core::train::{fuse_sample, train_stage, CheckpointState, Stage, StepRecord, TrainConfig, TrainError, TrainingSample};
use tagat_core::vessel::{extract_graph, segment_vessels, skeletonize, RidgeFilter, Segmenter, VesselGraph};

use crate::formats::{FormatError, GraphCache, PairRecord};
use crate::io::{load_pair, IoError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("stage two needs a stage-one checkpoint, got stage {0}")]
    NotStageOne(u8),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Worker threads for data preparation and evaluation.
pub fn worker_count() -> usize {
    thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1)
}

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Vessel mask of one modality: the given one, or the ridge filter's.
fn mask_or_segment(image: &Plane, mask: &Option<Mask>) -> Mask {
    match mask {
        Some(m) => m.clone(),
        None => segment_vessels(image, &Segmenter::Ridge(RidgeFilter::default())),
    }
}

/// Resizes a pair to the training size, fills missing masks by segmentation
/// and extracts both graphs, through `cache` when one is given.
pub fn prepare_sample(
    pair: &RegisteredPair,
    size: (usize, usize),
    cache: Option<&GraphCache>,
) -> Result<TrainingSample, FormatError> {
    let mut pair = if pair.size() == size { pair.clone() } else { resize_pair(pair, size) };
    let m1 = mask_or_segment(&pair.image1, &pair.mask1);
    let m2 = mask_or_segment(&pair.image2, &pair.mask2);
    let build = |m: &Mask| extract_graph(&skeletonize(m));
    let graph = |key: String, m: &Mask| -> Result<VesselGraph, FormatError> {
        match cache {
            Some(c) => c.get_or_build(&key, m, || build(m)),
            None => Ok(build(m)),
        }
    };
    let graph1 = graph(format!("{}.1", pair.id), &m1)?;
    let graph2 = graph(format!("{}.2", pair.id), &m2)?;
    pair.mask1 = Some(m1);
    pair.mask2 = Some(m2);
    Ok(TrainingSample { pair, graph1, graph2 })
}

/// Loads every manifest record and prepares it for training at `size`.
pub fn load_dataset(
    records: &[PairRecord],
    size: (usize, usize),
    cache: Option<&GraphCache>,
) -> Result<Vec<TrainingSample>, PipelineError> {
    par_map(records, worker_count(), |r| -> Result<TrainingSample, PipelineError> {
        let pair = load_pair(&r.id, &r.image1, &r.image2, r.mask1.as_deref(), r.mask2.as_deref())?;
        Ok(prepare_sample(&pair, size, cache)?)
    })
    .into_iter()
    .collect()
}

/// Tree depth of the synthetic scenes used for desk-scale runs.
pub const SYNTHETIC_DEPTH: usize = 3;

/// `count` synthetic pairs with seeds `first_seed..first_seed + count`.
pub fn synthetic_pairs(count: usize, size: (usize, usize), first_seed: u64) -> Vec<RegisteredPair> {
    (0..count as u64)
        .map(|i| {
            let mut p = generate_synthetic_pair(&SyntheticSceneSpec::new(size, SYNTHETIC_DEPTH, first_seed + i))
                .expect("valid synthetic spec");
            p.id = format!("synth{:03}", first_seed + i);
            p
        })
        .collect()
}

pub fn synthetic_dataset(count: usize, size: (usize, usize), first_seed: u64) -> Vec<TrainingSample> {
    synthetic_pairs(count, size, first_seed).into_iter().map(TrainingSample::from_masks).collect()
}

/// Stage one from fresh weights.
pub fn train_stage1(
    samples: &[TrainingSample],
    config: &TrainConfig,
    variant: Variant,
    log: impl FnMut(&StepRecord),
) -> Result<CheckpointState, PipelineError> {
    let state = CheckpointState::initial(config, variant)?;
    Ok(train_stage(state, samples, log)?)
}

/// Stage two from a finished stage-one state; fusion layers start fresh.
pub fn train_stage2(
    samples: &[TrainingSample],
    stage1: CheckpointState,
    log: impl FnMut(&StepRecord),
) -> Result<CheckpointState, PipelineError> {
    if stage1.stage != Stage::One {
        return Err(PipelineError::NotStageOne(stage1.stage.number()));
    }
    Ok(train_stage(stage1.into_stage2(), samples, log)?)
}

/// Both stages back to back, with one log callback for all steps.
pub fn train_both(
    samples: &[TrainingSample],
    config: &TrainConfig,
    variant: Variant,
    mut log: impl FnMut(&StepRecord),
) -> Result<CheckpointState, PipelineError> {
    let s1 = train_stage1(samples, config, variant, &mut log)?;
    train_stage2(samples, s1, &mut log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseOutput {
    /// Fused luminance at the pair's own size.
    pub fused: Plane,
    pub report: MetricReport,
}

/// Fused image of a pair from a stage-two state, with metrics against both
/// sources. The pair is resized to the trained size for the forward pass
/// and the result resized back.
pub fn fuse(state: &CheckpointState, pair: &RegisteredPair, metrics: &MetricConfig) -> Result<FuseOutput, PipelineError> {
    let model = state.model()?;
    let size = state.config.input_size;
    let sample = prepare_sample(pair, size, None)?;
    let fused = fuse_sample(&model, state, &sample).clamp01();
    let fused = if pair.size() == size { fused } else { resize_plane(&fused, pair.size()).clamp01() };
    let report = evaluate_pair(&fused.quantize(), &pair.image1.quantize(), &pair.image2.quantize(), metrics);
    Ok(FuseOutput { fused, report })
}

/// Fuses prepared samples, which must already be at the trained size.
pub fn fuse_samples(state: &CheckpointState, samples: &[TrainingSample]) -> Result<Vec<Plane>, PipelineError> {
    let model = state.model()?;
    Ok(samples.iter().map(|s| fuse_sample(&model, state, s).clamp01()).collect())
}

/// The naive baseline: pixelwise mean of the two sources.
pub fn average_fusion(pair: &RegisteredPair) -> Plane {
    pair.image1.zip_map(&pair.image2, |a, b| 0.5 * (a + b))
}

/// Metrics of `(fused, source1, source2)` triples, in parallel, in order.
pub fn evaluate(triples: &[(Gray8, Gray8, Gray8)], config: &MetricConfig) -> Vec<MetricReport> {
    par_map(triples, worker_count(), |(f, a, b)| evaluate_pair(f, a, b, config))
}

pub fn evaluate_fused(fused: &[Plane], samples: &[TrainingSample], config: &MetricConfig) -> Vec<MetricReport> {
    let triples: Vec<_> = fused
        .iter()
        .zip(samples)
        .map(|(f, s)| (f.quantize(), s.pair.image1.quantize(), s.pair.image2.quantize()))
        .collect();
    evaluate(&triples, config)
}

/// One row per pair plus a final `mean` row, columns in the usual table order.
pub fn write_metrics_csv(path: &Path, ids: &[String], reports: &[MetricReport]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["pair"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    let row = |id: &str, r: &MetricReport| {
        let mut v = vec![id.to_string()];
        v.extend(r.values().iter().map(|x| format!("{x:.6}")));
        v
    };
    for (id, r) in ids.iter().zip(reports) {
        w.write_record(row(id, r))?;
    }
    if let Some(mean) = MetricReport::mean(reports) {
        w.write_record(row("mean", &mean))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Mean metrics of one trained variant over the evaluation pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub metrics: MetricReport,
}

pub const ABLATION_COLUMNS: [&str; 4] = ["SD", "MI", "VIF", "SSIM"];

impl AblationRow {
    pub fn columns(&self) -> [f64; 4] {
        let m = &self.metrics;
        [m.sd, m.mi, m.vif, m.ssim]
    }
}

/// Trains each variant with the same seed on `train` and scores it on
/// `eval`. Variants run concurrently on up to `workers` threads; each run
/// is itself sequential, so the rows do not depend on the thread count.
pub fn run_ablation(
    train: &[TrainingSample],
    eval: &[TrainingSample],
    config: &TrainConfig,
    variants: &[Variant],
    metrics: &MetricConfig,
    workers: usize,
    log: impl Fn(&StepRecord) + Sync,
) -> Result<Vec<AblationRow>, PipelineError> {
    par_map(variants, workers, |&variant| -> Result<AblationRow, PipelineError> {
        let state = train_both(train, config, variant, &log)?;
        let fused = fuse_samples(&state, eval)?;
        let reports = evaluate_fused(&fused, eval, metrics);
        let metrics = MetricReport::mean(&reports).expect("nonempty evaluation set");
        Ok(AblationRow { variant, description: variant.description().into(), metrics })
    })
    .into_iter()
    .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["variant", "description"];
    header.extend(ABLATION_COLUMNS);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.id().to_string(), r.description.clone()];
        rec.extend(r.columns().iter().map(|x| format!("{x:.6}")));
        w.write_record(rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
