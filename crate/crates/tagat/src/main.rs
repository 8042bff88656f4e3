use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tagat::checkpoint;
use tagat::formats::{self, GraphCache, JsonlWriter, PairRecord};
use tagat::io::{load_gray8, load_luma, load_mask, load_pair, output_chroma, save_mask, save_plane};
use tagat::pipeline::{self, evaluate, run_ablation, worker_count, write_ablation_csv, write_metrics_csv};
use tagat_core::metrics::MetricConfig;
use tagat_core::model::Variant;
use tagat_core::train::{StepRecord, TrainConfig, TrainingSample};
use tagat_core::vessel::{graph_from_image, RidgeFilter, Segmenter};

#[derive(Parser)]
#[command(name = "tagat", version, about = "Topology-aware graph attention fusion of retinal image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the vessel graph of one image.
    GraphExtract {
        #[arg(long)]
        image: PathBuf,
        /// Binary vessel mask; the built-in ridge filter is used without one.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Stage-one checkpoint to start stage two from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        /// Step log (one JSON record per line).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fuse one registered pair.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 2, value_names = ["IMAGE1", "IMAGE2"])]
        pair: Vec<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["MASK1", "MASK2"])]
        masks: Option<Vec<PathBuf>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused images `<dir>/<id>.png` against the manifest's sources.
    Evaluate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the full model and the listed ablations.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "I,II,III,IV,V")]
        variants: Vec<Variant>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Synthetic pairs held out for scoring when training on synthetic data.
        #[arg(long, default_value_t = 4)]
        eval_pairs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write synthetic pairs, masks and a manifest.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 80)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a config file with every field at its default.
    InitConfig {
        #[arg(long)]
        toy: bool,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset manifest (one JSON record per pair).
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Train on this many generated pairs instead of a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
}

impl DataArgs {
    fn load(&self, config: &TrainConfig) -> Result<Vec<TrainingSample>> {
        let size = config.input_size;
        match (&self.manifest, self.synthetic) {
            (Some(m), _) => {
                let records = formats::read_manifest(m)?;
                let cache = GraphCache::new(m.with_file_name("graphs"))?;
                Ok(pipeline::load_dataset(&records, size, Some(&cache))?)
            }
            (None, Some(n)) => Ok(pipeline::synthetic_dataset(n, size, config.seed)),
            (None, None) => bail!("give --manifest or --synthetic"),
        }
    }
}

fn step_logger(path: Option<&Path>) -> Result<impl FnMut(&StepRecord)> {
    let mut writer = path.map(JsonlWriter::create).transpose()?;
    Ok(move |r: &StepRecord| {
        if r.step == 1 || r.step % 20 == 0 {
            log::info!("stage {} [{}] step {} loss {:.5}", r.stage, r.variant, r.step, r.loss.total);
        }
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.write(r) {
                log::error!("log write failed: {e}");
            }
        }
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GraphExtract { image, mask, out } => {
            let (plane, _) = load_luma(&image)?;
            let graph = match mask {
                Some(m) => graph_from_image(&plane, &Segmenter::External(&load_mask(&m)?)),
                None => graph_from_image(&plane, &Segmenter::Ridge(RidgeFilter::default())),
            };
            formats::write_graph(&out, &graph)?;
            log::info!("{} nodes, {} edges -> {}", graph.node_count(), graph.edge_count(), out.display());
        }
        Command::Train { stage, config, data, init, variant, out, log } => {
            let config = formats::read_config(&config)?.effective();
            let samples = data.load(&config)?;
            let logger = step_logger(log.as_deref())?;
            let state = if stage == 1 {
                pipeline::train_stage1(&samples, &config, variant, logger)?
            } else {
                let init = init.context("stage 2 needs --init <stage-1 checkpoint>")?;
                let s1 = checkpoint::load(&init)?;
                if s1.config.model() != config.model() {
                    bail!("{} was trained with a different architecture", init.display());
                }
                pipeline::train_stage2(&samples, s1, logger)?
            };
            checkpoint::save(&out, &state)?;
            log::info!("checkpoint -> {}", out.display());
        }
        Command::Fuse { ckpt, pair, masks, out } => {
            let state = checkpoint::load(&ckpt)?;
            let (m1, m2) = match &masks {
                Some(m) => (Some(m[0].as_path()), Some(m[1].as_path())),
                None => (None, None),
            };
            let p = load_pair("pair", &pair[0], &pair[1], m1, m2)?;
            let result = pipeline::fuse(&state, &p, &MetricConfig::default())?;
            save_plane(&out, &result.fused, output_chroma(&p))?;
            println!("{}", serde_json::to_string(&result.report)?);
        }
        Command::Evaluate { dir, manifest, out } => {
            let records: Vec<PairRecord> = formats::read_manifest(&manifest)?;
            let triples = records
                .iter()
                .map(|r| Ok((load_gray8(&dir.join(format!("{}.png", r.id)))?, load_gray8(&r.image1)?, load_gray8(&r.image2)?)))
                .collect::<Result<Vec<_>>>()?;
            let reports = evaluate(&triples, &MetricConfig::default());
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            write_metrics_csv(&out, &ids, &reports)?;
        }
        Command::Ablate { variants, config, data, eval_pairs, out, log } => {
            let config = match config {
                Some(c) => formats::read_config(&c)?,
                None => TrainConfig::toy(),
            }
            .effective();
            let mut all = vec![Variant::Full];
            all.extend(variants.into_iter().filter(|v| *v != Variant::Full));
            let train = data.load(&config)?;
            let eval = match data.manifest {
                Some(_) => train.clone(),
                None => pipeline::synthetic_dataset(eval_pairs, config.input_size, config.seed + 1_000_000),
            };
            let writer = std::sync::Mutex::new(log.as_deref().map(JsonlWriter::create).transpose()?);
            let rows = run_ablation(&train, &eval, &config, &all, &MetricConfig::default(), worker_count(), |r| {
                if let Some(w) = writer.lock().unwrap().as_mut() {
                    let _ = w.write(r);
                }
            })?;
            for r in &rows {
                let c = r.columns();
                println!("{:>4}  SD {:8.3}  MI {:6.3}  VIF {:6.3}  SSIM {:6.3}  {}", r.variant.id(), c[0], c[1], c[2], c[3], r.description);
            }
            write_ablation_csv(&out, &rows)?;
        }
        Command::Synth { count, height, width, seed, out } => {
            fs::create_dir_all(&out)?;
            let mut records = Vec::new();
            for p in pipeline::synthetic_pairs(count, (height, width), seed) {
                let name = |s: &str| PathBuf::from(format!("{}_{s}.png", p.id));
                save_plane(&out.join(name("a")), &p.image1, None)?;
                save_plane(&out.join(name("b")), &p.image2, None)?;
                save_mask(&out.join(name("mask")), p.mask1.as_ref().expect("synthetic masks"))?;
                records.push(PairRecord {
                    id: p.id.clone(),
                    image1: name("a"),
                    image2: name("b"),
                    mask1: Some(name("mask")),
                    mask2: Some(name("mask")),
                });
            }
            formats::write_jsonl(&out.join("manifest.jsonl"), &records)?;
            log::info!("{count} pairs -> {}", out.display());
        }
        Command::InitConfig { toy } => {
            let c = if toy { TrainConfig { toy_mode: true, ..TrainConfig::default() } } else { TrainConfig::default() };
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(())
}
