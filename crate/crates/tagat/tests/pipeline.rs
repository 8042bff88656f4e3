use tagat::checkpoint::{self, CheckpointError};
use tagat::pipeline::{self, average_fusion, par_map, prepare_sample, synthetic_dataset, synthetic_pairs};
use tagat_core::config::{DecoderConfig, EncoderConfig, TaeConfig};
use tagat_core::metrics::MetricConfig;
use tagat_core::model::Variant;
use tagat_core::train::{CheckpointState, Stage, StepRecord, TrainConfig};

/// A very small architecture so a whole run takes well under a second.
fn tiny_config() -> TrainConfig {
    TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 2,
        lr: 1e-3,
        input_size: (24, 28),
        encoder: EncoderConfig { embed_dim: 4, restormer_blocks: 1, attention_heads: 2, lt_blocks: 1, inn_blocks: 1, ffn_expansion: 2.0 },
        tae: TaeConfig { reduce_dim: 4, node_dim: 4, giu_layers: 1, giu_heads: 2, head_dim: 4, patch_size: 7, ..TaeConfig::default() },
        decoder: DecoderConfig { restormer_blocks: 1, attention_heads: 2 },
        augment: false,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn trained(variant: Variant) -> (CheckpointState, Vec<StepRecord>) {
    let cfg = tiny_config();
    let data = synthetic_dataset(3, cfg.input_size, 0);
    let mut log = Vec::new();
    let state = pipeline::train_both(&data, &cfg, variant, |r| log.push(r.clone())).unwrap();
    (state, log)
}

#[test]
fn checkpoint_bytes_survive_save_load_save() {
    let (state, _) = trained(Variant::Full);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    checkpoint::save(&path, &state).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, state);
    let again = dir.path().join("d.ckpt");
    checkpoint::save(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(&std::fs::read(&path).unwrap()[..8], b"TAGATCK1");
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let state = CheckpointState::initial(&tiny_config(), Variant::II).unwrap();
    let bytes = checkpoint::encode(&state);
    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 4]), Err(CheckpointError::Layout(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(checkpoint::decode(&extra), Err(CheckpointError::Layout(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(checkpoint::decode(&magic), Err(CheckpointError::Magic)));

    let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = &text[..header_len];
    let swap = |from: &str, to: &str| {
        let h = header.replacen(from, to, 1);
        let mut b = b"TAGATCK1".to_vec();
        b.extend((h.len() as u64).to_le_bytes());
        b.extend(h.as_bytes());
        b.extend(&bytes[16 + header_len..]);
        checkpoint::decode(&b)
    };
    assert!(matches!(swap("\"version\":1", "\"version\":7"), Err(CheckpointError::Version(7))));
    assert!(matches!(swap("\"seed\":3", "\"seed\":4"), Err(CheckpointError::Fingerprint { .. })));
}

#[test]
fn fingerprint_follows_the_config() {
    let a = tiny_config();
    let b = TrainConfig { seed: 4, ..tiny_config() };
    assert_eq!(checkpoint::config_fingerprint(&a), checkpoint::config_fingerprint(&a.clone()));
    assert_ne!(checkpoint::config_fingerprint(&a), checkpoint::config_fingerprint(&b));
    assert_eq!(checkpoint::config_fingerprint(&a).len(), 64);
}

#[test]
fn stage_two_refuses_a_stage_two_start() {
    let (state, _) = trained(Variant::Full);
    assert_eq!(state.stage, Stage::Two);
    let data = synthetic_dataset(1, tiny_config().input_size, 0);
    assert!(matches!(pipeline::train_stage2(&data, state, |_| {}), Err(pipeline::PipelineError::NotStageOne(2))));
}

#[test]
fn runs_repeat_exactly_and_log_every_step() {
    let (a, la) = trained(Variant::Full);
    let (b, lb) = trained(Variant::Full);
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
    assert_eq!(la.len(), 2 * 2 * 3);
    assert_eq!(la.iter().filter(|r| r.stage == 1).count(), 6);
    assert!(la.iter().all(|r| r.variant == "full"));
}

#[test]
fn fusion_is_bounded_repeatable_and_resized_back() {
    let (state, _) = trained(Variant::Full);
    let pair = &synthetic_pairs(1, (30, 33), 9)[0];
    let cfg = MetricConfig::default();
    let a = pipeline::fuse(&state, pair, &cfg).unwrap();
    let b = pipeline::fuse(&state, pair, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fused.size(), (30, 33));
    assert!(a.fused.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.report.values().iter().all(|v| v.is_finite()));
}

#[test]
fn empty_masks_still_fuse() {
    let (state, _) = trained(Variant::Full);
    let mut pair = synthetic_pairs(1, (24, 28), 5).remove(0);
    let empty = tagat_core::image::Mask::empty(24, 28);
    pair.mask1 = Some(empty.clone());
    pair.mask2 = Some(empty);
    let sample = prepare_sample(&pair, (24, 28), None).unwrap();
    assert!(sample.graph1.is_empty() && sample.graph2.is_empty());
    let out = pipeline::fuse(&state, &pair, &MetricConfig::default()).unwrap();
    assert!(out.fused.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn graph_free_variant_trains_and_logs_its_id() {
    let (_, log) = trained(Variant::IV);
    assert!(log.iter().all(|r| r.variant == "IV" && !r.loss.terms.contains_key("graph")));
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let cfg = tiny_config();
    let train = synthetic_dataset(2, cfg.input_size, 0);
    let eval = synthetic_dataset(2, cfg.input_size, 100);
    let mut variants = vec![Variant::Full];
    variants.extend(Variant::ABLATIONS);
    let rows = pipeline::run_ablation(&train, &eval, &cfg, &variants, &MetricConfig::default(), 2, |_| {}).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().map(|r| r.variant).collect::<Vec<_>>(), variants);
    // thread count does not change the numbers
    let serial = pipeline::run_ablation(&train, &eval, &cfg, &variants[..2], &MetricConfig::default(), 1, |_| {}).unwrap();
    assert_eq!(serial[..], rows[..2]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    pipeline::write_ablation_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("variant,description,SD,MI,VIF,SSIM"));
}

#[test]
fn metrics_csv_ends_with_the_mean_row() {
    let pairs = synthetic_pairs(3, (20, 20), 0);
    let triples: Vec<_> =
        pairs.iter().map(|p| (average_fusion(p).quantize(), p.image1.quantize(), p.image2.quantize())).collect();
    let reports = pipeline::evaluate(&triples, &MetricConfig::default());
    let serial: Vec<_> =
        triples.iter().map(|(f, a, b)| tagat_core::metrics::evaluate_pair(f, a, b, &MetricConfig::default())).collect();
    assert_eq!(reports, serial);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    pipeline::write_metrics_csv(&path, &ids, &reports).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["pair", "EN", "SD", "SF", "MI", "SCD", "VIF", "QABF", "SSIM"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "mean");
    let mean_en: f64 = rows[3][1].parse().unwrap();
    let want = reports.iter().map(|r| r.en).sum::<f64>() / 3.0;
    assert!((mean_en - want).abs() < 1e-6);
}

#[test]
fn par_map_keeps_order() {
    let v: Vec<u32> = (0..37).collect();
    for w in [1, 2, 5, 64] {
        assert_eq!(par_map(&v, w, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
    assert!(par_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
}
