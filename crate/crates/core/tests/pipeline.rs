//! End-to-end runs on a tiny corpus: data and bank files, training, checkpoints,
//! and the three evaluation protocols.

use gridclip::config::ExperimentConfig;
use gridclip::data::{generate_dataset, load_dataset, save_dataset, CategorySplit, DataSplit, Dataset, GenerateParams};
use gridclip::eval::{closed_set_eval, open_set_eval, run_detection, transfer_eval};
use gridclip::model::GridClip;
use gridclip::params::{load_checkpoint, save_checkpoint};
use gridclip::postprocess::{read_detections_jsonl, write_detections_jsonl};
use gridclip::teacher::Teacher;
use gridclip::text_bank::{EmbeddingBank, SyntheticTextEncoder};
use gridclip::train::run_training;

fn tiny() -> Dataset {
    let (manifest, images) = generate_dataset(&GenerateParams::new(3, 6, 160, 1.1)).unwrap();
    Dataset { manifest, images }
}

fn short_config() -> ExperimentConfig {
    ExperimentConfig {
        epochs: 1,
        lr_decay_epochs: vec![],
        warmup_iters: 2,
        batch_size: 4,
        base_lr: 1e-3,
        learnable_tau: true,
        ..ExperimentConfig::default()
    }
}

#[test]
fn dataset_files_round_trip() {
    let data = tiny();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data.manifest, &data.images).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, data.manifest);
    assert_eq!(back.images.len(), data.images.len());
    for (a, b) in back.images.iter().zip(&data.images) {
        assert_eq!((a.id, a.split, &a.boxes, &a.labels), (b.id, b.split, &b.boxes, &b.labels));
        // 8-bit lossless storage
        let worst = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }
}

#[test]
fn train_checkpoint_and_evaluate() {
    let data = tiny();
    let config = short_config();
    let enc = SyntheticTextEncoder::from_config(&config.text, config.embed_dim);
    let bank = enc.bank_for_split(&data.manifest, CategorySplit::Base).unwrap();
    let teacher = Teacher::from_config(&config).unwrap();
    let out = run_training(&config, &data, &bank, &teacher).unwrap();
    assert_eq!(out.trace.len(), data.split(DataSplit::Train).len().div_ceil(4));
    assert!(out.trace.iter().all(|t| t.total.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.bin");
    let meta = serde_json::json!({ "config": config.to_toml_string().unwrap() });
    save_checkpoint(&ckpt, &out.store, meta).unwrap();
    let (store, meta) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(store.content_hash(), out.store.content_hash());
    let cfg = ExperimentConfig::from_toml_str(meta["config"].as_str().unwrap()).unwrap();
    assert_eq!(cfg, config);
    let model = GridClip::bind(&cfg, &store).unwrap();

    let bank_path = dir.path().join("bank.bin");
    bank.save(&bank_path).unwrap();
    let bank = EmbeddingBank::load(&bank_path).unwrap();

    let val = data.split(DataSplit::Val);
    let a = run_detection(&out.model, &out.store, &config, &val, &bank, 0.5).unwrap();
    let b = run_detection(&model, &store, &cfg, &val, &bank, 0.5).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    write_detections_jsonl(&mut buf, &a).unwrap();
    assert_eq!(read_detections_jsonl(&buf[..]).unwrap(), a);

    let closed = closed_set_eval(&model, &store, &cfg, &val, &data.manifest, &bank).unwrap();
    assert_eq!(closed.settings.mode, "closed");
    assert_eq!(closed.num_images, val.len());
    assert!(closed.per_category.values().all(|c| c.split == CategorySplit::Base));

    let novel = data.manifest.names_with_split(CategorySplit::Novel);
    let open = open_set_eval(&model, &store, &cfg, &val, &data.manifest, &bank, &novel, &enc).unwrap();
    assert_eq!(open.settings.mode, if novel.is_empty() { "closed" } else { "open" });
    assert_ne!(open.settings.bank_hash, closed.settings.bank_hash);

    let transfer = transfer_eval(&model, &store, &cfg, &val, &data.manifest, &bank).unwrap();
    assert_eq!(transfer.settings.nms_iou, 0.6);
    assert_eq!(transfer.settings.mode, "transfer");
    let json = transfer.to_json().unwrap();
    assert!(json.contains("\"ap50\"") && json.contains("\"ap75\""));
}

#[test]
fn zero_epochs_leaves_the_initialisation() {
    let data = tiny();
    let config = ExperimentConfig {
        epochs: 0,
        lr_decay_epochs: vec![],
        ..short_config()
    };
    let enc = SyntheticTextEncoder::from_config(&config.text, config.embed_dim);
    let bank = enc.bank_for_split(&data.manifest, CategorySplit::Base).unwrap();
    let out = run_training(&config, &data, &bank, &Teacher::from_config(&config).unwrap()).unwrap();
    assert!(out.trace.is_empty());
    let (_, fresh) = GridClip::init(&config).unwrap();
    assert_eq!(out.store.content_hash(), fresh.content_hash());
}

#[test]
fn bank_dimension_mismatch_is_rejected() {
    let data = tiny();
    let config = short_config();
    let enc = SyntheticTextEncoder::from_config(&config.text, config.embed_dim + 1);
    let bank = enc.bank_for_split(&data.manifest, CategorySplit::Base).unwrap();
    let err = run_training(&config, &data, &bank, &Teacher::from_config(&config).unwrap()).unwrap_err();
    assert!(err.to_string().contains("embed_dim"), "{err}");
}
