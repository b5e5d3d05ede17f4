use std::fs;

use pertvae::data::load_dataset;
use pertvae::experiment::{
    collect_reports, load_split, run_experiment, seed_dir, summarize, ExperimentConfig, GRAPH_JSON,
    SUMMARY_CSV,
};
use pertvae::model::ModelConfig;
use pertvae::structure::import_graph_json;
use pertvae::synth::{generate, load_ground_truth, write_synthetic, SynthConfig};
use pertvae::trainer::{resume, train, Checkpoint, TrainConfig, TrainOptions, CHECKPOINT_FILE};

fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        x_dim: 12,
        d_nu: 2,
        d_iota: 2,
        n_envs: 6,
        n_train: 150,
        n_test: 60,
        mixing_layers: 1,
        hard_interventions: 2,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_synth(5);
    let (train, test, gt) = generate(&cfg).unwrap();
    write_synthetic(dir.path(), &cfg, &train, &test, &gt).unwrap();

    let loaded = load_dataset(&dir.path().join("train")).unwrap();
    let original = train.to_perturb_dataset(cfg.n_envs);
    assert_eq!(loaded.x, original.x);
    assert_eq!(loaded.env, original.env);
    assert_eq!(loaded.conditions, original.conditions);
    assert_eq!(load_ground_truth(&dir.path().join("test")).unwrap(), gt);

    let split = load_split(dir.path()).unwrap();
    assert_eq!(split.train.n_rows(), cfg.n_train);
    assert_eq!(split.test.n_rows(), cfg.n_test);
    assert_eq!(split.input_hash.len(), 64);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (train_ds, _, _) = generate(&tiny_synth(2)).unwrap();
    let ds = train_ds.to_perturb_dataset(6);
    let model_cfg = ModelConfig {
        x_dim: 12,
        d_nu: 2,
        d_iota: 2,
        u_dim: ds.u_dim,
        hidden_dim: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        seed: 9,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (live, saved) = (
        dir.path().join(CHECKPOINT_FILE),
        dir.path().join("epoch2.json"),
    );
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        on_epoch: Some(Box::new(|r| {
            if r.epoch == 3 {
                fs::copy(&live, &saved).unwrap();
            }
        })),
    };
    let full = train(&ds, &model_cfg, &cfg, opts).unwrap();

    let ck = Checkpoint::load(&saved).unwrap();
    assert_eq!(ck.epoch, 2);
    let resumed = resume(&ds, ck, TrainOptions::default()).unwrap();

    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.history, full.history);
}

#[test]
fn experiment_outputs_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        synth: Some(tiny_synth(0)),
        out_dir: dir.path().to_path_buf(),
        seeds: vec![1, 2],
        ..ExperimentConfig::default()
    };
    cfg.model.d_nu = 2;
    cfg.model.d_iota = 2;
    cfg.model.hidden_dim = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    let outcome = run_experiment(&cfg, None).unwrap();

    let reloaded = collect_reports(dir.path()).unwrap();
    assert_eq!(reloaded, outcome.reports);
    let summary = summarize(&reloaded);
    assert_eq!(summary.seeds, vec![1, 2]);
    let csv = fs::read_to_string(dir.path().join(SUMMARY_CSV)).unwrap();
    assert_eq!(csv, summary.to_csv().unwrap());

    let doc =
        import_graph_json(&fs::read_to_string(seed_dir(dir.path(), 1).join(GRAPH_JSON)).unwrap())
            .unwrap();
    assert_eq!(doc.labels.len(), 2);
    assert_eq!(doc.graph.adjacency.dim(), (2, 2));
}
