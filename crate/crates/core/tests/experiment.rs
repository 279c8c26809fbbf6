use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlc_core::data::{generate, split, DataKind, SplitFractions};
use tlc_core::experiment::{
    execute, iteration_checkpoint_file, metrics_json, run_experiment, DatasetSpec, ExperimentConfig, ExperimentReport, REPORT_FILE,
    RESOLVED_CONFIG_FILE,
};
use tlc_core::pipeline::Termination;
use tlc_core::store::{decode_checkpoint, encode_checkpoint, CheckpointMetadata};
use tlc_core::{evaluate, load_checkpoint, tlc_run, train_model, ActivationKind, NetSpec, SequentialNet, TlcConfig, TrainSchedule};

const SMALL: &str = r#"
seed = 3

[dataset]
source = "generated"
kind = "moons"
n = 600
classes = 2
noise = 0.15

[network]
hidden = [32, 32, 32, 32]
activation = "relu"

[schedule]
epochs = 10
batch_size = 32
learning_rate = 0.05
momentum = 0.9
weight_decay = 1e-2
milestones = [7]
drop_factor = 0.1

[tlc]
theta = 0.97
retrain = { finetune = { epochs = 3 } }

[report]
kl_comparisons = true
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

#[test]
fn blobs_train_to_high_accuracy() {
    // Data seed fixed by a pilot run.
    let data = generate(DataKind::Blobs, 500, 2, 0.5, 2).unwrap();
    let splits = split(&data, SplitFractions::default(), 2).unwrap();
    let spec = NetSpec::mlp(2, vec![16], 2, ActivationKind::Relu);
    let net = SequentialNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let schedule = TrainSchedule {
        epochs: 20,
        milestones: vec![15],
        ..TrainSchedule::default()
    };
    let (trained, history) = train_model(&net, &splits.train, Some(&splits.val), &schedule).unwrap();
    assert_eq!(history.epochs.len(), 20);
    let acc = evaluate(&trained, &splits.val).unwrap().accuracy;
    assert!(acc >= 0.99, "val accuracy {acc}");
}

#[test]
fn threshold_above_one_returns_dense_model() {
    let mut config = small();
    config.tlc.theta = 1.1;
    let out = execute(&config).unwrap();
    let m = &out.report.metrics;
    assert!(m.compression.removed_layers.is_empty());
    assert_eq!(m.compression.termination, Termination::ThresholdUnsatisfiable);
    assert_eq!(m.final_model, m.dense);
    assert_eq!(out.compressed, out.dense);
}

#[test]
fn run_guarantees_hold() {
    let out = execute(&small()).unwrap();
    let c = &out.report.metrics.compression;
    assert!(c.final_val_accuracy >= c.threshold);
    assert!(c.iterations.len() <= 4);
    for it in &c.iterations {
        assert!(!it.removals.is_empty());
        assert!(it.removals[..it.removals.len() - 1].iter().all(|s| s.improved_or_equal));
    }
    assert_eq!(out.compressed.depth(), 4 - c.removed_layers.len());
    assert_eq!(evaluate(&out.compressed, &out.splits.val).unwrap().accuracy, c.final_val_accuracy);
    assert_eq!(c.kl_comparisons.len() % 3, 0);
}

#[test]
fn tlc_run_is_pure_and_rejects_bad_config() {
    let data = generate(DataKind::Moons, 300, 2, 0.1, 4).unwrap();
    let splits = split(&data, SplitFractions::default(), 4).unwrap();
    let net = SequentialNet::new(&NetSpec::mlp(2, vec![8, 8], 2, ActivationKind::Relu), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let mut cfg = TlcConfig::new(0.9, TrainSchedule { epochs: 2, milestones: vec![], ..TrainSchedule::default() }, 0);
    let before = net.clone();
    tlc_run(&net, &splits, &cfg).unwrap();
    assert_eq!(net, before);
    cfg.theta = -1.0;
    assert!(tlc_run(&net, &splits, &cfg).is_err());
}

#[test]
fn reports_are_reproducible_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&small(), &a).unwrap();
    let resolved = ExperimentConfig::load(&a.join(RESOLVED_CONFIG_FILE)).unwrap();
    run_experiment(&resolved, &b).unwrap();

    let read = |p: PathBuf| -> ExperimentReport { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let (ra, rb) = (read(a.join(REPORT_FILE)), read(b.join(REPORT_FILE)));
    assert_eq!(ra.schema_version, 1);
    assert_eq!(metrics_json(&ra).unwrap(), metrics_json(&rb).unwrap());
    assert_eq!(ra.config, rb.config);
    assert_eq!(ra.seeds, rb.seeds);
    for f in ["dense.tlck", "final.tlck"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let (dense, meta) = load_checkpoint(&a.join("dense.tlck")).unwrap();
    assert_eq!(dense.depth(), 4);
    assert_eq!(meta.seed, Some(3));
}

#[test]
fn iteration_checkpoints_track_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small();
    config.report.checkpoints = true;
    let out = run_experiment(&config, dir.path()).unwrap();
    let iterations = &out.report.metrics.compression.iterations;
    assert_eq!(out.iteration_models.len(), iterations.len());
    assert!(!dir.path().join(iteration_checkpoint_file(iterations.len())).exists());
    let mut last_accepted = None;
    for (i, it) in iterations.iter().enumerate() {
        let (model, _) = load_checkpoint(&dir.path().join(iteration_checkpoint_file(i))).unwrap();
        assert_eq!(model, out.iteration_models[i]);
        assert_eq!(evaluate(&model, &out.splits.val).unwrap().accuracy, it.post_retrain_val_accuracy);
        if it.accepted {
            last_accepted = Some(model);
        }
    }
    assert_eq!(last_accepted.as_ref().unwrap_or(&out.dense), &out.compressed);

    let plain = execute(&small()).unwrap();
    assert!(plain.iteration_models.is_empty());
    assert_eq!(metrics_json(&plain.report).unwrap(), metrics_json(&out.report).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let out = execute(&small()).unwrap();
    for model in [&out.dense, &out.compressed] {
        let bytes = encode_checkpoint(model, &CheckpointMetadata::default()).unwrap();
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(&back, model);
        assert_eq!(encode_checkpoint(&back, &CheckpointMetadata::default()).unwrap(), bytes);
    }
}

#[test]
fn errors_carry_stage_context() {
    let mut config = small();
    config.dataset = DatasetSpec::Csv {
        path: PathBuf::from("/nonexistent/data.csv"),
        has_header: true,
        label_column: None,
    };
    let err = execute(&config).unwrap_err();
    assert!(err.to_string().contains("loading dataset"), "{err}");

    let mut bad = small();
    bad.schedule.milestones = vec![20];
    assert!(execute(&bad).is_err());
    assert!(ExperimentConfig::from_toml("seed = 1").is_err());
}
