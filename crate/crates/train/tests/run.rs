use std::fs;
use std::path::Path;

use cbff_core::TrainConfig;
use cbff_data::{synth_generate, DatasetManifest, SynthSpec};
use cbff_model::{checkpoint, ChangeNet, NetConfig};
use cbff_train::{read_log, run_ablation, run_experiment, ExperimentSpec, Mode};

fn dataset(dir: &Path) {
    let spec = SynthSpec {
        n_val: 4,
        n_test: 4,
        ..SynthSpec::new(24, 32, 3)
    };
    synth_generate(&spec, dir, 1).unwrap();
}

fn spec(data: &Path, out: &Path, mode: Mode) -> ExperimentSpec {
    ExperimentSpec {
        config: TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 42,
            ..TrainConfig::toy()
        },
        data_root: data.to_path_buf(),
        partition_ratio: 0.25,
        partition_file: None,
        out_dir: out.to_path_buf(),
        mode,
        checkpoint_every: 1,
        workers: 0,
    }
}

#[test]
fn run_writes_every_artifact_and_repeats_exactly() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path());
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let s1 = run_experiment(&spec(data.path(), out1.path(), Mode::Semi)).unwrap();
    let s2 = run_experiment(&spec(data.path(), out2.path(), Mode::Semi)).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.iterations, 2 * 3);
    for f in ["metrics.csv", "eval.csv", "partition.txt", "summary.json"] {
        assert_eq!(fs::read(out1.path().join(f)).unwrap(), fs::read(out2.path().join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(out1.path().join("metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,iter,l_sup,l_con,total,pseudo_positive_rate,lr\n"));
    let part = fs::read_to_string(out1.path().join("partition.txt")).unwrap();
    assert_eq!(part.lines().filter(|l| l.starts_with("pair_")).count(), 16);

    for ck in ["epoch_1", "epoch_2", "best", "last"] {
        let path = out1.path().join("checkpoints").join(format!("{ck}.ckpt"));
        let cfg = NetConfig::from(&TrainConfig::toy());
        let (_, mut store) = ChangeNet::new::<f32>(&cfg, 0);
        checkpoint::load(&path, &mut store, &cfg).unwrap();
    }
    assert!(s1.val.is_some() && s1.test.is_some());
    assert!((0.0..=100.0).contains(&s1.train.iou));
}

#[test]
fn sup_only_logs_zero_consistency() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path());
    let out = tempfile::tempdir().unwrap();
    run_experiment(&spec(data.path(), out.path(), Mode::SupOnly)).unwrap();
    let log = read_log(&out.path().join("metrics.csv")).unwrap();
    assert!(!log.is_empty());
    assert!(log.iter().all(|r| r.l_con == 0.0 && r.total == 0.5 * r.l_sup));
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["lambda2"], 0.0);
}

#[test]
fn divergence_leaves_a_finite_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path());
    let out = tempfile::tempdir().unwrap();
    let mut s = spec(data.path(), out.path(), Mode::Semi);
    s.config.lr = 1e30;
    s.config.epochs = 5;
    let err = run_experiment(&s).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    let cfg = NetConfig::from(&s.config);
    let (_, mut store) = ChangeNet::new::<f32>(&cfg, 0);
    checkpoint::load(&out.path().join("checkpoints/last.ckpt"), &mut store, &cfg).unwrap();
    assert!(store.params.iter().all(|p| p.value.is_finite()));
}

#[test]
fn ablation_runs_four_rows_on_one_partition() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path());
    let out = tempfile::tempdir().unwrap();
    let mut base = spec(data.path(), out.path(), Mode::Semi);
    base.config.epochs = 1;
    base.checkpoint_every = 0;
    let report = run_ablation(&base, &[0.25]).unwrap();
    let methods: Vec<&str> = report.table.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["sup_only", "cnn", "trans", "cbff"]);
    let parts: Vec<String> = report
        .runs
        .iter()
        .map(|r| fs::read_to_string(out.path().join(format!("{}_25pct/partition.txt", r.method))).unwrap())
        .collect();
    assert!(parts.iter().all(|p| p == &parts[0]));
    let text = fs::read_to_string(out.path().join("results.txt")).unwrap();
    assert!(text.contains("25%") && text.contains("cbff"));
    let csv = fs::read_to_string(out.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let m = DatasetManifest::load(data.path()).unwrap();
    assert_eq!(m.records.len(), 24);
}
