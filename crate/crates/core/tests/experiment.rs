use std::fs;
use std::path::Path;

use tracediff_core::eval::experiment::{config_hash, run_experiment_and_sweep, synthesize_to, METRICS_HEADER, SWEEP_HEADER};
use tracediff_core::eval::{run_experiment, ExperimentConfig, Method};
use tracediff_core::Error;

fn tiny(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
[experiment]
seed = 3
output_dir = "{}"

[data]
max_len = 8
simulate = {{ traces = 12 }}

[noise]
sweep = [0.5, 0.6, 3]
sweep_replicates = 2

[model]
levels = 1
base_channels = 4
time_embed_dim = 4
attention_head_dim = 4

[diffusion]
T = 5
beta = [0.01, 0.5]

[train]
epochs = 2
"#,
        dir.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (outcome, rows) = run_experiment_and_sweep(&cfg, |_, _, _| {}).unwrap();
    for name in [
        "config.toml",
        "run.log",
        "flow_matrix.csv",
        "ddtr-model-free.ckpt",
        "ddtr-model-aware.ckpt",
        "loss_history.json",
        "recovered_argmax.csv",
        "recovered_ddtr-model-free.csv",
        "recovered_ddtr-model-aware.csv",
        "metrics.csv",
        "sweep.csv",
    ] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("synthetic,argmax,"));
    let hash = config_hash(&cfg).unwrap();
    assert_eq!(lines[4], format!("# config_sha256={hash},seed=3"));

    assert_eq!(outcome.test.len(), 3);
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.n_traces == 6));
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(sweep.starts_with(SWEEP_HEADER));
    assert!(sweep.contains("0.55,ddtr-model-aware,"));

    let log = fs::read_to_string(dir.path().join("run.log")).unwrap();
    for stage in ["load", "split", "mine", "train", "recover", "evaluate", "sweep"] {
        assert!(log.contains(&format!("stage {stage}: done")), "{log}");
    }
    let resolved = ExperimentConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(config_hash(&resolved).unwrap(), hash);
}

#[test]
fn identical_configs_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = tiny(a.path());
    ca.experiment.methods = vec![Method::Argmax, Method::ModelFree];
    let mut cb = ca.clone();
    cb.experiment.output_dir = b.path().to_path_buf();
    run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    for name in ["metrics.csv", "recovered_ddtr-model-free.csv", "ddtr-model-free.ckpt"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.flow_matrix = Some(dir.path().join("absent.csv"));
    match run_experiment(&cfg) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "mine");
            assert!(matches!(*source, Error::Io { .. }));
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
    let log = fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert!(log.contains("error: stage `mine` failed"));
}

#[test]
fn synthesized_logs_reload_into_the_same_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (dk, sk) = (dir.path().join("dk.csv"), dir.path().join("sk.jsonl"));
    let ds = synthesize_to(&cfg, &dk, &sk).unwrap();
    let mut from_files = cfg.clone();
    from_files.data.dk_log = Some(dk);
    from_files.data.sk_log = Some(sk);
    let reloaded = tracediff_core::eval::experiment::load_dataset(&from_files).unwrap();
    assert_eq!(reloaded.truths(), ds.truths());
    for (x, y) in reloaded.pairs.iter().zip(&ds.pairs) {
        assert_eq!(x.sk, y.sk);
    }
}
