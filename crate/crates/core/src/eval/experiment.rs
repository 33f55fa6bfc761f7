use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{derive_seed, ExperimentConfig, Method};
use super::metrics::{argmax_predictions, compute_metrics, trace_accuracy, MetricsReport};
use crate::denoiser::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{make_schedule, recover_all, train_with_progress, NoiseSchedule, TrainReport};
use crate::error::{Error, Result};
use crate::event_log::{
    parse_dk_log, parse_sk_log, save_dk_log, save_sk_log, split_train_test, Alphabet, Dataset, DkTrace, TraceMatrix,
};
use crate::noise_synth::{noise_sweep_levels, synthesize_sk_log, DirichletParams, NoiseProfile};
use crate::process_model::{load_flow_matrix, mine_dfg_flow_matrix, save_flow_matrix, FlowMatrix};
use crate::simulate::ToyProcess;

pub const METRICS_HEADER: &str = "dataset,method,accuracy,precision,recall";
pub const SWEEP_HEADER: &str = "lambda,method,mean_accuracy,std_accuracy,n_traces";

/// Hex SHA-256 of the resolved config, embedded in every report file. The
/// output directory is left out so a rerun elsewhere hashes the same.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut resolved = cfg.resolved();
    resolved.experiment.output_dir = PathBuf::new();
    let text = resolved.to_toml()?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn provenance_line(cfg: &ExperimentConfig) -> Result<String> {
    Ok(format!("# config_sha256={},seed={}", config_hash(cfg)?, cfg.experiment.seed))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Appends progress lines to `run.log` in the output directory.
struct RunLog {
    path: PathBuf,
}

impl RunLog {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.log");
        File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunLog { path })
    }

    fn line(&self, text: &str) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{text}").map_err(|e| Error::io(&self.path, e))
    }
}

/// DK and SK data per the config: loaded from disk or simulated and
/// synthesised.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let (traces, alphabet) = match &d.dk_log {
        Some(path) => parse_dk_log(path)?,
        None => {
            let sim = d.simulate.as_ref().expect("validated config");
            let process = ToyProcess {
                choice_prob: sim.choice_prob,
                loop_prob: sim.loop_prob,
                max_len: d.max_len,
            };
            process.simulate(sim.traces, cfg.simulate_seed())?
        }
    };
    match &d.sk_log {
        Some(path) => {
            let sk = parse_sk_log(path, &alphabet)?;
            Dataset::from_traces(alphabet, d.max_len, &traces, &sk)
        }
        None => synthesize_sk_log(
            &traces,
            &alphabet,
            d.max_len,
            &NoiseProfile::constant(cfg.noise.lambda)?,
            &DirichletParams::uniform(alphabet.len(), cfg.noise.concentration, cfg.noise_seed())?,
        ),
    }
}

pub fn sk_traces(dataset: &Dataset) -> Vec<TraceMatrix> {
    dataset.pairs.iter().map(|p| p.sk.clone()).collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub method: Method,
    pub model: DenoiserModel,
    pub history: TrainReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config_hash: String,
    pub train: Dataset,
    pub test: Dataset,
    pub flow: Option<FlowMatrix>,
    pub schedule: NoiseSchedule,
    pub models: Vec<TrainedModel>,
    pub metrics: Vec<(Method, MetricsReport)>,
}

impl ExperimentOutcome {
    pub fn metrics_for(&self, method: Method) -> Option<&MetricsReport> {
        self.metrics.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }

    pub fn model_for(&self, method: Method) -> Option<&DenoiserModel> {
        self.models.iter().find(|m| m.method == method).map(|m| &m.model)
    }
}

/// Data, split, flow matrix and trained models, the shared front half of
/// `train`, `evaluate` and `sweep`.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub flow: Option<FlowMatrix>,
    pub schedule: NoiseSchedule,
    pub models: Vec<TrainedModel>,
}

fn stage<T>(log: &RunLog, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log.line(&format!("stage {name}: start"))?;
    match f() {
        Ok(v) => {
            log.line(&format!("stage {name}: done"))?;
            Ok(v)
        }
        Err(e) => {
            let e = Error::in_stage(name)(e);
            // best effort: the original error matters more than a logging failure
            let _ = log.line(&format!("error: {e}"));
            Err(e)
        }
    }
}

fn write_histories(dir: &Path, models: &[TrainedModel]) -> Result<()> {
    let map: BTreeMap<&str, &TrainReport> = models.iter().map(|m| (m.method.name(), &m.history)).collect();
    let json = serde_json::to_string_pretty(&map).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&dir.join("loss_history.json"), &json)
}

/// Loads data, splits, mines the flow matrix and trains every DDTR method,
/// writing checkpoints, the flow matrix, loss histories and a config snapshot.
pub fn prepare_and_train(cfg: &ExperimentConfig, mut progress: impl FnMut(Method, usize, f64)) -> Result<Prepared> {
    cfg.validate()?;
    let dir = cfg.experiment.output_dir.clone();
    let log = RunLog::create(&dir)?;
    let resolved = cfg.resolved();
    write_file(&dir.join("config.toml"), &resolved.to_toml()?)?;
    log.line(&format!("config_sha256={} seed={}", config_hash(cfg)?, cfg.experiment.seed))?;

    let dataset = stage(&log, "load", || load_dataset(cfg))?;
    let (train_set, test_set) = stage(&log, "split", || {
        split_train_test(&dataset, cfg.data.train_fraction, cfg.split_seed())
    })?;
    let needs_flow = cfg.experiment.methods.contains(&Method::ModelAware);
    let flow = stage(&log, "mine", || {
        if !needs_flow {
            return Ok(None);
        }
        let f = match &cfg.data.flow_matrix {
            Some(path) => load_flow_matrix(path, &train_set.alphabet)?,
            None => mine_dfg_flow_matrix(&train_set.truths(), &train_set.alphabet)?,
        };
        save_flow_matrix(dir.join("flow_matrix.csv"), &f, &train_set.alphabet)?;
        Ok(Some(f))
    })?;
    let schedule = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta.0, cfg.diffusion.beta.1)
        .map_err(Error::in_stage("train"))?;

    let mut models = Vec::new();
    for &method in &cfg.experiment.methods {
        let Some(variant) = method.variant() else { continue };
        let result = stage(&log, "train", || {
            let mut model = DenoiserModel::new(cfg.denoiser_config(train_set.alphabet.len(), variant))?;
            let flow_arg = flow.as_ref().filter(|_| method == Method::ModelAware);
            let history = train_with_progress(
                &train_set,
                &mut model,
                &schedule,
                flow_arg,
                &cfg.train_config(),
                |e, l| progress(method, e, l),
            )?;
            let meta = CheckpointMeta {
                epochs: cfg.train.epochs,
                loss_history: history.loss.clone(),
                seed: cfg.train_seed(),
                beta: Some(cfg.diffusion.beta),
            };
            save_checkpoint(dir.join(format!("{}.ckpt", method.name())), &model, &train_set.alphabet, &meta)?;
            Ok(TrainedModel { method, model, history })
        });
        match result {
            Ok(m) => models.push(m),
            Err(e) => {
                // keep whatever finished for diagnosis
                let _ = write_histories(&dir, &models);
                return Err(e);
            }
        }
    }
    write_histories(&dir, &models)?;
    Ok(Prepared {
        train: train_set,
        test: test_set,
        flow,
        schedule,
        models,
    })
}

pub fn format_metrics_csv(cfg: &ExperimentConfig, rows: &[(Method, MetricsReport)]) -> Result<String> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (method, m) in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            cfg.experiment.dataset,
            method.name(),
            m.accuracy,
            m.macro_precision,
            m.macro_recall
        ));
    }
    out.push_str(&provenance_line(cfg)?);
    out.push('\n');
    Ok(out)
}

/// The full protocol: load or synthesise, split, mine, train, recover the
/// test split with every method, and write `metrics.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with_progress(cfg, |_, _, _| {})
}

pub fn run_experiment_with_progress(
    cfg: &ExperimentConfig,
    progress: impl FnMut(Method, usize, f64),
) -> Result<ExperimentOutcome> {
    let prepared = prepare_and_train(cfg, progress)?;
    let dir = &cfg.experiment.output_dir;
    let log = RunLog { path: dir.join("run.log") };
    let truths = prepared.test.truths();
    let k = prepared.test.alphabet.len();
    let sk = sk_traces(&prepared.test);

    let predictions = stage(&log, "recover", || {
        let mut out = Vec::new();
        for &method in &cfg.experiment.methods {
            let preds = match method {
                Method::Argmax => argmax_predictions(&prepared.test),
                _ => {
                    let m = prepared
                        .models
                        .iter()
                        .find(|m| m.method == method)
                        .expect("trained above");
                    recover_all(&sk, &m.model, &prepared.schedule, cfg.recover_seed())?
                        .into_iter()
                        .map(|r| r.trace)
                        .collect()
                }
            };
            save_dk_log(dir.join(format!("recovered_{}.csv", method.name())), &preds, &prepared.test.alphabet)?;
            out.push((method, preds));
        }
        Ok(out)
    })?;
    let metrics = stage(&log, "evaluate", || {
        let rows = predictions
            .iter()
            .map(|(m, p)| Ok((*m, compute_metrics(p, &truths, k)?)))
            .collect::<Result<Vec<_>>>()?;
        write_file(&dir.join("metrics.csv"), &format_metrics_csv(cfg, &rows)?)?;
        Ok(rows)
    })?;
    Ok(ExperimentOutcome {
        config_hash: config_hash(cfg)?,
        train: prepared.train,
        test: prepared.test,
        flow: prepared.flow,
        schedule: prepared.schedule,
        models: prepared.models,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub method: Method,
    /// Mean of per-trace accuracies.
    pub mean_accuracy: f64,
    /// Sample standard deviation of per-trace accuracies.
    pub std_accuracy: f64,
    pub n_traces: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Re-noises the held-out DK traces at each level and evaluates every method
/// with the already-trained models. Each held-out trace is synthesised
/// `replicates` times (case ids suffixed `#r`) with independent noise.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    truths: &[DkTrace],
    alphabet: &Alphabet,
    max_len: usize,
    levels: &[NoiseProfile],
    replicates: usize,
    concentration: f64,
    noise_seed: u64,
    models: &[(Method, &DenoiserModel)],
    methods: &[Method],
    schedule: &NoiseSchedule,
    recover_seed: u64,
) -> Result<Vec<SweepRow>> {
    if replicates == 0 {
        return Err(Error::invalid("sweep replicates must be at least 1"));
    }
    let expanded: Vec<DkTrace> = truths
        .iter()
        .flat_map(|t| (0..replicates).map(move |r| DkTrace::new(format!("{}#{r}", t.case_id), t.activities.clone())))
        .collect();
    let mut rows = Vec::new();
    for (i, level) in levels.iter().enumerate() {
        let lambda = level.lambda_at(0);
        let params = DirichletParams::uniform(alphabet.len(), concentration, derive_seed(noise_seed, &format!("sweep-{i}")))?;
        let ds = synthesize_sk_log(&expanded, alphabet, max_len, level, &params)?;
        let sk = sk_traces(&ds);
        for &method in methods {
            let preds: Vec<DkTrace> = match method {
                Method::Argmax => argmax_predictions(&ds),
                _ => {
                    let model = models
                        .iter()
                        .find(|(m, _)| *m == method)
                        .map(|(_, model)| *model)
                        .ok_or_else(|| Error::invalid(format!("no trained model for {}", method.name())))?;
                    recover_all(&sk, model, schedule, recover_seed)?
                        .into_iter()
                        .map(|r| r.trace)
                        .collect()
                }
            };
            let accs: Vec<f64> = preds.iter().zip(&expanded).map(|(p, t)| trace_accuracy(p, t)).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accs);
            rows.push(SweepRow {
                lambda,
                method,
                mean_accuracy,
                std_accuracy,
                n_traces: accs.len(),
            });
        }
    }
    Ok(rows)
}

pub fn format_sweep_csv(cfg: &ExperimentConfig, rows: &[SweepRow]) -> Result<String> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.lambda,
            r.method.name(),
            r.mean_accuracy,
            r.std_accuracy,
            r.n_traces
        ));
    }
    out.push_str(&provenance_line(cfg)?);
    out.push('\n');
    Ok(out)
}

/// The sweep levels from `noise.sweep`, defaulting to ten levels over
/// `[0.53, 0.62]`.
pub fn sweep_levels(cfg: &ExperimentConfig) -> Result<Vec<NoiseProfile>> {
    let (lo, hi, steps) = cfg.noise.sweep.unwrap_or((0.53, 0.62, 10));
    noise_sweep_levels(lo, hi, steps)
}

/// Runs the experiment, then the robustness sweep over its held-out traces
/// with the models it trained, writing `sweep.csv`.
pub fn run_experiment_and_sweep(
    cfg: &ExperimentConfig,
    progress: impl FnMut(Method, usize, f64),
) -> Result<(ExperimentOutcome, Vec<SweepRow>)> {
    let outcome = run_experiment_with_progress(cfg, progress)?;
    let rows = sweep_outcome(cfg, &outcome)?;
    Ok((outcome, rows))
}

pub fn sweep_outcome(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<Vec<SweepRow>> {
    let dir = &cfg.experiment.output_dir;
    let log = RunLog { path: dir.join("run.log") };
    stage(&log, "sweep", || {
        let models: Vec<(Method, &DenoiserModel)> = outcome.models.iter().map(|m| (m.method, &m.model)).collect();
        let rows = run_sweep(
            &outcome.test.truths(),
            &outcome.test.alphabet,
            outcome.test.max_len,
            &sweep_levels(cfg)?,
            cfg.noise.sweep_replicates,
            cfg.noise.concentration,
            cfg.noise_seed(),
            &models,
            &cfg.experiment.methods,
            &outcome.schedule,
            cfg.recover_seed(),
        )?;
        write_file(&dir.join("sweep.csv"), &format_sweep_csv(cfg, &rows)?)?;
        Ok(rows)
    })
}

/// Writes the DK log and the synthesised SK log described by the config.
pub fn synthesize_to(cfg: &ExperimentConfig, dk_out: &Path, sk_out: &Path) -> Result<Dataset> {
    let ds = load_dataset(cfg)?;
    save_dk_log(dk_out, &ds.truths(), &ds.alphabet)?;
    let sk: Vec<_> = ds.pairs.iter().map(|p| p.sk.to_sk_trace()).collect();
    save_sk_log(sk_out, &sk)?;
    Ok(ds)
}
