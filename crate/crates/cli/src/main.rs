use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracediff_core::denoiser::checkpoint::load_checkpoint;
use tracediff_core::diffusion::{make_schedule, recover_all};
use tracediff_core::eval::experiment::{
    load_dataset, prepare_and_train, run_experiment_and_sweep, run_experiment_with_progress, synthesize_to,
};
use tracediff_core::eval::{ExperimentConfig, Method, MetricsReport, SweepRow};
use tracediff_core::event_log::{parse_dk_log, parse_sk_log, save_dk_log, split_train_test};
use tracediff_core::gradcheck;
use tracediff_core::process_model::{mine_dfg_flow_matrix, save_flow_matrix};
use tracediff_core::Error;

#[derive(Debug, Parser)]
#[command(name = "tracediff", version, about = "Recover deterministic process traces from stochastic event logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate (or load) a DK log and write it with a synthesised SK log.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dk_out: Option<PathBuf>,
        #[arg(long)]
        sk_out: Option<PathBuf>,
    },
    /// Mine a directly-follows flow matrix.
    Mine {
        #[command(flatten)]
        common: Common,
        /// Mine from this whole DK log instead of the configured training split.
        #[arg(long)]
        dk: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured DDTR models and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Recover DK traces from an SK log with a trained checkpoint.
    Recover {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sk: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Schedule endpoints, for checkpoints that do not record them.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        beta: Option<Vec<f64>>,
    },
    /// Run the full protocol and write metrics.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the protocol, then the noise sweep, and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Override the sweep as LO HI STEPS.
        #[arg(long, num_args = 3, value_names = ["LO", "HI", "STEPS"])]
        levels: Option<Vec<String>>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Finite-difference gradient checks of every primitive and the denoiser loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Restrict to these methods, e.g. `--methods argmax model-free`.
    #[arg(long, num_args = 1..)]
    methods: Option<Vec<String>>,
}

/// A failure with the exit status it maps to.
enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn parse_method(name: &str) -> CliResult<Method> {
    match name {
        "argmax" => Ok(Method::Argmax),
        "model-free" | "ddtr-model-free" => Ok(Method::ModelFree),
        "model-aware" | "ddtr-model-aware" => Ok(Method::ModelAware),
        other => Err(Failure::Usage(format!("unknown method `{other}`"))),
    }
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        if !self.config.is_file() {
            return Err(Failure::Usage(format!("config file {} not found", self.config.display())));
        }
        let mut cfg = match ExperimentConfig::load(&self.config) {
            Ok(c) => c,
            Err(e @ Error::Config(_)) => return Err(Failure::Usage(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.experiment.output_dir = dir.clone();
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(lambda) = self.lambda {
            cfg.noise.lambda = lambda;
        }
        if let Some(methods) = &self.methods {
            cfg.experiment.methods = methods.iter().map(|m| parse_method(m)).collect::<CliResult<_>>()?;
        }
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn progress(epochs: usize) -> impl FnMut(Method, usize, f64) {
    let every = (epochs / 10).max(1);
    move |method, epoch, loss| {
        if epoch % every == 0 || epoch == epochs {
            eprintln!("{}: epoch {epoch}/{epochs} loss {loss:.5}", method.name());
        }
    }
}

fn print_metrics(rows: &[(Method, MetricsReport)]) {
    println!("{:<18} {:>9} {:>9} {:>9}", "method", "accuracy", "precision", "recall");
    for (m, r) in rows {
        println!(
            "{:<18} {:>9.4} {:>9.4} {:>9.4}",
            m.name(),
            r.accuracy,
            r.macro_precision,
            r.macro_recall
        );
    }
}

fn print_sweep(rows: &[SweepRow]) {
    println!("{:>8} {:<18} {:>9} {:>9} {:>5}", "lambda", "method", "mean", "std", "n");
    for r in rows {
        println!(
            "{:>8} {:<18} {:>9.4} {:>9.4} {:>5}",
            r.lambda,
            r.method.name(),
            r.mean_accuracy,
            r.std_accuracy,
            r.n_traces
        );
    }
}

fn out_path(cfg: &ExperimentConfig, given: &Option<PathBuf>, default: &str) -> CliResult<PathBuf> {
    let dir = &cfg.experiment.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::Domain(Error::Io { path: dir.clone(), source: e }))?;
    Ok(given.clone().unwrap_or_else(|| dir.join(default)))
}

fn recover_cmd(checkpoint: &Path, sk: &Path, out: &Path, seed: u64, beta: Option<Vec<f64>>) -> CliResult {
    let ck = load_checkpoint(checkpoint, None)?;
    let (lo, hi) = match (beta, ck.metadata.beta) {
        (Some(b), _) => (b[0], b[1]),
        (None, Some(b)) => b,
        (None, None) => {
            return Err(Failure::Usage(format!(
                "{} does not record its noise schedule; pass --beta LO HI",
                checkpoint.display()
            )))
        }
    };
    let cfg = ck.model.config();
    let schedule = make_schedule(cfg.steps, lo, hi)?;
    let traces = parse_sk_log(sk, &ck.alphabet)?;
    let matrices = traces
        .iter()
        .map(|t| t.encode(cfg.max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let recovered = recover_all(&matrices, &ck.model, &schedule, seed)?;
    let preds: Vec<_> = recovered.into_iter().map(|r| r.trace).collect();
    save_dk_log(out, &preds, &ck.alphabet)?;
    eprintln!("recovered {} traces into {}", preds.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { common, dk_out, sk_out } => {
            let cfg = common.load()?;
            let dk = out_path(&cfg, &dk_out, "dk_log.csv")?;
            let sk = out_path(&cfg, &sk_out, "sk_log.jsonl")?;
            let ds = synthesize_to(&cfg, &dk, &sk)?;
            eprintln!("wrote {} traces to {} and {}", ds.len(), dk.display(), sk.display());
        }
        Command::Mine { common, dk, out } => {
            let cfg = common.load()?;
            let (traces, alphabet) = match dk {
                Some(path) => parse_dk_log(path)?,
                None => {
                    let ds = load_dataset(&cfg)?;
                    let (train, _) = split_train_test(&ds, cfg.data.train_fraction, cfg.split_seed())?;
                    (train.truths(), train.alphabet)
                }
            };
            let flow = mine_dfg_flow_matrix(&traces, &alphabet)?;
            let path = out_path(&cfg, &out, "flow_matrix.csv")?;
            save_flow_matrix(&path, &flow, &alphabet)?;
            eprintln!("{} edges over {} activities written to {}", flow.edge_count(), alphabet.len(), path.display());
        }
        Command::Train { common } => {
            let cfg = common.load()?;
            let prepared = prepare_and_train(&cfg, progress(cfg.train.epochs))?;
            for m in &prepared.models {
                let last = m.history.loss.last().copied().unwrap_or(f64::NAN);
                println!("{}: final loss {last:.5}", m.method.name());
            }
        }
        Command::Recover { checkpoint, sk, out, seed, beta } => recover_cmd(&checkpoint, &sk, &out, seed, beta)?,
        Command::Evaluate { common } => {
            let cfg = common.load()?;
            let outcome = run_experiment_with_progress(&cfg, progress(cfg.train.epochs))?;
            print_metrics(&outcome.metrics);
        }
        Command::Sweep { common, levels, replicates } => {
            let mut cfg = common.load()?;
            if let Some(v) = levels {
                let bad = |s: &str| Failure::Usage(format!("bad sweep value `{s}`"));
                let lo = v[0].parse().map_err(|_| bad(&v[0]))?;
                let hi = v[1].parse().map_err(|_| bad(&v[1]))?;
                let steps = v[2].parse().map_err(|_| bad(&v[2]))?;
                cfg.noise.sweep = Some((lo, hi, steps));
            }
            if let Some(r) = replicates {
                cfg.noise.sweep_replicates = r;
            }
            let (outcome, rows) = run_experiment_and_sweep(&cfg, progress(cfg.train.epochs))?;
            print_metrics(&outcome.metrics);
            print_sweep(&rows);
        }
        Command::Gradcheck { seeds } => {
            let checks = gradcheck::run_all(seeds)?;
            let mut failed = Vec::new();
            println!("{:<30} {:>12} {:>10} {:>8}", "layer", "max rel err", "tolerance", "checked");
            for c in &checks {
                println!(
                    "{:<30} {:>12.3e} {:>10.0e} {:>8}{}",
                    c.name,
                    c.report.max_rel_error,
                    c.tolerance,
                    c.report.checked,
                    if c.passes() { "" } else { "  FAIL" }
                );
                if !c.passes() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Invalid(format!("gradient check failed for {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
