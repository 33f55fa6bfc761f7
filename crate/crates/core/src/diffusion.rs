//! Noise schedule, forward corruption, the reverse update, and the training
//! and recovery loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tracediff_tensor::{Adam, AdamConfig, Bindings, Gradients, Tape, Tensor, Var};

use crate::denoiser::encoding::{decode_logits, dk_target, encode_dk, encode_sk, logits_to_x0};
use crate::denoiser::{DenoiserModel, ForwardOptions, Guidance, Variant};
use crate::error::{Error, Result};
use crate::event_log::{Dataset, DkTrace, TraceMatrix};
use crate::process_model::FlowMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `alpha[t - 1]` is `alpha_t` for `t = 1..=T`.
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

/// Linearly spaced `beta_t` from `beta_lo` to `beta_hi`, `alpha_t = 1 - beta_t`.
pub fn make_schedule(steps: usize, beta_lo: f64, beta_hi: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("a noise schedule needs at least one step"));
    }
    if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
        return Err(Error::invalid(format!(
            "beta range must satisfy 0 < lo <= hi < 1, got [{beta_lo}, {beta_hi}]"
        )));
    }
    let alpha: Vec<f64> = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            1.0 - (beta_lo + (beta_hi - beta_lo) * frac)
        })
        .collect();
    NoiseSchedule::from_alphas(alpha)
}

impl NoiseSchedule {
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::invalid("every alpha_t must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len() + 1);
        alpha_bar.push(1.0);
        for &a in &alpha {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * a);
        }
        Ok(NoiseSchedule { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, defined as 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("time step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(c_x0, c_xt, var)` of the reverse update
    /// `x_{t-1} = c_x0 x0 + c_xt x_t + sqrt(var) z`, the Gaussian posterior
    /// `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        let (a, ab, ab_prev) = (self.alpha(t), self.alpha_bar(t), self.alpha_bar(t - 1));
        let denom = 1.0 - ab;
        Ok((
            ab_prev.sqrt() * (1.0 - a) / denom,
            a.sqrt() * (1.0 - ab_prev) / denom,
            (1.0 - ab_prev) * (1.0 - a) / denom,
        ))
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match x0 shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| s * x + n * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// One reverse step. `z` must be all zeros at `t = 1`.
pub fn reverse_step(
    x_t: &Tensor,
    x0_pred: &Tensor,
    t: usize,
    z: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (c0, ct, var) = schedule.posterior_coefficients(t)?;
    if x_t.shape() != x0_pred.shape() || x_t.shape() != z.shape() {
        return Err(Error::invalid("reverse step inputs differ in shape"));
    }
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("the final reverse step requires z = 0"));
    }
    let sigma = var.sqrt();
    let data = x0_pred
        .data()
        .iter()
        .zip(x_t.data())
        .zip(z.data())
        .map(|((x0, xt), z)| c0 * x0 + ct * xt + sigma * z)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the trace loss; the flow loss gets `1 - gamma`.
    pub gamma: f64,
    pub p_no_sk: f64,
    pub p_no_f: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-3,
            gamma: 0.8,
            p_no_sk: 0.1,
            p_no_f: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("gamma", self.gamma), ("p_no_sk", self.p_no_sk), ("p_no_f", self.p_no_f)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A dataset pair prepared for the network.
#[derive(Debug, Clone)]
pub struct Example {
    pub case_id: String,
    pub x0: Tensor,
    pub target: Tensor,
    pub sk: Tensor,
    pub mask: Vec<bool>,
}

pub fn prepare(dataset: &Dataset) -> Result<Vec<Example>> {
    dataset
        .pairs
        .iter()
        .map(|p| {
            Ok(Example {
                case_id: p.case_id().to_string(),
                x0: encode_dk(&p.dk)?,
                target: dk_target(&p.dk)?,
                sk: encode_sk(&p.sk)?,
                mask: p.dk.mask.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub trace: Var,
    pub flow: Option<Var>,
}

/// Records `gamma CE(x0, x0^) + (1 - gamma) BCE(F, F^)` for one example.
/// The flow term is dropped when the model-free variant is used, when flow
/// guidance is dropped, or when `gamma = 1`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    model: &DenoiserModel,
    tape: &mut Tape,
    b: &Bindings,
    x_t: Var,
    example: &Example,
    sk: Option<Var>,
    flow_target: Option<&FlowMatrix>,
    t: usize,
    gamma: f64,
) -> Result<LossVars> {
    let use_flow = flow_target.is_some();
    let out = model.forward_vars(tape, b, x_t, Guidance { sk, flow: use_flow }, t, &ForwardOptions::default())?;
    let trace = tape.cross_entropy(out.trace_logits, &example.target, &example.mask)?;
    let flow = match (out.flow_logits, flow_target) {
        (Some(logits), Some(f)) if gamma < 1.0 => Some(tape.bce_with_logits(logits, f.tensor())?),
        _ => None,
    };
    let total = match flow {
        Some(f) => {
            let a = tape.scale(trace, gamma);
            let c = tape.scale(f, 1.0 - gamma);
            tape.add(a, c)?
        }
        None => trace,
    };
    Ok(LossVars { total, trace, flow })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub loss: Vec<f64>,
    /// Mean trace cross-entropy per epoch.
    pub trace_loss: Vec<f64>,
}

pub fn train(
    dataset: &Dataset,
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    flow: Option<&FlowMatrix>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_progress(dataset, model, schedule, flow, cfg, |_, _| {})
}

/// As [`train`], calling `progress(epoch, mean_loss)` after each epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    flow: Option<&FlowMatrix>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mc = model.config().clone();
    match (mc.variant, flow) {
        (Variant::ModelFree, Some(_)) => {
            return Err(Error::invalid("a flow matrix was given to a model-free denoiser"))
        }
        (Variant::ModelAware, None) => {
            return Err(Error::invalid("a model-aware denoiser needs a flow matrix"))
        }
        _ => {}
    }
    if let Some(f) = flow {
        if f.k() != mc.num_activities {
            return Err(Error::invalid("flow matrix size does not match the denoiser"));
        }
    }
    if schedule.steps() != mc.steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps, denoiser expects {}",
            schedule.steps(),
            mc.steps
        )));
    }
    if dataset.max_len != mc.max_len || dataset.alphabet.len() != mc.num_activities {
        return Err(Error::invalid("dataset shape does not match the denoiser config"));
    }
    let examples = prepare(dataset)?;
    let gamma = if mc.variant == Variant::ModelFree { 1.0 } else { cfg.gamma };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut tape = Tape::new();
    let bindings = model.params().bind(&mut tape);
    let base = tape.len();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut trace_total) = (0.0, 0.0);
        for &i in &order {
            let ex = &examples[i];
            let t = rng.gen_range(1..=schedule.steps());
            let eps = standard_normal(ex.x0.shape(), &mut rng);
            let drop_sk = rng.gen_bool(cfg.p_no_sk);
            let drop_f = rng.gen_bool(cfg.p_no_f);
            let x_t = forward_sample(&ex.x0, t, &eps, schedule)?;

            tape.truncate(base);
            model.params().rebind(&mut tape, &bindings)?;
            let xv = tape.constant(x_t);
            let sk = (!drop_sk).then(|| tape.constant(ex.sk.clone()));
            let flow_target = if drop_f { None } else { flow };
            let loss = training_loss(model, &mut tape, &bindings, xv, ex, sk, flow_target, t, gamma)?;
            let value = tape.value(loss.total).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    case_id: ex.case_id.clone(),
                    step: t,
                    loss: value,
                });
            }
            tape.backward(loss.total)?;
            let grads = Gradients::from_tape(model.params(), &tape, &bindings)?;
            adam.step(model.params_mut(), &grads)?;
            total += value;
            trace_total += tape.value(loss.trace).data()[0];
        }
        let n = examples.len() as f64;
        report.loss.push(total / n);
        report.trace_loss.push(trace_total / n);
        progress(epoch, total / n);
    }
    Ok(report)
}

/// FNV-1a over the seed bytes and the case id, so each case owns a noise
/// stream independent of recovery order.
pub fn case_seed(seed: u64, case_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(case_id.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub trace: DkTrace,
    /// `x0` logits from the final reverse step.
    pub logits: Tensor,
}

/// Runs the reverse process for every SK matrix with one frozen model.
pub fn recover_all(
    sk: &[TraceMatrix],
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Recovery>> {
    let cfg = model.config();
    if schedule.steps() != cfg.steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps, denoiser expects {}",
            schedule.steps(),
            cfg.steps
        )));
    }
    let use_flow = cfg.variant == Variant::ModelAware;
    let mut session = model.session();
    sk.iter()
        .map(|m| {
            if m.rows() != cfg.num_activities || m.max_len() != cfg.max_len {
                return Err(Error::invalid(format!(
                    "case `{}`: SK matrix is {}x{}, denoiser expects {}x{}",
                    m.case_id,
                    m.rows(),
                    m.max_len(),
                    cfg.num_activities,
                    cfg.max_len
                )));
            }
            let y = encode_sk(m)?;
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, &m.case_id));
            let shape = [cfg.classes(), cfg.max_len];
            let mut x = standard_normal(&shape, &mut rng);
            let mut logits = None;
            for t in (1..=schedule.steps()).rev() {
                let z = if t > 1 { standard_normal(&shape, &mut rng) } else { Tensor::zeros(&shape) };
                let pred = session.predict(&x, Some(&y), use_flow, t)?;
                let x0 = logits_to_x0(&pred.trace_logits);
                x = reverse_step(&x, &x0, t, &z, schedule)?;
                logits = Some(pred.trace_logits);
            }
            let logits = logits.expect("at least one step");
            if !logits.is_finite() {
                return Err(Error::invalid(format!("case `{}`: recovery produced non-finite logits", m.case_id)));
            }
            Ok(Recovery {
                trace: DkTrace::new(m.case_id.clone(), decode_logits(&logits, &m.mask)),
                logits,
            })
        })
        .collect()
}

pub fn recover(sk: &TraceMatrix, model: &DenoiserModel, schedule: &NoiseSchedule, seed: u64) -> Result<Recovery> {
    Ok(recover_all(std::slice::from_ref(sk), model, schedule, seed)?.remove(0))
}
