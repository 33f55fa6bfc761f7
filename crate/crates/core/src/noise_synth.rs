//! SK trace synthesis by mixing one-hot DK columns with Dirichlet noise.
//!
//! Column `tau` of the SK trace is `(1 - lambda_tau) d_tau + lambda_tau pi_tau`
//! with `pi_tau ~ Dirichlet(alpha)`, renormalised to sum to one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Open01};
use serde::{Deserialize, Serialize};
use tracediff_tensor::Tensor;

use crate::error::{Error, Result};
use crate::event_log::{Alphabet, Dataset, DkTrace, MatrixKind, TraceMatrix, TracePair};

pub const DEFAULT_CONCENTRATION: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub concentration: Vec<f64>,
    pub seed: u64,
}

impl DirichletParams {
    pub fn new(concentration: Vec<f64>, seed: u64) -> Result<Self> {
        let p = DirichletParams { concentration, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(k: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::new(vec![alpha; k], seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.concentration.is_empty() {
            return Err(Error::invalid("Dirichlet concentration vector is empty"));
        }
        if let Some(a) = self.concentration.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::invalid(format!(
                "Dirichlet concentrations must be positive, got {a}"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.concentration.len()
    }
}

/// Mixture level per event position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseProfile {
    Constant(f64),
    /// `lambdas[tau]` for the first positions, `fallback` beyond them.
    PerPosition { lambdas: Vec<f64>, fallback: f64 },
}

impl NoiseProfile {
    pub fn constant(lambda: f64) -> Result<Self> {
        let p = NoiseProfile::Constant(lambda);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |l: f64| {
            if (0.0..=1.0).contains(&l) {
                Ok(())
            } else {
                Err(Error::invalid(format!("noise level {l} outside [0, 1]")))
            }
        };
        match self {
            NoiseProfile::Constant(l) => check(*l),
            NoiseProfile::PerPosition { lambdas, fallback } => {
                lambdas.iter().try_for_each(|&l| check(l))?;
                check(*fallback)
            }
        }
    }

    pub fn lambda_at(&self, tau: usize) -> f64 {
        match self {
            NoiseProfile::Constant(l) => *l,
            NoiseProfile::PerPosition { lambdas, fallback } => {
                lambdas.get(tau).copied().unwrap_or(*fallback)
            }
        }
    }
}

/// One Dirichlet draw from `K` independent gamma variates.
///
/// Shapes far below one make `Gamma(alpha, 1)` underflow, so each variate is
/// drawn in log space as `log G(alpha + 1) + log(U) / alpha` and the vector is
/// normalised with a log-sum-exp.
pub fn sample_dirichlet_one(concentration: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            if a >= 1.0 {
                Gamma::new(a, 1.0).expect("validated shape").sample(rng).ln()
            } else {
                let g = Gamma::new(a + 1.0, 1.0).expect("validated shape").sample(rng);
                let u: f64 = Open01.sample(rng);
                g.ln() + u.ln() / a
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

pub fn sample_dirichlet(params: &DirichletParams, count: usize) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    Ok((0..count)
        .map(|_| sample_dirichlet_one(&params.concentration, &mut rng))
        .collect())
}

/// `(1 - lambda) d + lambda pi` before renormalisation, with the largest
/// deviation of any column sum from one.
pub fn mix(d: &[f64], pi: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let r: Vec<f64> = d
        .iter()
        .zip(pi)
        .map(|(&dj, &pj)| (1.0 - lambda) * dj + lambda * pj)
        .collect();
    let dev = (r.iter().sum::<f64>() - 1.0).abs();
    (r, dev)
}

/// Divides a column by its sum. Columns already summing to one within a few
/// ulp are left alone, so `lambda` of exactly 0 or 1 reproduces `d` or `pi`
/// bit for bit.
pub fn normalize(column: &mut [f64]) {
    let total: f64 = column.iter().sum();
    if (total - 1.0).abs() > 4.0 * f64::EPSILON {
        column.iter_mut().for_each(|p| *p /= total);
    }
}

/// Generator seeded for trace `index`; traces get disjoint ChaCha streams.
pub fn trace_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub sk: TraceMatrix,
    /// Largest pre-normalisation column-sum deviation from one.
    pub max_deviation: f64,
    /// The Dirichlet columns drawn for real positions.
    pub noise: Vec<Vec<f64>>,
}

pub fn synthesize_sk_trace(
    dk: &TraceMatrix,
    profile: &NoiseProfile,
    params: &DirichletParams,
    rng: &mut ChaCha8Rng,
) -> Result<Synthesis> {
    if dk.kind != MatrixKind::Dk {
        return Err(Error::invalid(format!(
            "case `{}`: SK synthesis needs a DK matrix, got {:?}",
            dk.case_id, dk.kind
        )));
    }
    profile.validate()?;
    params.validate()?;
    if params.k() != dk.rows() {
        return Err(Error::invalid(format!(
            "Dirichlet dimension {} does not match {} activities",
            params.k(),
            dk.rows()
        )));
    }
    let mut data = Tensor::zeros(dk.data.shape());
    let mut max_deviation = 0.0f64;
    let mut noise = Vec::new();
    for tau in (0..dk.max_len()).filter(|&t| dk.mask[t]) {
        let pi = sample_dirichlet_one(&params.concentration, rng);
        let (mut r, dev) = mix(&dk.column(tau), &pi, profile.lambda_at(tau));
        max_deviation = max_deviation.max(dev);
        normalize(&mut r);
        for (j, p) in r.into_iter().enumerate() {
            data.set(j, tau, p);
        }
        noise.push(pi);
    }
    Ok(Synthesis {
        sk: TraceMatrix {
            case_id: dk.case_id.clone(),
            kind: MatrixKind::Sk,
            data,
            mask: dk.mask.clone(),
        },
        max_deviation,
        noise,
    })
}

/// Pairs every DK trace with a freshly synthesised SK trace. Trace `i`
/// draws from stream `i` of `params.seed`.
pub fn synthesize_sk_log(
    traces: &[DkTrace],
    alphabet: &Alphabet,
    max_len: usize,
    profile: &NoiseProfile,
    params: &DirichletParams,
) -> Result<Dataset> {
    if traces.is_empty() {
        return Err(Error::invalid("cannot synthesise SK traces for an empty log"));
    }
    let pairs = traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let dk = t.encode(alphabet.len(), max_len)?;
            let mut rng = trace_rng(params.seed, i as u64);
            let sk = synthesize_sk_trace(&dk, profile, params, &mut rng)?.sk;
            TracePair::new(dk, sk)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(alphabet.clone(), max_len, pairs)
}

/// Re-noises the DK side of an existing dataset.
pub fn resynthesize(dataset: &Dataset, profile: &NoiseProfile, params: &DirichletParams) -> Result<Dataset> {
    synthesize_sk_log(&dataset.truths(), &dataset.alphabet, dataset.max_len, profile, params)
}

/// Evenly spaced constant levels from `lo` to `hi` inclusive, rounded to
/// twelve decimals so grid points print cleanly.
pub fn noise_sweep_levels(lo: f64, hi: f64, steps: usize) -> Result<Vec<NoiseProfile>> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::invalid(format!(
            "sweep bounds must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    if steps == 0 {
        return Err(Error::invalid("a sweep needs at least one level"));
    }
    if steps == 1 && lo != hi {
        return Err(Error::invalid("a one-level sweep needs lo == hi"));
    }
    Ok((0..steps)
        .map(|i| {
            let x = if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            };
            NoiseProfile::Constant((x * 1e12).round() / 1e12)
        })
        .collect())
}
