//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to round-off compare absolutely.
    pub floor: f64,
    /// Check at most this many entries per input, chosen at random.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, entry)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per input, and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect::<Option<_>>()
        .ok_or_else(|| TensorError::MissingGrad("gradcheck input".into()))?;

    let evaluate = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match config.max_entries {
            Some(limit) if limit < input.len() => sample(&mut rng, input.len(), limit).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for idx in entries {
            let original = input.data()[idx];
            work[which].data_mut()[idx] = original + config.step;
            let plus = evaluate(&work)?;
            work[which].data_mut()[idx] = original - config.step;
            let minus = evaluate(&work)?;
            work[which].data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[which][idx];
            let rel = relative_error(a, numeric, config.floor);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((which, idx));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
