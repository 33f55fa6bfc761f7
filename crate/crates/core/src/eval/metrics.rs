use serde::Serialize;

use crate::error::{Error, Result};
use crate::event_log::{argmax_decode, Dataset, DkTrace};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClassStats {
    /// Zero when the class was never predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_positives)
    }

    /// Zero when the class never occurs in the truth.
    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_negatives)
    }

    fn present(&self) -> bool {
        self.true_positives + self.false_positives + self.false_negatives > 0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Mean over classes that occur in the truth or the predictions.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_class: Vec<ClassStats>,
    pub correct: usize,
    pub total: usize,
}

/// Position-level accuracy and macro precision/recall over `k` activities.
pub fn compute_metrics(predictions: &[DkTrace], truths: &[DkTrace], k: usize) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth traces",
            predictions.len(),
            truths.len()
        )));
    }
    let mut per_class = vec![ClassStats::default(); k];
    let (mut correct, mut total) = (0, 0);
    for (p, t) in predictions.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::invalid(format!(
                "case `{}`: prediction has {} events, truth has {}",
                t.case_id,
                p.len(),
                t.len()
            )));
        }
        for (&a, &b) in p.activities.iter().zip(&t.activities) {
            if a >= k || b >= k {
                return Err(Error::invalid(format!(
                    "case `{}`: activity index outside alphabet of size {k}",
                    t.case_id
                )));
            }
            total += 1;
            if a == b {
                correct += 1;
                per_class[a].true_positives += 1;
            } else {
                per_class[a].false_positives += 1;
                per_class[b].false_negatives += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no events to evaluate"));
    }
    let present: Vec<&ClassStats> = per_class.iter().filter(|c| c.present()).collect();
    let n = present.len() as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        macro_precision: present.iter().map(|c| c.precision()).sum::<f64>() / n,
        macro_recall: present.iter().map(|c| c.recall()).sum::<f64>() / n,
        per_class,
        correct,
        total,
    })
}

/// Fraction of matching positions in one trace.
pub fn trace_accuracy(prediction: &DkTrace, truth: &DkTrace) -> f64 {
    let hits = prediction
        .activities
        .iter()
        .zip(&truth.activities)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / truth.len().max(1) as f64
}

pub fn argmax_predictions(test: &Dataset) -> Vec<DkTrace> {
    test.pairs.iter().map(|p| argmax_decode(&p.sk)).collect()
}

pub fn run_baseline_argmax(test: &Dataset) -> Result<MetricsReport> {
    compute_metrics(&argmax_predictions(test), &test.truths(), test.alphabet.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{Alphabet, SkTrace};
    use crate::noise_synth::{synthesize_sk_log, DirichletParams, NoiseProfile};

    fn t(acts: &[usize]) -> DkTrace {
        DkTrace::new("1", acts.to_vec())
    }

    #[test]
    fn worked_example_accuracy() {
        // E,B,A,C,D,E vs A,B,E,C,D,E with A=0,B=1,C=2,D=3,E=4
        let m = compute_metrics(&[t(&[4, 1, 0, 2, 3, 4])], &[t(&[0, 1, 4, 2, 3, 4])], 5).unwrap();
        assert_eq!(m.correct, 4);
        assert_eq!(m.accuracy, 4.0 / 6.0);
        // A: tp0 fp1 fn1, B: 1/1, C: 1/1, D: 1/1, E: tp1 fp1 fn1
        assert!((m.macro_precision - (0.0 + 1.0 + 1.0 + 1.0 + 0.5) / 5.0).abs() < 1e-15);
        assert!((m.macro_recall - (0.0 + 1.0 + 1.0 + 1.0 + 0.5) / 5.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_single_class() {
        let m = compute_metrics(&[t(&[0, 1, 2])], &[t(&[0, 1, 2])], 4).unwrap();
        assert_eq!((m.accuracy, m.macro_precision, m.macro_recall), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[t(&[2, 2])], &[t(&[2, 2])], 5).unwrap();
        assert_eq!(m.macro_precision, 1.0);
    }

    #[test]
    fn mismatched_lengths_are_errors() {
        assert!(compute_metrics(&[t(&[0, 1])], &[t(&[0])], 2).is_err());
        assert!(compute_metrics(&[], &[t(&[0])], 2).is_err());
    }

    #[test]
    fn argmax_on_noise_free_and_pure_noise() {
        let alphabet = Alphabet::new(["a", "b", "c", "d", "e"]).unwrap();
        let traces: Vec<DkTrace> = (0..400)
            .map(|i| DkTrace::new(i.to_string(), (0..10).map(|j| (i * 7 + j * 3) % 5).collect()))
            .collect();
        let clean = synthesize_sk_log(&traces, &alphabet, 10, &NoiseProfile::Constant(0.0), &DirichletParams::uniform(5, 0.05, 1).unwrap()).unwrap();
        assert_eq!(run_baseline_argmax(&clean).unwrap().accuracy, 1.0);

        let noise = synthesize_sk_log(&traces, &alphabet, 10, &NoiseProfile::Constant(1.0), &DirichletParams::uniform(5, 0.05, 1).unwrap()).unwrap();
        let acc = run_baseline_argmax(&noise).unwrap().accuracy;
        // binomial standard error at p = 0.2 over 4000 positions
        let se = (0.2f64 * 0.8 / 4000.0).sqrt();
        assert!((acc - 0.2).abs() < 4.0 * se, "accuracy {acc}");
    }

    #[test]
    fn worked_example_as_test_set() {
        let alphabet = Alphabet::new(["A", "B", "C", "D", "E"]).unwrap();
        let dk = DkTrace::new("1", vec![0, 1, 4, 2, 3, 4]);
        let sk = SkTrace::new(
            "1",
            vec![
                vec![0.33, 0.03, 0.15, 0.15, 0.34],
                vec![0.2, 0.25, 0.15, 0.2, 0.2],
                vec![0.5, 0.1, 0.1, 0.1, 0.2],
                vec![0.05, 0.15, 0.55, 0.05, 0.2],
                vec![0.1, 0.05, 0.25, 0.45, 0.15],
                vec![0.1, 0.05, 0.25, 0.25, 0.35],
            ],
            5,
        )
        .unwrap();
        let ds = Dataset::from_traces(alphabet, 6, &[dk], &[sk]).unwrap();
        assert_eq!(run_baseline_argmax(&ds).unwrap().accuracy, 4.0 / 6.0);
    }
}
