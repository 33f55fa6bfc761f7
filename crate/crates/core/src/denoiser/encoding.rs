//! Continuous encodings of traces in the space of activity log-probabilities.
//!
//! A DK trace becomes a `(K+1) x max_len` matrix: each column is a one-hot
//! over the activities plus the padding class, smoothed so the true class
//! holds `1 - eps` and every other class `eps / K`, then logged and
//! standardised. Because every DK column has the same multiset of entries,
//! the standardisation is a fixed affine map. SK traces are clamped to
//! `[1e-6, 1]`, logged, and standardised with statistics from their real
//! columns.

use tracediff_tensor::Tensor;

use crate::error::{Error, Result};
use crate::event_log::{MatrixKind, TraceMatrix};

pub const SMOOTHING: f64 = 0.01;
pub const SK_FLOOR: f64 = 1e-6;

/// The affine map taking smoothed log-probabilities to zero mean and unit
/// variance for DK columns over `classes` classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkStandardizer {
    pub mean: f64,
    pub std: f64,
    pub classes: usize,
}

impl DkStandardizer {
    pub fn new(classes: usize) -> Self {
        let c = classes as f64;
        let hi = (1.0 - SMOOTHING).ln();
        let lo = (SMOOTHING / (c - 1.0)).ln();
        let mean = (hi + (c - 1.0) * lo) / c;
        let var = ((hi - mean).powi(2) + (c - 1.0) * (lo - mean).powi(2)) / c;
        DkStandardizer {
            mean,
            std: var.sqrt(),
            classes,
        }
    }

    fn smooth(&self, p: f64) -> f64 {
        (1.0 - SMOOTHING) * p + SMOOTHING / (self.classes as f64 - 1.0) * (1.0 - p)
    }

    /// Maps a probability column to the DK encoding space. One-hot columns
    /// land exactly on the DK encoding.
    pub fn encode_probs(&self, probs: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(probs) {
            *o = (self.smooth(p).ln() - self.mean) / self.std;
        }
    }
}

fn padded_column(matrix: &TraceMatrix, tau: usize, classes: usize) -> Vec<f64> {
    let mut col = vec![0.0; classes];
    if matrix.mask[tau] {
        for (j, c) in col.iter_mut().take(classes - 1).enumerate() {
            *c = matrix.data.at(j, tau);
        }
    } else {
        col[classes - 1] = 1.0;
    }
    col
}

fn check_rows(matrix: &TraceMatrix, kind: MatrixKind) -> Result<()> {
    if matrix.kind != kind {
        return Err(Error::invalid(format!(
            "case `{}`: expected a {kind:?} matrix, got {:?}",
            matrix.case_id, matrix.kind
        )));
    }
    Ok(())
}

/// DK matrix -> `(K+1) x max_len` standardised log-probabilities.
pub fn encode_dk(matrix: &TraceMatrix) -> Result<Tensor> {
    check_rows(matrix, MatrixKind::Dk)?;
    let classes = matrix.rows() + 1;
    let st = DkStandardizer::new(classes);
    let mut out = Tensor::zeros(&[classes, matrix.max_len()]);
    let mut buf = vec![0.0; classes];
    for tau in 0..matrix.max_len() {
        st.encode_probs(&padded_column(matrix, tau, classes), &mut buf);
        for (j, &v) in buf.iter().enumerate() {
            out.set(j, tau, v);
        }
    }
    Ok(out)
}

/// One-hot class targets for the trace cross-entropy; padding columns point
/// at the padding class but are excluded by the mask.
pub fn dk_target(matrix: &TraceMatrix) -> Result<Tensor> {
    check_rows(matrix, MatrixKind::Dk)?;
    let classes = matrix.rows() + 1;
    let mut out = Tensor::zeros(&[classes, matrix.max_len()]);
    for tau in 0..matrix.max_len() {
        for (j, v) in padded_column(matrix, tau, classes).into_iter().enumerate() {
            out.set(j, tau, v);
        }
    }
    Ok(out)
}

/// SK matrix -> `(K+1) x max_len` standardised clamped log-probabilities.
pub fn encode_sk(matrix: &TraceMatrix) -> Result<Tensor> {
    check_rows(matrix, MatrixKind::Sk)?;
    let classes = matrix.rows() + 1;
    let l = matrix.max_len();
    let mut out = Tensor::zeros(&[classes, l]);
    for tau in 0..l {
        for (j, p) in padded_column(matrix, tau, classes).into_iter().enumerate() {
            out.set(j, tau, p.clamp(SK_FLOOR, 1.0).ln());
        }
    }
    let real: Vec<f64> = (0..l)
        .filter(|&t| matrix.mask[t])
        .flat_map(|t| out.column(t))
        .collect();
    if real.is_empty() {
        return Err(Error::invalid(format!("case `{}` has no events", matrix.case_id)));
    }
    let n = real.len() as f64;
    let mean = real.iter().sum::<f64>() / n;
    let std = (real.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
    Ok(out)
}

/// Column-wise softmax of `logits` mapped into the DK encoding space, so a
/// predicted `x0` can enter the reverse update.
pub fn logits_to_x0(logits: &Tensor) -> Tensor {
    let (classes, l) = (logits.rows(), logits.cols());
    let st = DkStandardizer::new(classes);
    let mut out = Tensor::zeros(&[classes, l]);
    let mut buf = vec![0.0; classes];
    for tau in 0..l {
        let probs = softmax(&logits.column(tau));
        st.encode_probs(&probs, &mut buf);
        for (j, &v) in buf.iter().enumerate() {
            out.set(j, tau, v);
        }
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Per real column, the most likely activity (padding class excluded);
/// ties go to the lowest index.
pub fn decode_logits(logits: &Tensor, mask: &[bool]) -> Vec<usize> {
    let activities = logits.rows() - 1;
    (0..logits.cols())
        .filter(|&t| mask[t])
        .map(|t| {
            let mut best = 0;
            for j in 1..activities {
                if logits.at(j, t) > logits.at(best, t) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{DkTrace, SkTrace};

    #[test]
    fn dk_encoding_is_standardised() {
        let m = DkTrace::new("c", vec![0, 2, 1]).encode(3, 4).unwrap();
        let x = encode_dk(&m).unwrap();
        assert_eq!(x.shape(), &[4, 4]);
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        // true class is the column maximum, padding column points at pad
        assert!(x.at(2, 1) > x.at(0, 1));
        assert!(x.at(3, 3) > x.at(0, 3));
    }

    #[test]
    fn one_hot_logits_map_back_to_dk_encoding() {
        let m = DkTrace::new("c", vec![1, 0]).encode(2, 2).unwrap();
        let x0 = encode_dk(&m).unwrap();
        // sharp logits give softmax = one-hot up to exp(-800) = 0
        let logits = Tensor::from_fn(&[3, 2], |i| {
            let (r, c) = (i / 2, i % 2);
            if (c == 0 && r == 1) || (c == 1 && r == 0) { 800.0 } else { 0.0 }
        });
        let back = logits_to_x0(&logits);
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sk_encoding_standardises_real_columns() {
        let sk = SkTrace::new("c", vec![vec![0.7, 0.3], vec![0.0, 1.0]], 2).unwrap();
        let x = encode_sk(&sk.encode(4).unwrap()).unwrap();
        let real: Vec<f64> = (0..2).flat_map(|t| x.column(t)).collect();
        let mean = real.iter().sum::<f64>() / real.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!(x.is_finite());
    }

    #[test]
    fn decode_skips_padding_class_and_columns() {
        let logits = Tensor::from_rows(&[vec![1.0, 0.0, 5.0], vec![1.0, 2.0, 0.0], vec![9.0, 9.0, 9.0]]).unwrap();
        assert_eq!(decode_logits(&logits, &[true, true, false]), vec![0, 1]);
    }
}
