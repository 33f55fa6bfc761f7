//! DK and SK traces, their matrix encodings, and the on-disk log formats.
//!
//! DK logs are CSV with header `case_id,event_no,activity` (extra trailing
//! columns such as a relative time are ignored). SK logs are JSON lines, one
//! object per case: `{"case_id": "1", "events": [[p_1, ..., p_K], ...]}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracediff_tensor::Tensor;

use crate::error::{Error, Result};

/// Tolerance for accepting an SK column read from disk.
pub const SK_PARSE_TOLERANCE: f64 = 1e-6;
/// Columns are renormalised after parsing, so they sum to one this tightly.
pub const SK_SUM_TOLERANCE: f64 = 1e-9;

/// Ordered activity vocabulary. Index `K` is reserved for padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    activities: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let activities: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(activities.len());
        for (i, label) in activities.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::invalid("activity labels must be non-empty"));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate activity label `{label}`")));
            }
        }
        if activities.len() < 2 {
            return Err(Error::invalid(format!(
                "an alphabet needs at least 2 activities, got {}",
                activities.len()
            )));
        }
        Ok(Alphabet { activities, index })
    }

    /// Number of activities `K`, excluding padding.
    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    pub fn pad_index(&self) -> usize {
        self.activities.len()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.activities[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.activities
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        if self.index.is_empty() {
            return self.activities.iter().position(|a| a == label);
        }
        self.index.get(label).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DkTrace {
    pub case_id: String,
    pub activities: Vec<usize>,
}

impl DkTrace {
    pub fn new(case_id: impl Into<String>, activities: Vec<usize>) -> Self {
        DkTrace {
            case_id: case_id.into(),
            activities,
        }
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    /// One-hot `K x max_len` matrix; padding columns are zero and unmasked.
    pub fn encode(&self, k: usize, max_len: usize) -> Result<TraceMatrix> {
        check_length(&self.case_id, self.len(), max_len)?;
        let mut data = Tensor::zeros(&[k, max_len]);
        for (tau, &a) in self.activities.iter().enumerate() {
            if a >= k {
                return Err(Error::InvalidEvent {
                    case_id: self.case_id.clone(),
                    event: tau + 1,
                    msg: format!("activity index {a} outside alphabet of size {k}"),
                });
            }
            data.set(a, tau, 1.0);
        }
        Ok(TraceMatrix {
            case_id: self.case_id.clone(),
            kind: MatrixKind::Dk,
            data,
            mask: mask_for(self.len(), max_len),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkTrace {
    pub case_id: String,
    pub columns: Vec<Vec<f64>>,
}

impl SkTrace {
    /// Validates each column and renormalises it to sum to one.
    pub fn new(case_id: impl Into<String>, columns: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        let case_id = case_id.into();
        let mut columns = columns;
        for (tau, col) in columns.iter_mut().enumerate() {
            let event = tau + 1;
            let fail = |msg: String| Error::InvalidEvent {
                case_id: case_id.clone(),
                event,
                msg,
            };
            if col.len() != k {
                return Err(fail(format!("expected {k} probabilities, got {}", col.len())));
            }
            if let Some(p) = col.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(fail(format!("invalid probability {p}")));
            }
            let total: f64 = col.iter().sum();
            if (total - 1.0).abs() > SK_PARSE_TOLERANCE {
                return Err(fail(format!("probabilities sum to {total}, not 1")));
            }
            crate::noise_synth::normalize(col);
        }
        if columns.is_empty() {
            return Err(Error::invalid(format!("case `{case_id}` has no events")));
        }
        Ok(SkTrace { case_id, columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn encode(&self, max_len: usize) -> Result<TraceMatrix> {
        check_length(&self.case_id, self.len(), max_len)?;
        let k = self.columns[0].len();
        let mut data = Tensor::zeros(&[k, max_len]);
        for (tau, col) in self.columns.iter().enumerate() {
            for (j, &p) in col.iter().enumerate() {
                data.set(j, tau, p);
            }
        }
        Ok(TraceMatrix {
            case_id: self.case_id.clone(),
            kind: MatrixKind::Sk,
            data,
            mask: mask_for(self.len(), max_len),
        })
    }
}

fn check_length(case_id: &str, len: usize, max_len: usize) -> Result<()> {
    if len > max_len {
        return Err(Error::invalid(format!(
            "case `{case_id}` has {len} events, longer than max_len {max_len}"
        )));
    }
    if len == 0 {
        return Err(Error::invalid(format!("case `{case_id}` has no events")));
    }
    Ok(())
}

fn mask_for(len: usize, max_len: usize) -> Vec<bool> {
    (0..max_len).map(|i| i < len).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Dk,
    Sk,
    Logits,
}

/// A trace as a `rows x max_len` matrix with a padding mask.
///
/// Real events always occupy a prefix of the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMatrix {
    pub case_id: String,
    pub kind: MatrixKind,
    pub data: Tensor,
    pub mask: Vec<bool>,
}

impl TraceMatrix {
    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn max_len(&self) -> usize {
        self.mask.len()
    }

    /// Number of real (unpadded) events.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, tau: usize) -> Vec<f64> {
        self.data.column(tau)
    }

    /// Back to an [`SkTrace`] over the real columns.
    pub fn to_sk_trace(&self) -> SkTrace {
        SkTrace {
            case_id: self.case_id.clone(),
            columns: (0..self.len()).map(|tau| self.column(tau)).collect(),
        }
    }
}

/// Per real column, the index of the largest entry; ties go to the lowest index.
pub fn argmax_decode(matrix: &TraceMatrix) -> DkTrace {
    let activities = (0..matrix.max_len())
        .filter(|&tau| matrix.mask[tau])
        .map(|tau| {
            let mut best = 0;
            for j in 1..matrix.rows() {
                if matrix.data.at(j, tau) > matrix.data.at(best, tau) {
                    best = j;
                }
            }
            best
        })
        .collect();
    DkTrace::new(matrix.case_id.clone(), activities)
}

/// An aligned ground-truth / observation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePair {
    pub dk: TraceMatrix,
    pub sk: TraceMatrix,
}

impl TracePair {
    pub fn new(dk: TraceMatrix, sk: TraceMatrix) -> Result<Self> {
        if dk.case_id != sk.case_id {
            return Err(Error::invalid(format!(
                "pair case ids differ: `{}` vs `{}`",
                dk.case_id, sk.case_id
            )));
        }
        if dk.mask != sk.mask || dk.data.shape() != sk.data.shape() {
            return Err(Error::invalid(format!(
                "case `{}`: DK and SK matrices are not aligned",
                dk.case_id
            )));
        }
        Ok(TracePair { dk, sk })
    }

    pub fn case_id(&self) -> &str {
        &self.dk.case_id
    }

    pub fn truth(&self) -> DkTrace {
        argmax_decode(&self.dk)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub alphabet: Alphabet,
    pub max_len: usize,
    pub pairs: Vec<TracePair>,
}

impl Dataset {
    pub fn new(alphabet: Alphabet, max_len: usize, pairs: Vec<TracePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("a dataset needs at least one trace pair"));
        }
        for p in &pairs {
            if p.dk.max_len() != max_len || p.dk.rows() != alphabet.len() {
                return Err(Error::invalid(format!(
                    "case `{}` does not match dataset shape {}x{}",
                    p.case_id(),
                    alphabet.len(),
                    max_len
                )));
            }
        }
        Ok(Dataset {
            alphabet,
            max_len,
            pairs,
        })
    }

    /// Pairs DK traces with SK traces by case id.
    pub fn from_traces(
        alphabet: Alphabet,
        max_len: usize,
        dk: &[DkTrace],
        sk: &[SkTrace],
    ) -> Result<Self> {
        let by_case: HashMap<&str, &SkTrace> = sk.iter().map(|s| (s.case_id.as_str(), s)).collect();
        let mut pairs = Vec::with_capacity(dk.len());
        for trace in dk {
            let s = by_case.get(trace.case_id.as_str()).ok_or_else(|| {
                Error::invalid(format!("no SK trace for case `{}`", trace.case_id))
            })?;
            if s.len() != trace.len() {
                return Err(Error::invalid(format!(
                    "case `{}`: DK has {} events but SK has {}",
                    trace.case_id,
                    trace.len(),
                    s.len()
                )));
            }
            pairs.push(TracePair::new(
                trace.encode(alphabet.len(), max_len)?,
                s.encode(max_len)?,
            )?);
        }
        Dataset::new(alphabet, max_len, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn truths(&self) -> Vec<DkTrace> {
        self.pairs.iter().map(TracePair::truth).collect()
    }

    fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        Dataset::new(self.alphabet.clone(), self.max_len, pairs)
    }
}

/// Shuffled split into `(train, test)`; the train side gets
/// `round(N * train_fraction)` pairs.
pub fn split_train_test(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "splitting {n} traces at {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n_train);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

fn parse_event_no(raw: &str) -> Option<usize> {
    raw.strip_prefix(['e', 'E']).unwrap_or(raw).trim().parse().ok()
}

/// Reads a DK log; the alphabet follows first appearance of each label.
/// Re-indexes `traces` so the alphabet lists labels in order of first
/// appearance, the order [`read_dk_log`] recovers from a written log. Labels
/// that never occur keep their relative order at the end.
pub fn first_appearance_order(traces: &[DkTrace], alphabet: &Alphabet) -> Result<(Vec<DkTrace>, Alphabet)> {
    let mut order: Vec<usize> = Vec::with_capacity(alphabet.len());
    for &a in traces.iter().flat_map(|t| &t.activities) {
        if a >= alphabet.len() {
            return Err(Error::invalid(format!("activity index {a} outside an alphabet of {}", alphabet.len())));
        }
        if !order.contains(&a) {
            order.push(a);
        }
    }
    order.extend((0..alphabet.len()).filter(|a| !order.contains(a)).collect::<Vec<_>>());
    let mut remap = vec![0; alphabet.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let relabelled = Alphabet::new(order.iter().map(|&i| alphabet.label(i).to_string()))?;
    let traces = traces
        .iter()
        .map(|t| DkTrace::new(t.case_id.clone(), t.activities.iter().map(|&a| remap[a]).collect()))
        .collect();
    Ok((traces, relabelled))
}

pub fn parse_dk_log(path: impl AsRef<Path>) -> Result<(Vec<DkTrace>, Alphabet)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dk_log(file, &path.display().to_string())
}

pub fn read_dk_log<R: Read>(reader: R, source: &str) -> Result<(Vec<DkTrace>, Alphabet)> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let expected = ["case_id", "event_no", "activity"];
    if headers.len() < 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(perr(1, format!("header must start with `{}`", expected.join(","))));
    }

    let mut labels: Vec<String> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut case_order: Vec<String> = Vec::new();
    let mut cases: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 3 {
            return Err(perr(line, format!("expected 3 fields, got {}", record.len())));
        }
        let (case_id, event_raw, label) = (&record[0], &record[1], &record[2]);
        if case_id.is_empty() || label.is_empty() {
            return Err(perr(line, "empty case id or activity".into()));
        }
        let event_no = parse_event_no(event_raw)
            .ok_or_else(|| perr(line, format!("bad event number `{event_raw}`")))?;
        let activity = *label_index.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            labels.len() - 1
        });
        let events = cases.entry(case_id.to_string()).or_insert_with(|| {
            case_order.push(case_id.to_string());
            Vec::new()
        });
        if events.iter().any(|&(e, _)| e == event_no) {
            return Err(perr(
                line,
                format!("duplicate event `{event_raw}` in case `{case_id}`"),
            ));
        }
        events.push((event_no, activity));
    }
    if case_order.is_empty() {
        return Err(perr(1, "log contains no events".into()));
    }
    let alphabet = Alphabet::new(labels)?;
    let traces = case_order
        .into_iter()
        .map(|case_id| {
            let mut events = cases.remove(&case_id).unwrap_or_default();
            events.sort_by_key(|&(e, _)| e);
            DkTrace::new(case_id, events.into_iter().map(|(_, a)| a).collect())
        })
        .collect();
    Ok((traces, alphabet))
}

pub fn write_dk_log<W: Write>(writer: W, traces: &[DkTrace], alphabet: &Alphabet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let ioerr = |e: csv::Error| Error::invalid(format!("writing DK log: {e}"));
    w.write_record(["case_id", "event_no", "activity"]).map_err(ioerr)?;
    for t in traces {
        for (i, &a) in t.activities.iter().enumerate() {
            let event = format!("e{}", i + 1);
            w.write_record([t.case_id.as_str(), event.as_str(), alphabet.label(a)])
                .map_err(ioerr)?;
        }
    }
    w.flush().map_err(|e| Error::invalid(format!("writing DK log: {e}")))?;
    Ok(())
}

pub fn save_dk_log(path: impl AsRef<Path>, traces: &[DkTrace], alphabet: &Alphabet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dk_log(file, traces, alphabet)
}

#[derive(Serialize, Deserialize)]
struct SkRecord {
    case_id: String,
    events: Vec<Vec<f64>>,
}

pub fn parse_sk_log(path: impl AsRef<Path>, alphabet: &Alphabet) -> Result<Vec<SkTrace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sk_log(BufReader::new(file), alphabet, &path.display().to_string())
}

pub fn read_sk_log<R: BufRead>(reader: R, alphabet: &Alphabet, source: &str) -> Result<Vec<SkTrace>> {
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SkRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        traces.push(SkTrace::new(rec.case_id, rec.events, alphabet.len())?);
    }
    if traces.is_empty() {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 1,
            msg: "log contains no cases".into(),
        });
    }
    Ok(traces)
}

pub fn write_sk_log<W: Write>(mut writer: W, traces: &[SkTrace]) -> Result<()> {
    for t in traces {
        let rec = SkRecord {
            case_id: t.case_id.clone(),
            events: t.columns.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<sk log>", e))?;
    }
    Ok(())
}

pub fn save_sk_log(path: impl AsRef<Path>, traces: &[SkTrace]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_sk_log(std::io::BufWriter::new(file), traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TABLE2: &str = "case_id,event_no,activity,relative_time
1,e1,A,00:00
1,e2,B,00:10
1,e3,E,00:40
1,e4,C,01:10
1,e5,D,01:30
1,e6,E,01:45
";

    fn abcde() -> Alphabet {
        Alphabet::new(["A", "B", "C", "D", "E"]).unwrap()
    }

    #[test]
    fn table2_excerpt_parses() {
        let (traces, alphabet) = read_dk_log(TABLE2.as_bytes(), "t2").unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].case_id, "1");
        let labels: Vec<&str> = traces[0].activities.iter().map(|&a| alphabet.label(a)).collect();
        assert_eq!(labels, ["A", "B", "E", "C", "D", "E"]);
        // first appearance
        assert_eq!(alphabet.labels(), ["A", "B", "E", "C", "D"]);
    }

    #[test]
    fn single_event_case_and_label_order() {
        let log = "case_id,event_no,activity\nc1,e1,B\nc2,e1,A\nc2,e2,B\n";
        let (traces, alphabet) = read_dk_log(log.as_bytes(), "x").unwrap();
        assert_eq!(traces[0].activities, vec![0]);
        assert_eq!(alphabet.labels(), ["B", "A"]);
    }

    #[test]
    fn events_are_ordered_by_number() {
        let log = "case_id,event_no,activity\nc,e2,B\nc,e10,C\nc,e1,A\n";
        let (traces, alphabet) = read_dk_log(log.as_bytes(), "x").unwrap();
        let labels: Vec<&str> = traces[0].activities.iter().map(|&a| alphabet.label(a)).collect();
        assert_eq!(labels, ["A", "B", "C"]);
    }

    #[test]
    fn dk_parse_errors() {
        let empty = "case_id,event_no,activity\n";
        assert!(matches!(read_dk_log(empty.as_bytes(), "x"), Err(Error::Parse { .. })));
        assert!(read_dk_log("".as_bytes(), "x").is_err());

        let dup = "case_id,event_no,activity\nc,e1,A\nc,e1,B\n";
        match read_dk_log(dup.as_bytes(), "x") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let bad = "case_id,event_no,activity\nc,e1,A\nc,1\n";
        match read_dk_log(bad.as_bytes(), "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        let bad_no = "case_id,event_no,activity\nc,ex,A\n";
        assert!(matches!(read_dk_log(bad_no.as_bytes(), "x"), Err(Error::Parse { line: 2, .. })));

        let one_label = "case_id,event_no,activity\nc,e1,A\n";
        assert!(read_dk_log(one_label.as_bytes(), "x").is_err());
    }

    #[test]
    fn table3_sk_excerpt() {
        let rows = "{\"case_id\":\"1\",\"events\":[[0.33,0.03,0.15,0.15,0.34],[0.2,0.25,0.15,0.2,0.2],[0.5,0.1,0.1,0.1,0.2],[0.05,0.15,0.55,0.05,0.2],[0.1,0.05,0.25,0.45,0.15],[0.1,0.05,0.25,0.25,0.35]]}\n";
        let sk = read_sk_log(rows.as_bytes(), &abcde(), "t3").unwrap();
        assert_eq!(sk.len(), 1);
        let first = &sk[0].columns[0];
        for (a, b) in first.iter().zip([0.33, 0.03, 0.15, 0.15, 0.34]) {
            assert!((a - b).abs() < 1e-12);
        }
        for col in &sk[0].columns {
            assert!((col.iter().sum::<f64>() - 1.0).abs() < SK_SUM_TOLERANCE);
        }
    }

    #[test]
    fn one_hot_sk_equals_dk_encoding() {
        let rows = "{\"case_id\":\"7\",\"events\":[[0,1,0],[1,0,0]]}\n";
        let alphabet = Alphabet::new(["x", "y", "z"]).unwrap();
        let sk = read_sk_log(rows.as_bytes(), &alphabet, "x").unwrap();
        let dk = DkTrace::new("7", vec![1, 0]);
        assert_eq!(sk[0].encode(4).unwrap().data, dk.encode(3, 4).unwrap().data);
    }

    #[test]
    fn sk_validation_errors() {
        let alphabet = abcde();
        let over = "{\"case_id\":\"1\",\"events\":[[0.5,0.5,0.1,0,0]]}\n";
        match read_sk_log(over.as_bytes(), &alphabet, "x") {
            Err(Error::InvalidEvent { case_id, event, .. }) => {
                assert_eq!(case_id, "1");
                assert_eq!(event, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let negative = "{\"case_id\":\"1\",\"events\":[[1.2,-0.2,0,0,0]]}\n";
        assert!(read_sk_log(negative.as_bytes(), &alphabet, "x").is_err());
        let short = "{\"case_id\":\"1\",\"events\":[[0.5,0.5]]}\n";
        assert!(read_sk_log(short.as_bytes(), &alphabet, "x").is_err());
        assert!(matches!(read_sk_log("{oops".as_bytes(), &alphabet, "x"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn encode_pads_and_masks() {
        let m = DkTrace::new("c", vec![1, 0]).encode(3, 4).unwrap();
        assert_eq!(m.mask, vec![true, true, false, false]);
        assert_eq!(m.column(2), vec![0.0; 3]);
        assert_eq!(m.column(3), vec![0.0; 3]);
        assert_eq!(m.column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_rejects_overlong_traces() {
        assert!(DkTrace::new("c", vec![0, 1, 0]).encode(2, 2).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let sk = SkTrace::new("c", vec![vec![0.5, 0.5, 0.0, 0.0, 0.0]], 5).unwrap();
        assert_eq!(argmax_decode(&sk.encode(1).unwrap()).activities, vec![0]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let alphabet = Alphabet::new(["a", "b"]).unwrap();
        let make = |n: usize| {
            let dk: Vec<DkTrace> = (0..n).map(|i| DkTrace::new(i.to_string(), vec![i % 2])).collect();
            let sk: Vec<SkTrace> = dk
                .iter()
                .map(|d| {
                    let mut col = vec![0.0; 2];
                    col[d.activities[0]] = 1.0;
                    SkTrace::new(d.case_id.clone(), vec![col], 2).unwrap()
                })
                .collect();
            Dataset::from_traces(alphabet.clone(), 2, &dk, &sk).unwrap()
        };
        let (tr, te) = split_train_test(&make(100), 0.75, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (75, 25));

        let four = make(4);
        let a = split_train_test(&four, 0.75, 9).unwrap();
        let b = split_train_test(&four, 0.75, 9).unwrap();
        assert_eq!(a, b);
        let ids = |d: &Dataset| d.pairs.iter().map(|p| p.case_id().to_string()).collect::<Vec<_>>();
        let mut all = [ids(&a.0), ids(&a.1)].concat();
        all.sort();
        assert_eq!(all, ["0", "1", "2", "3"]);

        assert!(split_train_test(&make(1), 0.75, 0).is_err());
        assert!(split_train_test(&four, 1.0, 0).is_err());
    }

    #[test]
    fn dk_log_roundtrip() {
        let (traces, alphabet) = read_dk_log(TABLE2.as_bytes(), "t2").unwrap();
        let mut buf = Vec::new();
        write_dk_log(&mut buf, &traces, &alphabet).unwrap();
        let (again, alphabet2) = read_dk_log(buf.as_slice(), "buf").unwrap();
        assert_eq!(again, traces);
        assert_eq!(alphabet2, alphabet);
    }
}
