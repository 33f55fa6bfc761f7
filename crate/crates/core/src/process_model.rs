//! Activity-level flow matrices: `F[j][k] = 1` iff activity `j` may be
//! directly followed by activity `k`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use tracediff_tensor::Tensor;

use crate::error::{Error, Result};
use crate::event_log::{Alphabet, DkTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    data: Tensor,
}

impl FlowMatrix {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::invalid(format!("flow matrix must be square, got {s:?}")));
        }
        if data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("flow matrix entries must lie in [0, 1]"));
        }
        Ok(FlowMatrix { data })
    }

    pub fn k(&self) -> usize {
        self.data.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.data.at(from, to) == 1.0
    }

    pub fn is_binary(&self) -> bool {
        self.data.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn edge_count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Whether every adjacent pair in `trace` is an edge.
    pub fn replays(&self, trace: &DkTrace) -> bool {
        trace.activities.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }
}

pub fn mine_dfg_flow_matrix(train: &[DkTrace], alphabet: &Alphabet) -> Result<FlowMatrix> {
    if train.is_empty() {
        return Err(Error::invalid("cannot mine a flow matrix from an empty log"));
    }
    let k = alphabet.len();
    let mut data = Tensor::zeros(&[k, k]);
    for t in train {
        if let Some(&a) = t.activities.iter().find(|&&a| a >= k) {
            return Err(Error::invalid(format!(
                "case `{}` uses activity index {a} outside the alphabet",
                t.case_id
            )));
        }
        for w in t.activities.windows(2) {
            data.set(w[0], w[1], 1.0);
        }
    }
    FlowMatrix::new(data)
}

pub fn load_flow_matrix(path: impl AsRef<Path>, alphabet: &Alphabet) -> Result<FlowMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_flow_matrix(file, alphabet, &path.display().to_string())
}

/// Reads a labelled 0/1 CSV and reorders it to the alphabet's order.
pub fn read_flow_matrix<R: Read>(reader: R, alphabet: &Alphabet, source: &str) -> Result<FlowMatrix> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let k = alphabet.len();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| perr(1, "empty flow matrix file".into()))?
        .map_err(|e| perr(1, e.to_string()))?;
    let columns = header
        .iter()
        .skip(1)
        .map(|label| {
            alphabet
                .index_of(label)
                .ok_or_else(|| perr(1, format!("unknown activity `{label}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if columns.len() != k {
        return Err(perr(1, format!("expected {k} columns, got {}", columns.len())));
    }

    let mut data = Tensor::zeros(&[k, k]);
    let mut seen = vec![false; k];
    let mut count = 0;
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| perr(line, e.to_string()))?;
        if row.len() != k + 1 {
            return Err(perr(line, format!("expected {} fields, got {}", k + 1, row.len())));
        }
        let from = alphabet
            .index_of(&row[0])
            .ok_or_else(|| perr(line, format!("unknown activity `{}`", &row[0])))?;
        if std::mem::replace(&mut seen[from], true) {
            return Err(perr(line, format!("duplicate row for `{}`", &row[0])));
        }
        for (c, raw) in row.iter().skip(1).enumerate() {
            let v = match raw {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(perr(line, format!("entry `{other}` is not 0 or 1")));
                }
            };
            data.set(from, columns[c], v);
        }
        count += 1;
    }
    if count != k {
        return Err(perr(count + 1, format!("expected {k} rows, got {count}")));
    }
    FlowMatrix::new(data)
}

pub fn write_flow_matrix<W: Write>(writer: W, flow: &FlowMatrix, alphabet: &Alphabet) -> Result<()> {
    if flow.k() != alphabet.len() {
        return Err(Error::invalid("flow matrix and alphabet sizes differ"));
    }
    let werr = |e: csv::Error| Error::invalid(format!("writing flow matrix: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![String::new()];
    header.extend(alphabet.labels().iter().cloned());
    w.write_record(&header).map_err(werr)?;
    for j in 0..flow.k() {
        let mut row = vec![alphabet.label(j).to_string()];
        row.extend((0..flow.k()).map(|k| format!("{}", flow.data.at(j, k))));
        w.write_record(&row).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing flow matrix: {e}")))?;
    Ok(())
}

pub fn save_flow_matrix(path: impl AsRef<Path>, flow: &FlowMatrix, alphabet: &Alphabet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_flow_matrix(file, flow, alphabet)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Alphabet {
        Alphabet::new(["A", "B", "C"]).unwrap()
    }

    #[test]
    fn mines_adjacent_pairs() {
        let traces = [DkTrace::new("1", vec![0, 1, 2]), DkTrace::new("2", vec![0, 2])];
        let f = mine_dfg_flow_matrix(&traces, &abc()).unwrap();
        let edges: Vec<(usize, usize)> = (0..3)
            .flat_map(|j| (0..3).map(move |k| (j, k)))
            .filter(|&(j, k)| f.has_edge(j, k))
            .collect();
        assert_eq!(edges, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn single_event_and_self_loop() {
        let f = mine_dfg_flow_matrix(&[DkTrace::new("1", vec![0])], &abc()).unwrap();
        assert_eq!(f.edge_count(), 0);
        let f = mine_dfg_flow_matrix(&[DkTrace::new("1", vec![0, 0])], &abc()).unwrap();
        assert!(f.has_edge(0, 0));
        assert_eq!(f.edge_count(), 1);
        assert!(mine_dfg_flow_matrix(&[], &abc()).is_err());
    }

    #[test]
    fn loads_and_reorders_labels() {
        let csv = ",C,A,B\nB,0,0,1\nA,0,0,1\nC,1,0,0\n";
        let f = read_flow_matrix(csv.as_bytes(), &abc(), "f").unwrap();
        assert!(f.has_edge(1, 1));
        assert!(f.has_edge(0, 1));
        assert!(f.has_edge(2, 2));
        assert_eq!(f.edge_count(), 3);
    }

    #[test]
    fn load_errors() {
        let alphabet = abc();
        let unknown = ",A,B,F\nA,0,0,0\nB,0,0,0\nF,0,0,0\n";
        assert!(read_flow_matrix(unknown.as_bytes(), &alphabet, "f").is_err());
        let fractional = ",A,B,C\nA,0,0.5,0\nB,0,0,0\nC,0,0,0\n";
        assert!(read_flow_matrix(fractional.as_bytes(), &alphabet, "f").is_err());
        let small = ",A,B\nA,0,1\nB,0,0\n";
        assert!(read_flow_matrix(small.as_bytes(), &alphabet, "f").is_err());
        let missing_row = ",A,B,C\nA,0,1,0\nB,0,0,0\n";
        assert!(read_flow_matrix(missing_row.as_bytes(), &alphabet, "f").is_err());
    }

    #[test]
    fn write_read_roundtrip() {
        let traces = [DkTrace::new("1", vec![2, 0, 1, 1])];
        let f = mine_dfg_flow_matrix(&traces, &abc()).unwrap();
        let mut buf = Vec::new();
        write_flow_matrix(&mut buf, &f, &abc()).unwrap();
        assert_eq!(read_flow_matrix(buf.as_slice(), &abc(), "buf").unwrap(), f);
    }
}
