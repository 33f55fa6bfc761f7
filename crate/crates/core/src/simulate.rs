//! A small stochastic process used to generate synthetic DK logs.
//!
//! Traces follow `A (B|C) D [(B|C) D]* E`: after each `D` the process loops
//! back to the choice with probability `loop_prob`, as long as the trace
//! still fits in `max_len`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{first_appearance_order, Alphabet, DkTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyProcess {
    /// Probability of taking `B` rather than `C` at each choice.
    pub choice_prob: f64,
    pub loop_prob: f64,
    pub max_len: usize,
}

impl Default for ToyProcess {
    fn default() -> Self {
        ToyProcess {
            choice_prob: 0.5,
            loop_prob: 0.6,
            max_len: 32,
        }
    }
}

pub const TOY_LABELS: [&str; 5] = ["A", "B", "C", "D", "E"];

impl ToyProcess {
    pub fn alphabet() -> Alphabet {
        Alphabet::new(TOY_LABELS).expect("static labels are valid")
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [("choice_prob", self.choice_prob), ("loop_prob", self.loop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.max_len < 4 {
            return Err(Error::invalid(format!(
                "max_len must be at least 4 to fit one loop iteration, got {}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn sample_trace(&self, case_id: impl Into<String>, rng: &mut ChaCha8Rng) -> DkTrace {
        let mut acts = vec![0];
        loop {
            acts.push(if rng.gen_bool(self.choice_prob) { 1 } else { 2 });
            acts.push(3);
            // another iteration needs two more slots plus the final E
            if acts.len() + 3 > self.max_len || !rng.gen_bool(self.loop_prob) {
                break;
            }
        }
        acts.push(4);
        DkTrace::new(case_id, acts)
    }

    /// `n` traces with case ids `1..=n`. The alphabet is in first-appearance
    /// order, so writing the log and parsing it back is lossless.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<(Vec<DkTrace>, Alphabet)> {
        self.validate()?;
        if n == 0 {
            return Err(Error::invalid("cannot simulate an empty log"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traces: Vec<DkTrace> = (1..=n).map(|i| self.sample_trace(i.to_string(), &mut rng)).collect();
        first_appearance_order(&traces, &Self::alphabet())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traces_follow_the_process() {
        let p = ToyProcess::default();
        let (traces, alphabet) = p.simulate(500, 1).unwrap();
        assert_eq!(alphabet.len(), 5);
        let mut lengths = std::collections::BTreeSet::new();
        for t in &traces {
            let a: Vec<&str> = t.activities.iter().map(|&i| alphabet.label(i)).collect();
            assert!(a.len() <= p.max_len && a.len() >= 4);
            assert_eq!(a[0], "A");
            assert_eq!(*a.last().unwrap(), "E");
            for (i, &x) in a[1..a.len() - 1].iter().enumerate() {
                if i % 2 == 0 {
                    assert!(x == "B" || x == "C");
                } else {
                    assert_eq!(x, "D");
                }
            }
            lengths.insert(a.len());
        }
        assert!(lengths.len() > 3, "loops should vary trace length");
    }

    #[test]
    fn length_cap_holds_with_certain_looping() {
        let p = ToyProcess { loop_prob: 1.0, max_len: 9, ..ToyProcess::default() };
        let (traces, _) = p.simulate(5, 0).unwrap();
        assert!(traces.iter().all(|t| t.len() == 8));
    }

    #[test]
    fn written_log_parses_back_identically() {
        let (traces, alphabet) = ToyProcess::default().simulate(30, 4).unwrap();
        let mut buf = Vec::new();
        crate::event_log::write_dk_log(&mut buf, &traces, &alphabet).unwrap();
        let (back, parsed) = crate::event_log::read_dk_log(buf.as_slice(), "mem").unwrap();
        assert_eq!(parsed, alphabet);
        assert_eq!(back, traces);
    }

    #[test]
    fn simulation_is_deterministic() {
        let p = ToyProcess::default();
        assert_eq!(p.simulate(20, 3).unwrap().0, p.simulate(20, 3).unwrap().0);
        assert!(p.simulate(0, 3).is_err());
    }
}
