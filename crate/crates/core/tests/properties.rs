use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracediff_core::denoiser::encoding::{decode_logits, encode_dk, encode_sk};
use tracediff_core::eval::compute_metrics;
use tracediff_core::event_log::{read_dk_log, read_sk_log, split_train_test, write_dk_log, write_sk_log};
use tracediff_core::noise_synth::{mix, synthesize_sk_log, DirichletParams, NoiseProfile};
use tracediff_core::process_model::mine_dfg_flow_matrix;
use tracediff_core::{argmax_decode, Alphabet, Dataset, DkTrace};

fn alphabet(k: usize) -> Alphabet {
    Alphabet::new((0..k).map(|i| format!("act{i}"))).unwrap()
}

/// `(k, traces)` with every trace at most 12 events long.
fn log() -> impl Strategy<Value = (usize, Vec<DkTrace>)> {
    (2usize..7).prop_flat_map(|k| {
        let traces = prop::collection::vec(prop::collection::vec(0..k, 1..=12), 1..10).prop_map(|ts| {
            ts.into_iter()
                .enumerate()
                .map(|(i, a)| DkTrace::new(format!("c{i}"), a))
                .collect::<Vec<_>>()
        });
        (Just(k), traces)
    })
}

fn noisy(k: usize, traces: &[DkTrace], lambda: f64, alpha: f64, seed: u64) -> Dataset {
    synthesize_sk_log(traces, &alphabet(k), 12, &NoiseProfile::Constant(lambda), &DirichletParams::uniform(k, alpha, seed).unwrap())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dk_encoding_round_trips((k, traces) in log()) {
        for t in &traces {
            let m = t.encode(k, 12).unwrap();
            prop_assert_eq!(&argmax_decode(&m), t);
            // the network encoding decodes back too
            prop_assert_eq!(&decode_logits(&encode_dk(&m).unwrap(), &m.mask), &t.activities);
            for tau in t.len()..12 {
                prop_assert!(m.column(tau).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn synthesized_columns_are_distributions(
        (k, traces) in log(),
        lambda in 0.0f64..=1.0,
        alpha in 0.05f64..5.0,
        seed in any::<u64>(),
    ) {
        let ds = noisy(k, &traces, lambda, alpha, seed);
        for p in &ds.pairs {
            for tau in 0..12 {
                let col = p.sk.column(tau);
                if p.sk.mask[tau] {
                    prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(col.iter().all(|&v| v >= 0.0));
                } else {
                    prop_assert!(col.iter().all(|&v| v == 0.0));
                }
            }
            let sk = encode_sk(&p.sk).unwrap();
            prop_assert!(sk.is_finite());
        }
    }

    #[test]
    fn majority_signal_survives_mixing(
        lambda in 0.0f64..0.4999,
        truth in 0usize..5,
        pi in prop::collection::vec(0.0f64..1.0, 5),
    ) {
        let total: f64 = pi.iter().sum::<f64>().max(1e-9);
        let pi: Vec<f64> = pi.iter().map(|v| v / total).collect();
        let mut d = vec![0.0; 5];
        d[truth] = 1.0;
        let (r, _) = mix(&d, &pi, lambda);
        let best = (0..5).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
        prop_assert_eq!(best, truth);
    }

    #[test]
    fn metrics_ignore_trace_order((k, traces) in log(), seed in any::<u64>()) {
        let ds = noisy(k, &traces, 0.4, 1.0, seed);
        let preds: Vec<DkTrace> = ds.pairs.iter().map(|p| argmax_decode(&p.sk)).collect();
        let truths = ds.truths();
        let base = compute_metrics(&preds, &truths, k).unwrap();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|&i| truths[i].clone()).collect();
        let shuffled = compute_metrics(&p2, &t2, k).unwrap();
        prop_assert!((base.accuracy - shuffled.accuracy).abs() < 1e-12);
        prop_assert!((base.macro_precision - shuffled.macro_precision).abs() < 1e-12);
        prop_assert!((base.macro_recall - shuffled.macro_recall).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.accuracy));
    }

    #[test]
    fn mining_is_idempotent_and_replays_its_input((k, traces) in log()) {
        let a = alphabet(k);
        let flow = mine_dfg_flow_matrix(&traces, &a).unwrap();
        prop_assert!(flow.is_binary());
        let doubled: Vec<_> = traces.iter().chain(&traces).cloned().collect();
        prop_assert_eq!(&mine_dfg_flow_matrix(&doubled, &a).unwrap(), &flow);
        for t in &traces {
            prop_assert!(flow.replays(t));
        }
    }

    #[test]
    fn split_partitions_the_log((k, traces) in log(), frac in 0.1f64..0.9, seed in any::<u64>()) {
        let ds = noisy(k, &traces, 0.7, 1.0, seed);
        let n_train = (ds.len() as f64 * frac).round() as usize;
        if n_train == 0 || n_train == ds.len() {
            prop_assert!(split_train_test(&ds, frac, seed).is_err());
            return Ok(());
        }
        let (train, test) = split_train_test(&ds, frac, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), ds.len());
        let mut ids: Vec<String> = train.pairs.iter().chain(&test.pairs).map(|p| p.case_id().to_string()).collect();
        ids.sort();
        let mut all: Vec<String> = ds.pairs.iter().map(|p| p.case_id().to_string()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
        let again = split_train_test(&ds, frac, seed).unwrap();
        prop_assert_eq!(train.truths(), again.0.truths());
    }

    #[test]
    fn logs_round_trip_through_files((k, traces) in log(), seed in any::<u64>()) {
        // a log that uses one activity cannot define an alphabet
        let mut used: Vec<usize> = traces.iter().flat_map(|t| t.activities.clone()).collect();
        used.sort();
        used.dedup();
        prop_assume!(used.len() >= 2);
        let a = alphabet(k);
        let mut buf = Vec::new();
        write_dk_log(&mut buf, &traces, &a).unwrap();
        let (back, a2) = read_dk_log(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back.len(), traces.len());
        for (x, y) in back.iter().zip(&traces) {
            prop_assert_eq!(&x.case_id, &y.case_id);
            let lx: Vec<&str> = x.activities.iter().map(|&i| a2.label(i)).collect();
            let ly: Vec<&str> = y.activities.iter().map(|&i| a.label(i)).collect();
            prop_assert_eq!(lx, ly);
        }

        let ds = noisy(k, &traces, 0.5, 1.0, seed);
        let sk: Vec<_> = ds.pairs.iter().map(|p| p.sk.to_sk_trace()).collect();
        let mut buf = Vec::new();
        write_sk_log(&mut buf, &sk).unwrap();
        let back = read_sk_log(buf.as_slice(), &a, "mem").unwrap();
        prop_assert_eq!(back, sk);
    }
}
