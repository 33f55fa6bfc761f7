//! Finite-difference checks for every primitive over many random seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracediff_tensor::{
    check_gradients, Bindings, CrossAttention, GradCheckConfig, Parameters, Result, Tape, Tensor, Var,
};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(tape.shape(out), &mut rng));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Var], u64) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = check_gradients(
            &inputs,
            |tape, vars| {
                let out = f(tape, vars, seed)?;
                if tape.value(out).is_scalar() {
                    Ok(out)
                } else {
                    weighted_sum(tape, out, seed)
                }
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[3, 4]], |t, v, _| t.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], |t, v, _| t.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], |t, v, _| t.mul(v[0], v[1]));
    check("scale", &[&[5]], |t, v, _| Ok(t.scale(v[0], -2.5)));
    check("silu", &[&[4, 3]], |t, v, _| Ok(t.silu(v[0])));
    check("sigmoid", &[&[4, 3]], |t, v, _| Ok(t.sigmoid(v[0])));
    check("add_bias", &[&[3, 5], &[3]], |t, v, _| t.add_bias(v[0], v[1]));
    check("reshape", &[&[2, 6]], |t, v, _| t.reshape(v[0], &[3, 4]));
}

#[test]
fn linear_algebra_ops() {
    check("matmul", &[&[3, 4], &[4, 2]], |t, v, _| t.matmul(v[0], v[1]));
    check("transpose", &[&[3, 5]], |t, v, _| t.transpose(v[0]));
}

#[test]
fn sequence_ops() {
    check("conv1d k3", &[&[3, 7], &[4, 3, 3]], |t, v, _| t.conv1d(v[0], v[1]));
    check("conv1d k5", &[&[2, 6], &[3, 2, 5]], |t, v, _| t.conv1d(v[0], v[1]));
    check("conv1d k1", &[&[2, 6], &[3, 2, 1]], |t, v, _| t.conv1d(v[0], v[1]));
    check("conv_transpose2", &[&[3, 4], &[3, 2, 2]], |t, v, _| t.conv_transpose2(v[0], v[1]));
    check("maxpool1d", &[&[3, 8]], |t, v, _| t.maxpool1d(v[0]));
    check("upsample1d", &[&[3, 4]], |t, v, _| t.upsample1d(v[0]));
}

#[test]
fn normalisation_and_reduction_ops() {
    check("softmax axis 0", &[&[4, 3]], |t, v, _| t.softmax(v[0], 0));
    check("softmax axis 1", &[&[4, 3]], |t, v, _| t.softmax(v[0], 1));
    check("log_softmax axis 0", &[&[4, 3]], |t, v, _| t.log_softmax(v[0], 0));
    check("log_softmax axis 1", &[&[4, 3]], |t, v, _| t.log_softmax(v[0], 1));
    check("mean", &[&[3, 3]], |t, v, _| Ok(t.mean(v[0])));
    check("sum", &[&[3, 3]], |t, v, _| Ok(t.sum(v[0])));
}

#[test]
fn structural_ops() {
    check("concat axis 0", &[&[2, 3], &[1, 3]], |t, v, _| t.concat(&[v[0], v[1]], 0));
    check("concat axis 1", &[&[2, 3], &[2, 2]], |t, v, _| t.concat(&[v[0], v[1]], 1));
    check("slice axis 0", &[&[4, 3]], |t, v, _| t.slice(v[0], 0, 1, 3));
    check("slice axis 1", &[&[4, 3]], |t, v, _| t.slice(v[0], 1, 2, 3));
}

#[test]
fn losses() {
    check("cross_entropy", &[&[5, 6]], |t, v, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // random soft targets, one padded column
        let mut target = Tensor::from_fn(&[5, 6], |_| rng.gen_range(0.0..1.0));
        for c in 0..6 {
            let s: f64 = (0..5).map(|r| target.at(r, c)).sum();
            for r in 0..5 {
                let v = target.at(r, c) / s;
                target.set(r, c, v);
            }
        }
        t.cross_entropy(v[0], &target, &[true, true, false, true, true, true])
    });
    check("bce_with_logits", &[&[4, 4]], |t, v, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let target = Tensor::from_fn(&[4, 4], |_| f64::from(rng.gen_bool(0.4) as u8));
        t.bce_with_logits(v[0], &target)
    });
}

#[test]
fn cross_attention_block() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::new();
        let heads = 1 + (seed as usize % 2);
        let attn = CrossAttention::new(&mut params, "attn", 4, 3, 3, heads, &mut rng);
        let queries = random(&[4, 5], &mut rng);
        let context = random(&[3, 6], &mut rng);
        let mut inputs: Vec<Tensor> = params.iter().map(|(_, _, t)| t.clone()).collect();
        let n = inputs.len();
        inputs.push(queries);
        inputs.push(context);
        let report = check_gradients(
            &inputs,
            |tape, vars| {
                let b = Bindings::from_vars(vars[..n].to_vec());
                let out = attn.forward(tape, &b, vars[n], vars[n + 1])?;
                weighted_sum(tape, out.output, seed)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "cross attention: max relative error {worst:e}");
}

#[test]
fn softmax_weighted_sum_matches_finite_differences_tightly() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[6], &mut rng);
        let w = random(&[6], &mut rng);
        let report = check_gradients(
            &[x],
            |tape, v| {
                let s = tape.softmax(v[0], 0)?;
                let wc = tape.constant(w.clone());
                let p = tape.mul(s, wc)?;
                Ok(tape.sum(p))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "seed {seed}: {:e}", report.max_rel_error);
    }
}

#[test]
fn softmax_outputs_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let x = Tensor::from_fn(&[4, 7], |_| rng.gen_range(-30.0..30.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        for axis in 0..2 {
            let s = tape.softmax(v, axis).unwrap();
            let y = tape.value(s);
            assert!(y.data().iter().all(|&p| p > 0.0 || p == 0.0 && p.is_finite()));
            let (outer, inner) = if axis == 0 { (7, 4) } else { (4, 7) };
            for o in 0..outer {
                let total: f64 = (0..inner)
                    .map(|i| if axis == 0 { y.at(i, o) } else { y.at(o, i) })
                    .sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn engine_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut params = Parameters::new();
        let attn = CrossAttention::new(&mut params, "a", 4, 4, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let q = tape.constant(random(&[4, 8], &mut rng));
        let k = tape.constant(random(&[4, 3], &mut rng));
        let out = attn.forward(&mut tape, &b, q, k).unwrap();
        let loss = tape.mean(out.output);
        tape.backward(loss).unwrap();
        (
            tape.value(loss).data().to_vec(),
            b.vars().iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
