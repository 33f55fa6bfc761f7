//! Finite-difference checks of the engine primitives and the full denoiser
//! loss, shared by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracediff_tensor::{
    check_gradients, Bindings, CrossAttention, GradCheckConfig, GradCheckReport, Parameters, Tape, Tensor, TensorError, Var,
};

use crate::denoiser::{DenoiserConfig, DenoiserModel, Variant};
use crate::diffusion::{training_loss, Example};
use crate::error::Result;
use crate::process_model::FlowMatrix;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl LayerCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Contracts a tensor-valued output with fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> tracediff_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(tape.shape(out), &mut rng));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape, &[Var]) -> tracediff_tensor::Result<Var>;

fn primitive_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("conv1d", vec![vec![3, 8], vec![4, 3, 3]], |t, v| t.conv1d(v[0], v[1])),
        ("conv_transpose2", vec![vec![3, 4], vec![3, 2, 2]], |t, v| t.conv_transpose2(v[0], v[1])),
        ("maxpool1d", vec![vec![3, 8]], |t, v| t.maxpool1d(v[0])),
        ("upsample1d", vec![vec![3, 4]], |t, v| t.upsample1d(v[0])),
        ("softmax", vec![vec![4, 5]], |t, v| t.softmax(v[0], 0)),
        ("log_softmax", vec![vec![4, 5]], |t, v| t.log_softmax(v[0], 1)),
        ("mean", vec![vec![3, 3]], |t, v| Ok(t.mean(v[0]))),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![4, 3]], |t, v| t.slice(v[0], 0, 1, 3)),
        ("silu", vec![vec![4, 3]], |t, v| Ok(t.silu(v[0]))),
        ("sigmoid", vec![vec![4, 3]], |t, v| Ok(t.sigmoid(v[0]))),
        ("add_bias", vec![vec![3, 5], vec![3]], |t, v| t.add_bias(v[0], v[1])),
        ("transpose", vec![vec![3, 5]], |t, v| t.transpose(v[0])),
    ]
}

pub fn primitive_checks(seeds: u64) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    for (name, shapes, op) in primitive_table() {
        let mut total: Option<GradCheckReport> = None;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let r = check_gradients(
                &inputs,
                |tape, vars| {
                    let y = op(tape, vars)?;
                    if tape.value(y).is_scalar() {
                        Ok(y)
                    } else {
                        weighted_sum(tape, y, seed)
                    }
                },
                &GradCheckConfig::default(),
            )?;
            match &mut total {
                Some(t) => t.merge(&r),
                None => total = Some(r),
            }
        }
        out.push(LayerCheck {
            name: name.to_string(),
            tolerance: PRIMITIVE_TOLERANCE,
            report: total.expect("at least one seed"),
        });
    }
    out.push(loss_check("cross_entropy", seeds, true)?);
    out.push(loss_check("bce_with_logits", seeds, false)?);
    out.push(attention_check(seeds)?);
    Ok(out)
}

fn loss_check(name: &str, seeds: u64, ce: bool) -> Result<LayerCheck> {
    let mut total: Option<GradCheckReport> = None;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[4, 5], &mut rng);
        let target = if ce {
            let mut t = Tensor::from_fn(&[4, 5], |_| rng.gen_range(0.0..1.0));
            for c in 0..5 {
                let s: f64 = (0..4).map(|r| t.at(r, c)).sum();
                for r in 0..4 {
                    let v = t.at(r, c) / s;
                    t.set(r, c, v);
                }
            }
            t
        } else {
            Tensor::from_fn(&[4, 5], |_| f64::from(rng.gen_bool(0.5) as u8))
        };
        let mask = [true, false, true, true, true];
        let r = check_gradients(
            &[logits],
            |tape, v| {
                if ce {
                    tape.cross_entropy(v[0], &target, &mask)
                } else {
                    tape.bce_with_logits(v[0], &target)
                }
            },
            &GradCheckConfig::default(),
        )?;
        match &mut total {
            Some(t) => t.merge(&r),
            None => total = Some(r),
        }
    }
    Ok(LayerCheck {
        name: name.to_string(),
        tolerance: PRIMITIVE_TOLERANCE,
        report: total.expect("at least one seed"),
    })
}

fn attention_check(seeds: u64) -> Result<LayerCheck> {
    let mut total: Option<GradCheckReport> = None;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::new();
        let attn = CrossAttention::new(&mut params, "attn", 4, 3, 3, 1, &mut rng);
        let mut inputs: Vec<Tensor> = params.iter().map(|(_, _, t)| t.clone()).collect();
        let n = inputs.len();
        inputs.push(random(&[4, 6], &mut rng));
        inputs.push(random(&[3, 5], &mut rng));
        let r = check_gradients(
            &inputs,
            |tape, vars| {
                let b = Bindings::from_vars(vars[..n].to_vec());
                let out = attn.forward(tape, &b, vars[n], vars[n + 1])?;
                weighted_sum(tape, out.output, seed)
            },
            &GradCheckConfig::default(),
        )?;
        match &mut total {
            Some(t) => t.merge(&r),
            None => total = Some(r),
        }
    }
    Ok(LayerCheck {
        name: "cross_attention".into(),
        tolerance: PRIMITIVE_TOLERANCE,
        report: total.expect("at least one seed"),
    })
}

/// The toy configuration for whole-model checks: 3 activities, length 8,
/// one resolution level.
pub fn toy_config(variant: Variant, seed: u64) -> DenoiserConfig {
    DenoiserConfig {
        num_activities: 3,
        max_len: 8,
        levels: 1,
        base_channels: 4,
        time_embed_dim: 4,
        attention_head_dim: 4,
        heads: 1,
        kernel: 3,
        upsample: crate::denoiser::Upsample::Nearest,
        variant,
        steps: 10,
        seed,
    }
}

/// Checks the gradient of the full training loss with respect to every
/// model parameter.
pub fn denoiser_check(variant: Variant, seeds: u64) -> Result<LayerCheck> {
    let mut total: Option<GradCheckReport> = None;
    for seed in 0..seeds {
        let model = DenoiserModel::new(toy_config(variant, seed))?;
        let cfg = model.config().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let (c, l) = (cfg.classes(), cfg.max_len);
        let len = 6;
        let mut target = Tensor::zeros(&[c, l]);
        for tau in 0..l {
            let class = if tau < len { rng.gen_range(0..cfg.num_activities) } else { c - 1 };
            target.set(class, tau, 1.0);
        }
        let example = Example {
            case_id: "toy".into(),
            x0: Tensor::zeros(&[c, l]),
            target,
            sk: random(&[c, l], &mut rng),
            mask: (0..l).map(|i| i < len).collect(),
        };
        let x_t = random(&[c, l], &mut rng);
        let t = rng.gen_range(1..=cfg.steps);
        let k = cfg.num_activities;
        let flow = FlowMatrix::new(Tensor::from_fn(&[k, k], |_| f64::from(rng.gen_bool(0.5) as u8)))?;
        let flow_arg = (variant == Variant::ModelAware).then_some(&flow);

        let mut inputs: Vec<Tensor> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
        let n = inputs.len();
        inputs.push(x_t);
        let r = check_gradients(
            &inputs,
            |tape, vars| {
                let b = Bindings::from_vars(vars[..n].to_vec());
                let sk = tape.constant(example.sk.clone());
                training_loss(&model, tape, &b, vars[n], &example, Some(sk), flow_arg, t, 0.8)
                    .map(|l| l.total)
                    .map_err(|e| TensorError::Invalid { op: "denoiser", msg: e.to_string() })
            },
            &GradCheckConfig { seed, ..GradCheckConfig::default() },
        )?;
        match &mut total {
            Some(tt) => tt.merge(&r),
            None => total = Some(r),
        }
    }
    Ok(LayerCheck {
        name: match variant {
            Variant::ModelFree => "denoiser loss (model-free)".into(),
            Variant::ModelAware => "denoiser loss (model-aware)".into(),
        },
        tolerance: MODEL_TOLERANCE,
        report: total.expect("at least one seed"),
    })
}

pub fn run_all(seeds: u64) -> Result<Vec<LayerCheck>> {
    let mut out = primitive_checks(seeds)?;
    out.push(denoiser_check(Variant::ModelFree, seeds)?);
    out.push(denoiser_check(Variant::ModelAware, seeds)?);
    Ok(out)
}
