//! The guided 1-D U-net denoiser `H(x_t, y, F~, t)`.
//!
//! Each stream is a U-net over `[channels, positions]` feature maps: an
//! input convolution, `levels` encoder blocks separated by width-2 max
//! pooling, a bottleneck block, and `levels` decoder blocks that upsample and
//! concatenate the matching encoder features. A block is two convolutions
//! with SiLU activations, with a projection of the time embedding added
//! after the first convolution.
//!
//! The SK stream mirrors the trace stream; after every encoder and decoder
//! block its features are added into the trace stream, while the two
//! bottlenecks stay separate. The model-aware variant adds a third stream
//! built from the latent flow matrix `F~`: after every block the trace
//! features attend to the flow features, and at the bottleneck the flow
//! features attend back to the trace once. The flow head reads `F^` logits
//! off the final flow features.
//!
//! Dropped guidance is replaced by learned null embeddings: a
//! `(K+1) x max_len` input for the SK stream and a `K x K` stand-in for `F~`.

pub mod checkpoint;
pub mod config;
pub mod encoding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracediff_tensor::{
    Bindings, Conv1d, CrossAttention, Linear, ParamId, Parameters, Tape, Tensor, Var,
};

pub use config::{DenoiserConfig, Upsample, Variant};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv1d,
    conv2: Conv1d,
    time: Linear,
}

impl Block {
    fn new(p: &mut Parameters, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv1: Conv1d::new(p, &format!("{name}.conv1"), cin, cout, cfg.kernel, rng),
            conv2: Conv1d::new(p, &format!("{name}.conv2"), cout, cout, cfg.kernel, rng),
            time: Linear::new(p, &format!("{name}.time"), cfg.time_embed_dim, cout, true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, b, x)?;
        let shift = self.time.forward(tape, b, temb)?;
        let c = tape.shape(shift)[0];
        let shift = tape.reshape(shift, &[c])?;
        let h = tape.add_bias(h, shift)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, b, h)?;
        Ok(tape.silu(h))
    }
}

#[derive(Debug, Clone)]
struct Stream {
    input: Conv1d,
    down: Vec<Block>,
    mid: Block,
    /// Transposed-convolution kernels, one per decoder level when enabled.
    up_kernels: Vec<Option<ParamId>>,
    up: Vec<Block>,
}

impl Stream {
    fn new(p: &mut Parameters, name: &str, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = |l| cfg.channels(l);
        let input = Conv1d::new(p, &format!("{name}.input"), cfg.classes(), c(0), cfg.kernel, rng);
        let down = (0..cfg.levels)
            .map(|l| {
                let cin = if l == 0 { c(0) } else { c(l - 1) };
                Block::new(p, &format!("{name}.down{l}"), cin, c(l), cfg, rng)
            })
            .collect();
        let mid = Block::new(p, &format!("{name}.mid"), c(cfg.levels - 1), c(cfg.levels), cfg, rng);
        let up_kernels = (0..cfg.levels)
            .map(|l| {
                (cfg.upsample == Upsample::TransposedConv).then(|| {
                    p.add_uniform(format!("{name}.upsample{l}"), &[c(l + 1), c(l + 1), 2], c(l + 1) * 2, rng)
                })
            })
            .collect();
        let up = (0..cfg.levels)
            .map(|l| Block::new(p, &format!("{name}.up{l}"), c(l + 1) + c(l), c(l), cfg, rng))
            .collect();
        Stream {
            input,
            down,
            mid,
            up_kernels,
            up,
        }
    }

    fn upsample(&self, tape: &mut Tape, b: &Bindings, level: usize, x: Var) -> Result<Var> {
        Ok(match self.up_kernels[level] {
            Some(w) => tape.conv_transpose2(x, b.var(w))?,
            None => tape.upsample1d(x)?,
        })
    }
}

#[derive(Debug, Clone)]
struct FlowParts {
    latent: ParamId,
    null_flow: ParamId,
    embed: Linear,
    down_attn: Vec<CrossAttention>,
    mid_attn: CrossAttention,
    reverse_attn: CrossAttention,
    up_attn: Vec<CrossAttention>,
    head_q: Linear,
    head_k: Linear,
    head_bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    time_mlp: Linear,
    null_sk: ParamId,
    trace: Stream,
    sk: Stream,
    output: Linear,
    flow: Option<FlowParts>,
}

impl Layout {
    fn build(cfg: &DenoiserConfig, p: &mut Parameters) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let d = cfg.time_embed_dim;
        let time_mlp = Linear::new(p, "time.mlp", d, d, true, rng);
        let null_sk = p.add_uniform("null_sk", &[cfg.classes(), cfg.max_len], 1, rng);
        let trace = Stream::new(p, "trace", cfg, rng);
        let sk = Stream::new(p, "sk", cfg, rng);
        let output = Linear::new(p, "output", cfg.channels(0), cfg.classes(), true, rng);
        let flow = (cfg.variant == Variant::ModelAware).then(|| {
            let k = cfg.num_activities;
            let df = cfg.flow_dim();
            let attn = |p: &mut Parameters, name: String, q: usize, c: usize, rng: &mut ChaCha8Rng| {
                CrossAttention::new(p, &name, q, c, cfg.attention_head_dim, cfg.heads, rng)
            };
            FlowParts {
                latent: p.add_uniform("flow.latent", &[k, k], k, rng),
                null_flow: p.add_uniform("flow.null", &[k, k], k, rng),
                embed: Linear::new(p, "flow.embed", 2 * k, df, true, rng),
                down_attn: (0..cfg.levels)
                    .map(|l| attn(p, format!("flow.down{l}.attn"), cfg.channels(l), df, rng))
                    .collect(),
                mid_attn: attn(p, "flow.mid.attn".into(), cfg.channels(cfg.levels), df, rng),
                reverse_attn: attn(p, "flow.reverse.attn".into(), df, cfg.channels(cfg.levels), rng),
                up_attn: (0..cfg.levels)
                    .map(|l| attn(p, format!("flow.up{l}.attn"), cfg.channels(l), df, rng))
                    .collect(),
                head_q: Linear::new(p, "flow.head.q", df, df, false, rng),
                head_k: Linear::new(p, "flow.head.k", df, df, false, rng),
                head_bias: p.add("flow.head.bias", Tensor::zeros(&[k])),
            }
        });
        Layout {
            time_mlp,
            null_sk,
            trace,
            sk,
            output,
            flow,
        }
    }
}

/// Sinusoidal embedding of step `t`: `sin(t w_i)` then `cos(t w_i)` with
/// geometric frequencies `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Test hooks for probing the wiring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the trace-stream skip connection at this level with zeros.
    pub zero_skip: Option<usize>,
}

/// Guidance passed to one forward call.
#[derive(Debug, Clone, Copy)]
pub struct Guidance {
    /// Encoded SK trace, or `None` to use the null SK embedding.
    pub sk: Option<Var>,
    /// Whether the latent flow matrix is used; `false` swaps in the null
    /// flow embedding. Ignored by the model-free variant.
    pub flow: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `(K+1) x max_len` logits for `x0`.
    pub trace_logits: Var,
    /// `K x K` logits for `F^` (model-aware only).
    pub flow_logits: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub trace_logits: Tensor,
    pub flow_logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: Parameters,
    layout: Layout,
}

impl PartialEq for DenoiserModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        let layout = Layout::build(&config, &mut params);
        Ok(DenoiserModel {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn latent_flow_id(&self) -> Option<ParamId> {
        self.layout.flow.as_ref().map(|f| f.latent)
    }

    /// Parameters feeding only the flow head.
    pub fn flow_head_ids(&self) -> Vec<ParamId> {
        self.layout
            .flow
            .as_ref()
            .map(|f| vec![f.head_q.weight, f.head_k.weight, f.head_bias])
            .unwrap_or_default()
    }

    /// Records one forward pass on `tape`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x_t: Var,
        guidance: Guidance,
        t: usize,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if t == 0 || t > cfg.steps {
            return Err(Error::invalid(format!("time step {t} outside 1..={}", cfg.steps)));
        }
        let expected = [cfg.classes(), cfg.max_len];
        for v in std::iter::once(x_t).chain(guidance.sk) {
            if tape.shape(v) != expected {
                return Err(Error::invalid(format!(
                    "denoiser input has shape {:?}, expected {expected:?}",
                    tape.shape(v)
                )));
            }
        }
        let ly = &self.layout;
        let d = cfg.time_embed_dim;
        let raw = tape.constant(Tensor::new(vec![d, 1], time_embedding(t, d))?);
        let temb = ly.time_mlp.forward(tape, b, raw)?;
        let temb = tape.silu(temb);

        let mut flow = match &ly.flow {
            Some(fp) => {
                let src = b.var(if guidance.flow { fp.latent } else { fp.null_flow });
                let src_t = tape.transpose(src)?;
                let both = tape.concat(&[src, src_t], 0)?;
                Some(fp.embed.forward(tape, b, both)?)
            }
            None => None,
        };
        let attend = |tape: &mut Tape, attn: &CrossAttention, h: Var, f: Option<Var>| -> Result<Var> {
            match f {
                Some(f) => {
                    let a = attn.forward(tape, b, h, f)?;
                    Ok(tape.add(h, a.output)?)
                }
                None => Ok(h),
            }
        };

        let y = guidance.sk.unwrap_or_else(|| b.var(ly.null_sk));
        let (tr, sk) = (&ly.trace, &ly.sk);
        let mut hx = tr.input.forward(tape, b, x_t)?;
        let mut hy = sk.input.forward(tape, b, y)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            hx = tr.down[l].forward(tape, b, hx, temb)?;
            hy = sk.down[l].forward(tape, b, hy, temb)?;
            hx = tape.add(hx, hy)?;
            if let Some(fp) = &ly.flow {
                hx = attend(tape, &fp.down_attn[l], hx, flow)?;
            }
            let skip_x = if opts.zero_skip == Some(l) { tape.scale(hx, 0.0) } else { hx };
            skips.push((skip_x, hy));
            hx = tape.maxpool1d(hx)?;
            hy = tape.maxpool1d(hy)?;
        }
        hx = tr.mid.forward(tape, b, hx, temb)?;
        hy = sk.mid.forward(tape, b, hy, temb)?;
        if let Some(fp) = &ly.flow {
            hx = attend(tape, &fp.mid_attn, hx, flow)?;
            let f = flow.expect("model-aware flow features");
            flow = Some(attend(tape, &fp.reverse_attn, f, Some(hx))?);
        }
        for l in (0..cfg.levels).rev() {
            let (skip_x, skip_y) = skips[l];
            let ux = tr.upsample(tape, b, l, hx)?;
            let uy = sk.upsample(tape, b, l, hy)?;
            let cx = tape.concat(&[ux, skip_x], 0)?;
            let cy = tape.concat(&[uy, skip_y], 0)?;
            hx = tr.up[l].forward(tape, b, cx, temb)?;
            hy = sk.up[l].forward(tape, b, cy, temb)?;
            hx = tape.add(hx, hy)?;
            if let Some(fp) = &ly.flow {
                hx = attend(tape, &fp.up_attn[l], hx, flow)?;
            }
        }
        let trace_logits = ly.output.forward(tape, b, hx)?;

        let flow_logits = match (&ly.flow, flow) {
            (Some(fp), Some(f)) => {
                let q = fp.head_q.forward(tape, b, f)?;
                let k = fp.head_k.forward(tape, b, f)?;
                let qt = tape.transpose(q)?;
                let s = tape.matmul(qt, k)?;
                let s = tape.scale(s, 1.0 / (cfg.flow_dim() as f64).sqrt());
                Some(tape.add_bias(s, b.var(fp.head_bias))?)
            }
            _ => None,
        };
        Ok(ForwardVars {
            trace_logits,
            flow_logits,
        })
    }

    /// An inference session with the parameters bound once.
    pub fn session(&self) -> Session<'_> {
        let mut tape = Tape::new();
        let bindings = self.params.bind_frozen(&mut tape);
        let base = tape.len();
        Session {
            model: self,
            tape,
            bindings,
            base,
        }
    }

    pub fn predict(&self, x_t: &Tensor, sk: Option<&Tensor>, use_flow: bool, t: usize) -> Result<Prediction> {
        self.session().predict_with(x_t, sk, use_flow, t, &ForwardOptions::default())
    }

    /// `x0` logits from the two-stream model.
    pub fn forward_model_free(&self, x_t: &Tensor, y: Option<&Tensor>, t: usize) -> Result<Tensor> {
        if self.variant() != Variant::ModelFree {
            return Err(Error::invalid("forward_model_free called on a model-aware denoiser"));
        }
        Ok(self.predict(x_t, y, false, t)?.trace_logits)
    }

    /// `(x0 logits, F^ logits)` from the three-stream model.
    pub fn forward_model_aware(
        &self,
        x_t: &Tensor,
        y: Option<&Tensor>,
        use_flow: bool,
        t: usize,
    ) -> Result<(Tensor, Tensor)> {
        if self.variant() != Variant::ModelAware {
            return Err(Error::invalid("forward_model_aware called on a model-free denoiser"));
        }
        let p = self.predict(x_t, y, use_flow, t)?;
        let flow = p.flow_logits.expect("model-aware prediction has flow logits");
        Ok((p.trace_logits, flow))
    }
}

/// Reuses one tape across forward passes of a frozen model.
pub struct Session<'m> {
    model: &'m DenoiserModel,
    tape: Tape,
    bindings: Bindings,
    base: usize,
}

impl Session<'_> {
    pub fn predict_with(
        &mut self,
        x_t: &Tensor,
        sk: Option<&Tensor>,
        use_flow: bool,
        t: usize,
        opts: &ForwardOptions,
    ) -> Result<Prediction> {
        self.tape.truncate(self.base);
        let x = self.tape.constant(x_t.clone());
        let y = sk.map(|s| self.tape.constant(s.clone()));
        let out = self.model.forward_vars(
            &mut self.tape,
            &self.bindings,
            x,
            Guidance { sk: y, flow: use_flow },
            t,
            opts,
        )?;
        Ok(Prediction {
            trace_logits: self.tape.value(out.trace_logits).clone(),
            flow_logits: out.flow_logits.map(|f| self.tape.value(f).clone()),
        })
    }

    pub fn predict(&mut self, x_t: &Tensor, sk: Option<&Tensor>, use_flow: bool, t: usize) -> Result<Prediction> {
        self.predict_with(x_t, sk, use_flow, t, &ForwardOptions::default())
    }
}
