//! Parameterised layers built from tape primitives.
//!
//! Feature maps are laid out `[channels, positions]` throughout.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{Bindings, ParamId, Parameters};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new<R: Rng>(
        params: &mut Parameters,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let weight = params.add_uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel],
            fan_in,
            rng,
        );
        let bias = params.add_uniform(format!("{name}.bias"), &[out_channels], fan_in, rng);
        Conv1d { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, b.var(self.weight))?;
        tape.add_bias(y, b.var(self.bias))
    }
}

/// Position-wise affine map `W x + b` on `[in, L]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut Parameters,
        name: &str,
        input: usize,
        output: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), &[output, input], input, rng);
        let bias = with_bias
            .then(|| params.add_uniform(format!("{name}.bias"), &[output], input, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(b.var(self.weight), x)?;
        match self.bias {
            Some(bias) => tape.add_bias(y, b.var(bias)),
            None => Ok(y),
        }
    }
}

/// Scaled dot-product attention from one sequence onto another.
///
/// `softmax(Q^T K / sqrt(d)) V` with learned projections per head, followed
/// by an output projection back to the query width.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
    head_dim: usize,
    query_dim: usize,
    context_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[query_dim, L_q]`
    pub output: Var,
    /// One `[L_q, L_kv]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        params: &mut Parameters,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        head_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let inner = head_dim * heads;
        CrossAttention {
            query: Linear::new(params, &format!("{name}.q"), query_dim, inner, false, rng),
            key: Linear::new(params, &format!("{name}.k"), context_dim, inner, false, rng),
            value: Linear::new(params, &format!("{name}.v"), context_dim, inner, false, rng),
            output: Linear::new(params, &format!("{name}.o"), inner, query_dim, true, rng),
            heads,
            head_dim,
            query_dim,
            context_dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        queries_from: Var,
        keys_values_from: Var,
    ) -> Result<AttentionOutput> {
        let (qs, ks) = (tape.shape(queries_from), tape.shape(keys_values_from));
        if qs.len() != 2 || ks.len() != 2 || qs[0] != self.query_dim || ks[0] != self.context_dim {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                lhs: qs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let q = self.query.forward(tape, b, queries_from)?;
        let k = self.key.forward(tape, b, keys_values_from)?;
        let v = self.value.forward(tape, b, keys_values_from)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice(q, 0, lo, hi)?, tape.slice(k, 0, lo, hi)?, tape.slice(v, 0, lo, hi)?)
            };
            let qt = tape.transpose(qh)?;
            let scores = tape.matmul(qt, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            let attn_t = tape.transpose(attn)?;
            per_head.push(tape.matmul(vh, attn_t)?);
            weights.push(attn);
        }
        let merged = if per_head.len() == 1 {
            per_head[0]
        } else {
            tape.concat(&per_head, 0)?
        };
        let output = self.output.forward(tape, b, merged)?;
        Ok(AttentionOutput { output, weights })
    }
}
