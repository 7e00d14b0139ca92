//! Parameterized building blocks shared by the extractors and the fusion head.
//!
//! Modules only hold [`ParamId`]s. Parameters are created in double precision
//! through a [`ParamBuilder`] and cast to the training precision afterwards, so
//! one seed gives the same initial model in `f32` and `f64`.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f64>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, rng: &'a mut Rng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name.` appended to the parameter name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<R>) -> Result<R> {
        let mut inner =
            ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix: format!("{}{}.", self.prefix, name) };
        f(&mut inner)
    }

    fn add(&mut self, name: &str, t: Tensor<f64>) -> Result<ParamId> {
        self.store.add(format!("{}{}", self.prefix, name), t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform_range(-bound, bound)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.normal() * std).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, 1.0))
    }
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, inp: usize, out: usize) -> Result<Self> {
        Self::build(pb, name, inp, out, true)
    }

    pub fn without_bias(pb: &mut ParamBuilder<'_>, name: &str, inp: usize, out: usize) -> Result<Self> {
        Self::build(pb, name, inp, out, false)
    }

    fn build(pb: &mut ParamBuilder<'_>, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        pb.scope(name, |pb| {
            let bound = (6.0 / (inp + out) as f64).sqrt();
            Ok(Linear {
                weight: pb.uniform("weight", &[inp, out], bound)?,
                bias: if bias { Some(pb.zeros("bias", &[out])?) } else { None },
                inp,
                out,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Linear → ReLU → Linear.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, inp: usize, hidden: usize, out: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Mlp2 { first: Linear::new(pb, "fc1", inp, hidden)?, second: Linear::new(pb, "fc2", hidden, out)? })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, store, h)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, |pb| Ok(LayerNorm { gamma: pb.ones("weight", &[dim])?, beta: pb.zeros("bias", &[dim])? }))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let axis = tape.shape(x).len() - 1;
        tape.layer_norm(x, axis, Some(g), Some(b), T::of(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide model dim {dim}")));
        }
        pb.scope(name, |pb| {
            Ok(MultiHeadAttention {
                query: Linear::new(pb, "query", dim, dim)?,
                // a key bias only shifts every score in a row by the same amount
                key: Linear::without_bias(pb, "key", dim, dim)?,
                value: Linear::new(pb, "value", dim, dim)?,
                output: Linear::new(pb, "output", dim, dim)?,
                heads,
                dim,
            })
        })
    }

    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, b: usize, l: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = tape.reshape(x, &[b, l, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, l, dh])
    }

    /// `x [B, L, D]` → (`[B, L, D]`, attention weights `[B·heads, L, L]`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("multi_head_attention", &s, &[self.dim]));
        }
        let (b, l) = (s[0], s[1]);
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let q = self.split_heads(tape, q, b, l)?;
        let k = self.split_heads(tape, k, b, l)?;
        let v = self.split_heads(tape, v, b, l)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let dh = self.dim / self.heads;
        let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, self.dim])?;
        Ok((self.output.forward(tape, store, ctx)?, attn))
    }
}

/// `h = x + MHSA(x)`, then `out = h + FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub feed_forward: Mlp2,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(EncoderLayer {
                attention: MultiHeadAttention::new(pb, "attention", dim, heads)?,
                norm: LayerNorm::new(pb, "norm", dim)?,
                feed_forward: Mlp2::new(pb, "mlp", dim, hidden, dim)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let (a, attn) = self.attention.forward(tape, store, x)?;
        let h = tape.add(a, x)?;
        let n = self.norm.forward(tape, store, h)?;
        let f = self.feed_forward.forward(tape, store, n)?;
        Ok((tape.add(f, h)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            let layers = (0..depth)
                .map(|i| EncoderLayer::new(pb, &format!("layer{i}"), dim, heads, hidden))
                .collect::<Result<_>>()?;
            Ok(TransformerEncoder { layers })
        })
    }

    /// Returns the final sequence and the attention weights of every layer.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut attns = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, a) = layer.forward(tape, store, h)?;
            h = next;
            attns.push(a);
        }
        Ok((h, attns))
    }
}

/// Prepends a learned `[D]` token to a `[B, L, D]` sequence.
pub fn prepend_token<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, token: ParamId, seq: Var) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let t = tape.param(store, token);
    let t = tape.reshape(t, &[1, 1, s[2]])?;
    let t = tape.broadcast_to(t, &[s[0], 1, s[2]])?;
    tape.concat(&[t, seq], 1)
}

/// The token at sequence position 0 of `[B, L, D]`, as `[B, D]`.
pub fn first_token<T: Real>(tape: &mut Tape<T>, seq: Var) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let t = tape.narrow(seq, 1, 0, 1)?;
    tape.reshape(t, &[s[0], s[2]])
}
