//! Table extractor: per-indicator affine embedding followed by a transformer
//! encoder read out through a class token.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{first_token, prepend_token, ParamBuilder, TransformerEncoder};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

/// Row `n` of the output is `W[n] · x[n] + b[n]`.
#[derive(Clone, Debug)]
pub struct TabularEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
    pub indicators: usize,
    pub dim: usize,
}

impl TabularEmbedding {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, indicators: usize, dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let bound = (6.0 / (1 + dim) as f64).sqrt();
            Ok(TabularEmbedding {
                weight: pb.uniform("weight", &[indicators, dim], bound)?,
                bias: pb.zeros("bias", &[indicators, dim])?,
                indicators,
                dim,
            })
        })
    }

    /// `[B, N]` → `[B, N, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.indicators {
            return Err(Error::shape("tabular_embed", &s, &[self.indicators]));
        }
        let out = [s[0], self.indicators, self.dim];
        let x = tape.reshape(x, &[s[0], self.indicators, 1])?;
        let x = tape.broadcast_to(x, &out)?;
        let w = tape.param(store, self.weight);
        let w = tape.broadcast_to(w, &out)?;
        let b = tape.param(store, self.bias);
        let b = tape.broadcast_to(b, &out)?;
        let y = tape.mul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TableTrace {
    pub embedded: Option<Var>,
    pub sequence: Option<Var>,
    pub attentions: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TableExtractor {
    pub embedding: TabularEmbedding,
    pub class_token: ParamId,
    pub encoder: TransformerEncoder,
}

impl TableExtractor {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        pb.scope("table_extractor", |pb| {
            Ok(TableExtractor {
                embedding: TabularEmbedding::new(pb, "embedding", cfg.num_indicators, cfg.d_tab)?,
                class_token: pb.normal("class_token", &[cfg.d_tab], 0.02)?,
                encoder: TransformerEncoder::new(
                    pb,
                    "encoder",
                    cfg.tab_layers,
                    cfg.d_tab,
                    cfg.tab_heads,
                    cfg.mlp_ratio * cfg.d_tab,
                )?,
            })
        })
    }

    /// Table `[B, N]` → table feature `[B, d_tab]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, table: Var) -> Result<(Var, TableTrace)> {
        let emb = self.embedding.forward(tape, store, table)?;
        let seq = prepend_token(tape, store, self.class_token, emb)?;
        let (out, attentions) = self.encoder.forward(tape, store, seq)?;
        let f = first_token(tape, out)?;
        Ok((f, TableTrace { embedded: Some(emb), sequence: Some(seq), attentions }))
    }
}
