//! Shared contextual encoder: token + position embeddings followed by one
//! multi-head self-attention layer with a residual connection, layer norm,
//! and output dropout.

mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Axis, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub use vocab::{Vocab, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_model == 0 {
            errs.push("d_model must be >= 1".to_string());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads.max(1)) {
            errs.push(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.max_len == 0 {
            errs.push("max_len must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        errs
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let d = config.d_model;
        let g = ParamGroup::Encoder;
        let tok_emb = store.add_uniform("encoder.tok_emb", g, &[vocab_size, d], d, rng)?;
        let pos_emb = store.add_uniform("encoder.pos_emb", g, &[config.max_len, d], d, rng)?;
        let mut proj = |name: &str, rng: &mut R| -> Result<(ParamId, ParamId)> {
            let w = store.add_uniform(format!("encoder.{name}.w"), g, &[d, d], d, rng)?;
            let b = store.add("encoder.".to_string() + name + ".b", g, Tensor::zeros(&[1, d]))?;
            Ok((w, b))
        };
        let (wq, bq) = proj("query", rng)?;
        let (wk, bk) = proj("key", rng)?;
        let (wv, bv) = proj("value", rng)?;
        let (wo, bo) = proj("output", rng)?;
        let ln_gamma = store.add("encoder.norm.gamma", g, Tensor::full(&[1, d], 1.0))?;
        let ln_beta = store.add("encoder.norm.beta", g, Tensor::zeros(&[1, d]))?;
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln_gamma,
            ln_beta,
        })
    }

    /// Re-attach to parameters that already exist in `store` (e.g. after
    /// loading a checkpoint into a store built with the same names).
    pub fn attach(store: &ParamStore, config: EncoderConfig) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Data(format!("missing encoder parameter `{name}`")))
        };
        Ok(Encoder {
            tok_emb: get("encoder.tok_emb")?,
            pos_emb: get("encoder.pos_emb")?,
            wq: get("encoder.query.w")?,
            bq: get("encoder.query.b")?,
            wk: get("encoder.key.w")?,
            bk: get("encoder.key.b")?,
            wv: get("encoder.value.w")?,
            bv: get("encoder.value.b")?,
            wo: get("encoder.output.w")?,
            bo: get("encoder.output.b")?,
            ln_gamma: get("encoder.norm.gamma")?,
            ln_beta: get("encoder.norm.beta")?,
            config,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn affine(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Encode token ids into an `n × d_model` matrix of contextual vectors.
    pub fn encode<R: Rng>(&self, g: &mut Graph, ids: &[usize], train: bool, rng: &mut R) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sentence of {n} tokens exceeds max_len {}",
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        let dk = d / self.config.heads;
        let tok_table = g.param(self.tok_emb);
        let pos_table = g.param(self.pos_emb);
        let tok = g.gather_rows(tok_table, ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(tok, pos)?;

        let q = self.affine(g, x, self.wq, self.bq)?;
        let k = self.affine(g, x, self.wk, self.bk)?;
        let v = self.affine(g, x, self.wv, self.bv)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, Axis::Cols)?;
            ctx.push(g.matmul(attn, vh)?);
        }
        let ctx = if ctx.len() == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
        let out = self.affine(g, ctx, self.wo, self.bo)?;
        let out = g.dropout(out, self.config.dropout, train, rng)?;
        let res = g.add(x, out)?;
        let (gamma, beta) = (g.param(self.ln_gamma), g.param(self.ln_beta));
        let h = g.layer_norm(res, gamma, beta, 1e-5)?;
        g.dropout(h, self.config.dropout, train, rng)
    }

    pub fn param_ids(&self) -> [ParamId; 12] {
        [
            self.tok_emb,
            self.pos_emb,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln_gamma,
            self.ln_beta,
        ]
    }
}
