use std::sync::Arc;

use rand::Rng;

use super::{AlignedFeature, DecoderConfig, FusedInput, GateBank};
use crate::error::{Error, Result};
use crate::geo::InjectionSchedule;
use crate::params::{BoundParams, ParamGroup, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer decoder with learned absolute positions.
///
/// Attention is causal except that the visual prefix is visible to every
/// position. The answer is read from the last position through a final
/// layer norm and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub max_len: usize,
    pub vocab: usize,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[B, classes]` at the answer position.
    pub logits: Var,
    /// `[B, S, C]` output of each layer; index `l − 1` holds layer `l`.
    pub layer_outputs: Vec<Var>,
}

fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(
        config: DecoderConfig,
        max_len: usize,
        vocab: usize,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let f = config.ff_width;
        let grp = ParamGroup::Decoder;
        let proj_std = 1.0 / (c as f64).sqrt();
        store.insert("decoder.pos_embed", randn(&[max_len, c], 0.1, rng), grp);
        store.insert("decoder.text_embed", randn(&[vocab, c], 1.0, rng), grp);
        for l in 1..=config.num_layers {
            let p = |s: &str| format!("decoder.layers.{l}.{s}");
            store.insert(p("ln1.gamma"), Tensor::full(&[c], 1.0), grp);
            store.insert(p("ln1.beta"), Tensor::zeros(&[c]), grp);
            for w in ["attn.wq", "attn.wk", "attn.wv"] {
                store.insert(p(w), randn(&[c, c], proj_std, rng), grp);
            }
            store.insert(p("attn.wo"), randn(&[c, c], 0.5 * proj_std, rng), grp);
            store.insert(p("ln2.gamma"), Tensor::full(&[c], 1.0), grp);
            store.insert(p("ln2.beta"), Tensor::zeros(&[c]), grp);
            store.insert(p("ff.w1"), randn(&[c, f], (2.0 / c as f64).sqrt(), rng), grp);
            store.insert(p("ff.b1"), Tensor::zeros(&[f]), grp);
            store.insert(p("ff.w2"), randn(&[f, c], 0.5 / (f as f64).sqrt(), rng), grp);
            store.insert(p("ff.b2"), Tensor::zeros(&[c]), grp);
        }
        store.insert("decoder.final_norm.gamma", Tensor::full(&[c], 1.0), grp);
        store.insert("decoder.final_norm.beta", Tensor::zeros(&[c]), grp);
        store.insert("decoder.head.w", randn(&[c, classes], 0.02, rng), grp);
        store.insert("decoder.head.b", Tensor::zeros(&[classes]), grp);
        Ok(Self {
            config,
            max_len,
            vocab,
            classes,
        })
    }

    /// Token ids (`batch · len`, row-major) to `[batch, len, C]` embeddings.
    pub fn embed_text(&self, g: &mut Graph, params: &BoundParams, ids: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || ids.len() % batch != 0 {
            return Err(Error::shape("embed_text", format!("{} ids for batch {batch}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let rows = g.gather(params.get("decoder.text_embed")?, ids)?;
        g.reshape(rows, &[batch, ids.len() / batch, self.config.width])
    }

    /// Run all layers. `features[j−1]` is injected before layer `j` for `j ∈ 1..=m`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        input: &FusedInput,
        schedule: &InjectionSchedule,
        features: &[AlignedFeature],
        gates: &GateBank,
    ) -> Result<DecoderOutput> {
        let m = schedule.depth();
        if features.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{} projected features for an injection schedule of depth {m}",
                features.len()
            )));
        }
        if m > self.config.num_layers || m > gates.m {
            return Err(Error::InvalidArgument(format!(
                "injection depth {m} exceeds decoder depth {} or gate bank size {}",
                self.config.num_layers, gates.m
            )));
        }
        let shape = g.shape(input.tokens).to_vec();
        let &[b, s, c] = shape.as_slice() else {
            return Err(Error::shape("decoder", format!("input {shape:?}")));
        };
        if c != self.config.width || s != input.layout.len() || s > self.max_len {
            return Err(Error::shape(
                "decoder",
                format!("input {shape:?}, width {}, max length {}", self.config.width, self.max_len),
            ));
        }
        let pos = g.slice(params.get("decoder.pos_embed")?, 0, 0, s)?;
        let pos = g.expand(pos, b)?;
        let mut x = g.add(input.tokens, pos)?;
        let mask = attention_mask(s, input.layout.num_visual());
        let mut layer_outputs = Vec::with_capacity(self.config.num_layers);
        for l in 1..=self.config.num_layers {
            if l <= m {
                x = gates.inject(g, params, l, self.config.gating, x, &input.layout, &features[l - 1])?;
            }
            x = self.block(g, params, l, x, &mask)?;
            layer_outputs.push(x);
        }
        let last = g.slice(x, 1, s - 1, s)?;
        let last = g.reshape(last, &[b, c])?;
        let last = layer_norm(g, params, "decoder.final_norm", last)?;
        let logits = g.linear(last, params.get("decoder.head.w")?, Some(params.get("decoder.head.b")?))?;
        Ok(DecoderOutput { logits, layer_outputs })
    }

    fn block(&self, g: &mut Graph, params: &BoundParams, l: usize, x: Var, mask: &Arc<[bool]>) -> Result<Var> {
        let p = |s: &str| format!("decoder.layers.{l}.{s}");
        let (b, s, c) = {
            let sh = g.shape(x);
            (sh[0], sh[1], sh[2])
        };
        let (h, d) = (self.config.heads, self.config.head_dim());
        let x2 = g.reshape(x, &[b * s, c])?;

        let n1 = layer_norm(g, params, &p("ln1"), x2)?;
        let q = g.matmul(n1, params.get(&p("attn.wq"))?)?;
        let k = g.matmul(n1, params.get(&p("attn.wk"))?)?;
        let v = g.matmul(n1, params.get(&p("attn.wv"))?)?;
        let q = split_heads(g, q, [b, s, h, d], &[0, 2, 1, 3], [b * h, s, d])?;
        let kt = split_heads(g, k, [b, s, h, d], &[0, 2, 3, 1], [b * h, d, s])?;
        let v = split_heads(g, v, [b, s, h, d], &[0, 2, 1, 3], [b * h, s, d])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = g.masked_fill(scores, mask.clone(), f64::NEG_INFINITY)?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = split_heads(g, ctx, [b, h, s, d], &[0, 2, 1, 3], [b * s, c])?;
        let o = g.matmul(ctx, params.get(&p("attn.wo"))?)?;
        let x2 = g.add(x2, o)?;

        let n2 = layer_norm(g, params, &p("ln2"), x2)?;
        let f = g.linear(n2, params.get(&p("ff.w1"))?, Some(params.get(&p("ff.b1"))?))?;
        let f = g.relu(f)?;
        let f = g.linear(f, params.get(&p("ff.w2"))?, Some(params.get(&p("ff.b2"))?))?;
        let x2 = g.add(x2, f)?;
        g.reshape(x2, &[b, s, c])
    }
}

fn split_heads<const N: usize>(
    g: &mut Graph,
    x: Var,
    split: [usize; 4],
    axes: &[usize],
    merged: [usize; N],
) -> Result<Var> {
    let x = g.reshape(x, &split)?;
    let x = g.permute(x, axes)?;
    g.reshape(x, &merged)
}

/// Affine layer norm over the last axis of a 2-D `x`, parameters `{prefix}.gamma/beta`.
fn layer_norm(g: &mut Graph, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let y = g.layernorm(x, LN_EPS)?;
    let gamma = g.expand(params.get(&format!("{prefix}.gamma"))?, rows)?;
    let beta = g.expand(params.get(&format!("{prefix}.beta"))?, rows)?;
    let y = g.mul(y, gamma)?;
    g.add(y, beta)
}

/// `true` where position `i` may *not* attend to `j`: `j > i` and `j` is not visual.
pub(crate) fn attention_mask(len: usize, num_visual: usize) -> Arc<[bool]> {
    (0..len)
        .flat_map(|i| (0..len).map(move |j| j > i && j >= num_visual))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_keeps_visual_prefix_open() {
        let m = attention_mask(4, 2);
        let allowed: Vec<Vec<bool>> = (0..4).map(|i| (0..4).map(|j| !m[i * 4 + j]).collect()).collect();
        assert_eq!(allowed[0], [true, true, false, false]);
        assert_eq!(allowed[1], [true, true, false, false]);
        assert_eq!(allowed[2], [true, true, true, false]);
        assert_eq!(allowed[3], [true, true, true, true]);
    }
}
