//! Incremental (key/value cached) greedy decoding.

use super::layers::{attend, gelu, layer_norm, AttnMask};
use super::transformer::Transformer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Mat};
use crate::tokenizer::{END_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Generated ids, including any forced prefix, without start or end token.
    pub ids: Vec<u32>,
    /// True when `max_out_len` was reached before the end token.
    pub truncated: bool,
}

struct LayerState<S> {
    self_k: Mat<S>,
    self_v: Mat<S>,
    cross_k: Mat<S>,
    cross_v: Mat<S>,
}

/// Decoder state for one input, fed one token at a time.
pub(crate) struct IncrementalDecoder<'m, S: Scalar> {
    model: &'m Transformer<S>,
    enc_valid: Vec<bool>,
    layers: Vec<LayerState<S>>,
    pos: usize,
}

fn push_row<S: Scalar>(m: &mut Mat<S>, row: &[S]) {
    m.data.extend_from_slice(row);
    m.rows += 1;
}

impl<'m, S: Scalar> IncrementalDecoder<'m, S> {
    pub fn new(model: &'m Transformer<S>, x: &[u32]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Empty("decoder needs a nonempty input"));
        }
        let pad_mask: Vec<bool> = x.iter().map(|&t| t == PAD_ID).collect();
        let enc_out = model.encode(x, &pad_mask)?;
        let d = model.config.d_model;
        let layers = model
            .layout
            .dec
            .iter()
            .map(|l| LayerState {
                self_k: Mat::zeros(0, d),
                self_v: Mat::zeros(0, d),
                cross_k: matmul(enc_out.view(), model.params.view(l.cross_attn.wk)),
                cross_v: matmul(enc_out.view(), model.params.view(l.cross_attn.wv)),
            })
            .collect();
        Ok(Self { model, enc_valid: pad_mask.iter().map(|p| !p).collect(), layers, pos: 0 })
    }

    /// Feeds `token` at the next position and returns next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<S>> {
        let m = self.model;
        m.check_len(self.pos + 1)?;
        let mut h = m.embed(&[token], m.layout.dec_pos, self.pos);
        let n_heads = m.config.n_heads;
        let p = &m.params;
        for (ids, st) in m.layout.dec.iter().zip(self.layers.iter_mut()) {
            let (a, _) = layer_norm(&h, p.slice(ids.ln1.gain), p.slice(ids.ln1.bias));
            let q = matmul(a.view(), p.view(ids.self_attn.wq));
            push_row(&mut st.self_k, &matmul(a.view(), p.view(ids.self_attn.wk)).data);
            push_row(&mut st.self_v, &matmul(a.view(), p.view(ids.self_attn.wv)).data);
            let (ctx, _) = attend(&q, &st.self_k, &st.self_v, n_heads, AttnMask::NONE);
            h.add_assign(&matmul(ctx.view(), p.view(ids.self_attn.wo)));

            let (a2, _) = layer_norm(&h, p.slice(ids.ln2.gain), p.slice(ids.ln2.bias));
            let q = matmul(a2.view(), p.view(ids.cross_attn.wq));
            let mask = AttnMask { key_valid: Some(&self.enc_valid), causal_offset: None };
            let (ctx, _) = attend(&q, &st.cross_k, &st.cross_v, n_heads, mask);
            h.add_assign(&matmul(ctx.view(), p.view(ids.cross_attn.wo)));

            let (a3, _) = layer_norm(&h, p.slice(ids.ln3.gain), p.slice(ids.ln3.bias));
            let mut u = matmul(a3.view(), p.view(ids.ffn.w1));
            u.data.iter_mut().for_each(|v| *v = gelu(*v));
            h.add_assign(&matmul(u.view(), p.view(ids.ffn.w2)));
        }
        let (hf, _) = layer_norm(&h, p.slice(m.layout.dec_ln.gain), p.slice(m.layout.dec_ln.bias));
        self.pos += 1;
        Ok(matmul(hf.view(), p.view(m.layout.out)).data)
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

impl<S: Scalar> Transformer<S> {
    /// Greedy argmax decoding until the end token or `max_out_len` tokens.
    pub fn greedy_decode(&self, x: &[u32], max_out_len: usize) -> Result<DecodeOutput> {
        self.greedy_decode_with_prefix(x, &[], max_out_len)
    }

    /// Greedy decoding with the first tokens forced to `prefix`.
    pub fn greedy_decode_with_prefix(&self, x: &[u32], prefix: &[u32], max_out_len: usize) -> Result<DecodeOutput> {
        let max_out_len = max_out_len.min(self.config.max_len.saturating_sub(1));
        let mut dec = IncrementalDecoder::new(self, x)?;
        let mut ids = Vec::with_capacity(max_out_len);
        let mut logits = dec.step(PAD_ID)?;
        for &t in prefix {
            if ids.len() >= max_out_len {
                return Ok(DecodeOutput { ids, truncated: true });
            }
            ids.push(t);
            logits = dec.step(t)?;
        }
        loop {
            let next = argmax(&logits);
            if next == END_ID {
                return Ok(DecodeOutput { ids, truncated: false });
            }
            if ids.len() >= max_out_len {
                return Ok(DecodeOutput { ids, truncated: true });
            }
            ids.push(next);
            logits = dec.step(next)?;
        }
    }

    /// Softmax distribution of the token following `prefix`.
    pub fn next_token_probs(&self, x: &[u32], prefix: &[u32]) -> Result<Vec<S>> {
        let mut dec = IncrementalDecoder::new(self, x)?;
        let mut logits = dec.step(PAD_ID)?;
        for &t in prefix {
            logits = dec.step(t)?;
        }
        crate::tensor::softmax_row(&mut logits, |_| true);
        Ok(logits)
    }
}
