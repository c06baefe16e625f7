use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::layers::{
    apply_mask, attend, attend_backward, dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, AttnMask,
    LnCache,
};
use super::params::{grad_view, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, matmul, Mat};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIds {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross_attn: AttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub dec: Vec<DecLayerIds>,
    pub enc_ln: LnIds,
    pub dec_ln: LnIds,
    pub out: ParamId,
}

/// Encoder-decoder transformer with pre-layer-norm residual blocks, learned
/// absolute positions, and a token embedding shared by both stacks.
#[derive(Debug, Clone)]
pub struct Transformer<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub(crate) layout: Layout,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache<S> {
    pub xq: Mat<S>,
    pub q: Mat<S>,
    pub k: Mat<S>,
    pub v: Mat<S>,
    pub probs: Vec<Mat<S>>,
    pub ctx: Mat<S>,
}

#[derive(Debug, Clone)]
struct FfnCache<S> {
    x: Mat<S>,
    u: Mat<S>,
    g: Mat<S>,
}

#[derive(Debug, Clone)]
struct EncLayerCache<S> {
    ln1: LnCache<S>,
    attn: AttnCache<S>,
    drop1: Option<Vec<S>>,
    ln2: LnCache<S>,
    ffn: FfnCache<S>,
    drop2: Option<Vec<S>>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayerCache<S> {
    ln1: LnCache<S>,
    self_attn: AttnCache<S>,
    drop1: Option<Vec<S>>,
    ln2: LnCache<S>,
    pub cross_attn: AttnCache<S>,
    drop2: Option<Vec<S>>,
    ln3: LnCache<S>,
    ffn: FfnCache<S>,
    drop3: Option<Vec<S>>,
}

/// Activations retained by a training forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    x: Vec<u32>,
    y_in: Vec<u32>,
    enc_valid: Vec<bool>,
    enc_emb_drop: Option<Vec<S>>,
    dec_emb_drop: Option<Vec<S>>,
    enc_layers: Vec<EncLayerCache<S>>,
    enc_ln: LnCache<S>,
    enc_out: Mat<S>,
    pub(crate) dec_layers: Vec<DecLayerCache<S>>,
    dec_ln: LnCache<S>,
    dec_final: Mat<S>,
}

impl<S: Scalar> Transformer<S> {
    /// Freshly initialized model; identical configs give identical weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let (params, layout) = build_layout(&config, &mut rng);
        Ok(Self { config, params, layout })
    }

    /// Model with the given config and a parameter layout whose values are
    /// all zero (to be filled from a checkpoint).
    pub(crate) fn empty(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut params, layout) = build_layout(&config, &mut rng);
        params.data.iter_mut().for_each(|v| *v = S::zero());
        Ok(Self { config, params, layout })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<T: Scalar>(&self) -> Transformer<T> {
        let mut out = Transformer::<T>::empty(self.config.clone()).expect("config already validated");
        for (dst, &src) in out.params.data.iter_mut().zip(&self.params.data) {
            *dst = T::from_f64_lossy(src.to_f64_lossy());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::TooLong { len, max: self.config.max_len });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        self.check_len(ids.len())?;
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn ln_params(&self, ids: LnIds) -> (&[S], &[S]) {
        (self.params.slice(ids.gain), self.params.slice(ids.bias))
    }

    pub(crate) fn embed(&self, ids: &[u32], pos: ParamId, start_pos: usize) -> Mat<S> {
        let d = self.config.d_model;
        let emb = self.params.slice(self.layout.tok_emb);
        let pe = self.params.slice(pos);
        let mut h = Mat::zeros(ids.len(), d);
        for (r, &t) in ids.iter().enumerate() {
            let e = &emb[t as usize * d..(t as usize + 1) * d];
            let p = &pe[(start_pos + r) * d..(start_pos + r + 1) * d];
            for (o, (&a, &b)) in h.row_mut(r).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        h
    }

    fn attn_sublayer(
        &self,
        ids: AttnIds,
        xq: &Mat<S>,
        xkv: Option<&Mat<S>>,
        mask: AttnMask<'_>,
    ) -> (Mat<S>, AttnCache<S>) {
        let kv_src = xkv.unwrap_or(xq);
        let q = matmul(xq.view(), self.params.view(ids.wq));
        let k = matmul(kv_src.view(), self.params.view(ids.wk));
        let v = matmul(kv_src.view(), self.params.view(ids.wv));
        let (ctx, probs) = attend(&q, &k, &v, self.config.n_heads, mask);
        let out = matmul(ctx.view(), self.params.view(ids.wo));
        (out, AttnCache { xq: xq.clone(), q, k, v, probs, ctx })
    }

    /// Returns `(d_xq, d_xkv)`; for self-attention the caller sums them.
    fn attn_sublayer_backward(
        &self,
        ids: AttnIds,
        cache: &AttnCache<S>,
        xkv: Option<&Mat<S>>,
        dout: &Mat<S>,
        grads: &mut [S],
    ) -> (Mat<S>, Mat<S>) {
        let one = S::one();
        let kv_src = xkv.unwrap_or(&cache.xq);
        let infos = self.params.infos();
        gemm(one, cache.ctx.view().t(), dout.view(), one, grad_view(grads, &infos[ids.wo.0]));
        let dctx = matmul(dout.view(), self.params.view(ids.wo).t());
        let (dq, dk, dv) = attend_backward(&dctx, &cache.q, &cache.k, &cache.v, &cache.probs);
        gemm(one, cache.xq.view().t(), dq.view(), one, grad_view(grads, &infos[ids.wq.0]));
        gemm(one, kv_src.view().t(), dk.view(), one, grad_view(grads, &infos[ids.wk.0]));
        gemm(one, kv_src.view().t(), dv.view(), one, grad_view(grads, &infos[ids.wv.0]));
        let dxq = matmul(dq.view(), self.params.view(ids.wq).t());
        let mut dxkv = matmul(dk.view(), self.params.view(ids.wk).t());
        gemm(one, dv.view(), self.params.view(ids.wv).t(), one, dxkv.view_mut());
        (dxq, dxkv)
    }

    fn ffn(&self, ids: FfnIds, x: &Mat<S>) -> (Mat<S>, FfnCache<S>) {
        let u = matmul(x.view(), self.params.view(ids.w1));
        let mut g = u.clone();
        g.data.iter_mut().for_each(|v| *v = gelu(*v));
        let out = matmul(g.view(), self.params.view(ids.w2));
        (out, FfnCache { x: x.clone(), u, g })
    }

    fn ffn_backward(&self, ids: FfnIds, cache: &FfnCache<S>, dout: &Mat<S>, grads: &mut [S]) -> Mat<S> {
        let one = S::one();
        let infos = self.params.infos();
        gemm(one, cache.g.view().t(), dout.view(), one, grad_view(grads, &infos[ids.w2.0]));
        let mut du = matmul(dout.view(), self.params.view(ids.w2).t());
        for (d, &u) in du.data.iter_mut().zip(&cache.u.data) {
            *d *= gelu_grad(u);
        }
        gemm(one, cache.x.view().t(), du.view(), one, grad_view(grads, &infos[ids.w1.0]));
        matmul(du.view(), self.params.view(ids.w1).t())
    }

    fn ln_backward(&self, ids: LnIds, cache: &LnCache<S>, dy: &Mat<S>, grads: &mut [S]) -> Mat<S> {
        let gain = self.params.slice(ids.gain);
        let gi = self.params.info(ids.gain).range();
        let bi = self.params.info(ids.bias).range();
        // gain and bias slots are adjacent and non-overlapping
        let (lo, hi) = grads.split_at_mut(bi.start);
        layer_norm_backward(dy, cache, gain, &mut lo[gi], &mut hi[..bi.len()])
    }

    fn maybe_dropout(&self, len: usize, rng: &mut Option<&mut ChaCha8Rng>) -> Option<Vec<S>> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Some(dropout_mask(len, self.config.dropout, *r)),
            _ => None,
        }
    }

    /// Encoder stack; `enc_valid[j] == false` marks padding.
    fn encode_inner(
        &self,
        x: &[u32],
        enc_valid: &[bool],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Mat<S>, Option<Vec<S>>, Vec<EncLayerCache<S>>, LnCache<S>) {
        let mut h = self.embed(x, self.layout.enc_pos, 0);
        let emb_drop = self.maybe_dropout(h.data.len(), rng);
        apply_mask(&mut h, &emb_drop);
        let mask = AttnMask { key_valid: Some(enc_valid), causal_offset: None };
        let mut caches = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            let (g, b) = self.ln_params(layer.ln1);
            let (a, ln1) = layer_norm(&h, g, b);
            let (mut o, attn) = self.attn_sublayer(layer.attn, &a, None, mask);
            let drop1 = self.maybe_dropout(o.data.len(), rng);
            apply_mask(&mut o, &drop1);
            h.add_assign(&o);
            let (g, b) = self.ln_params(layer.ln2);
            let (a2, ln2) = layer_norm(&h, g, b);
            let (mut f, ffn) = self.ffn(layer.ffn, &a2);
            let drop2 = self.maybe_dropout(f.data.len(), rng);
            apply_mask(&mut f, &drop2);
            h.add_assign(&f);
            caches.push(EncLayerCache { ln1, attn, drop1, ln2, ffn, drop2 });
        }
        let (g, b) = self.ln_params(self.layout.enc_ln);
        let (out, ln) = layer_norm(&h, g, b);
        (out, emb_drop, caches, ln)
    }

    fn decode_inner(
        &self,
        y_in: &[u32],
        enc_out: &Mat<S>,
        enc_valid: &[bool],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Mat<S>, Option<Vec<S>>, Vec<DecLayerCache<S>>, LnCache<S>) {
        let mut h = self.embed(y_in, self.layout.dec_pos, 0);
        let emb_drop = self.maybe_dropout(h.data.len(), rng);
        apply_mask(&mut h, &emb_drop);
        let self_mask = AttnMask { key_valid: None, causal_offset: Some(0) };
        let cross_mask = AttnMask { key_valid: Some(enc_valid), causal_offset: None };
        let mut caches = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let (g, b) = self.ln_params(layer.ln1);
            let (a, ln1) = layer_norm(&h, g, b);
            let (mut o, self_attn) = self.attn_sublayer(layer.self_attn, &a, None, self_mask);
            let drop1 = self.maybe_dropout(o.data.len(), rng);
            apply_mask(&mut o, &drop1);
            h.add_assign(&o);
            let (g, b) = self.ln_params(layer.ln2);
            let (a2, ln2) = layer_norm(&h, g, b);
            let (mut c, cross_attn) = self.attn_sublayer(layer.cross_attn, &a2, Some(enc_out), cross_mask);
            let drop2 = self.maybe_dropout(c.data.len(), rng);
            apply_mask(&mut c, &drop2);
            h.add_assign(&c);
            let (g, b) = self.ln_params(layer.ln3);
            let (a3, ln3) = layer_norm(&h, g, b);
            let (mut f, ffn) = self.ffn(layer.ffn, &a3);
            let drop3 = self.maybe_dropout(f.data.len(), rng);
            apply_mask(&mut f, &drop3);
            h.add_assign(&f);
            caches.push(DecLayerCache { ln1, self_attn, drop1, ln2, cross_attn, drop2, ln3, ffn, drop3 });
        }
        let (g, b) = self.ln_params(self.layout.dec_ln);
        let (out, ln) = layer_norm(&h, g, b);
        (out, emb_drop, caches, ln)
    }

    /// Encoder hidden states `[len(x) x d_model]`. Rows at padded positions
    /// are computed but never attended to.
    pub fn encode(&self, x: &[u32], pad_mask: &[bool]) -> Result<Mat<S>> {
        self.check_ids(x)?;
        if pad_mask.len() != x.len() {
            return Err(Error::InvalidArgument("pad_mask length differs from input".into()));
        }
        let valid: Vec<bool> = pad_mask.iter().map(|p| !p).collect();
        Ok(self.encode_inner(x, &valid, &mut None).0)
    }

    /// Teacher-forced logits `[len(y_in) x vocab]` in inference mode.
    pub fn forward(&self, x: &[u32], y_in: &[u32]) -> Result<Mat<S>> {
        Ok(self.forward_train(x, y_in, None)?.0)
    }

    /// Forward pass retaining activations. Dropout is active only when an
    /// rng is supplied.
    pub fn forward_train(
        &self,
        x: &[u32],
        y_in: &[u32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat<S>, ForwardCache<S>)> {
        self.check_ids(x)?;
        self.check_ids(y_in)?;
        if x.is_empty() || y_in.is_empty() {
            return Err(Error::Empty("encoder and decoder inputs must be nonempty"));
        }
        let mut rng = rng;
        let enc_valid: Vec<bool> = x.iter().map(|&t| t != crate::tokenizer::PAD_ID).collect();
        let (enc_out, enc_emb_drop, enc_layers, enc_ln) = self.encode_inner(x, &enc_valid, &mut rng);
        let (dec_final, dec_emb_drop, dec_layers, dec_ln) = self.decode_inner(y_in, &enc_out, &enc_valid, &mut rng);
        let logits = matmul(dec_final.view(), self.params.view(self.layout.out));
        let cache = ForwardCache {
            x: x.to_vec(),
            y_in: y_in.to_vec(),
            enc_valid,
            enc_emb_drop,
            dec_emb_drop,
            enc_layers,
            enc_ln,
            enc_out,
            dec_layers,
            dec_ln,
            dec_final,
        };
        Ok((logits, cache))
    }

    /// Accumulates parameter gradients of `sum(dlogits * logits)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<S>, dlogits: &Mat<S>, grads: &mut [S]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size mismatch");
        let one = S::one();
        let d = self.config.d_model;
        let infos = self.params.infos();
        let out_info = &infos[self.layout.out.0];
        gemm(one, cache.dec_final.view().t(), dlogits.view(), one, grad_view(grads, out_info));
        let d_final = matmul(dlogits.view(), self.params.view(self.layout.out).t());
        let mut dh = self.ln_backward(self.layout.dec_ln, &cache.dec_ln, &d_final, grads);
        let mut d_enc_out = Mat::zeros(cache.enc_out.rows, d);

        for (layer, lc) in self.layout.dec.iter().zip(&cache.dec_layers).rev() {
            let mut db = dh.clone();
            apply_mask(&mut db, &lc.drop3);
            let da3 = self.ffn_backward(layer.ffn, &lc.ffn, &db, grads);
            dh.add_assign(&self.ln_backward(layer.ln3, &lc.ln3, &da3, grads));

            let mut db = dh.clone();
            apply_mask(&mut db, &lc.drop2);
            let (da2, dkv) =
                self.attn_sublayer_backward(layer.cross_attn, &lc.cross_attn, Some(&cache.enc_out), &db, grads);
            d_enc_out.add_assign(&dkv);
            dh.add_assign(&self.ln_backward(layer.ln2, &lc.ln2, &da2, grads));

            let mut db = dh.clone();
            apply_mask(&mut db, &lc.drop1);
            let (mut da1, dkv) = self.attn_sublayer_backward(layer.self_attn, &lc.self_attn, None, &db, grads);
            da1.add_assign(&dkv);
            dh.add_assign(&self.ln_backward(layer.ln1, &lc.ln1, &da1, grads));
        }
        apply_mask(&mut dh, &cache.dec_emb_drop);
        self.embedding_backward(&cache.y_in, self.layout.dec_pos, &dh, grads);

        let mut dh = self.ln_backward(self.layout.enc_ln, &cache.enc_ln, &d_enc_out, grads);
        for (layer, lc) in self.layout.enc.iter().zip(&cache.enc_layers).rev() {
            let mut db = dh.clone();
            apply_mask(&mut db, &lc.drop2);
            let da2 = self.ffn_backward(layer.ffn, &lc.ffn, &db, grads);
            dh.add_assign(&self.ln_backward(layer.ln2, &lc.ln2, &da2, grads));

            let mut db = dh.clone();
            apply_mask(&mut db, &lc.drop1);
            let (mut da1, dkv) = self.attn_sublayer_backward(layer.attn, &lc.attn, None, &db, grads);
            da1.add_assign(&dkv);
            dh.add_assign(&self.ln_backward(layer.ln1, &lc.ln1, &da1, grads));
        }
        apply_mask(&mut dh, &cache.enc_emb_drop);
        self.embedding_backward(&cache.x, self.layout.enc_pos, &dh, grads);
        debug_assert_eq!(cache.enc_valid.len(), cache.x.len());
    }

    fn embedding_backward(&self, ids: &[u32], pos: ParamId, dh: &Mat<S>, grads: &mut [S]) {
        let d = self.config.d_model;
        let emb = self.params.info(self.layout.tok_emb).offset;
        let pe = self.params.info(pos).offset;
        for (r, &t) in ids.iter().enumerate() {
            let row = dh.row(r);
            let e0 = emb + t as usize * d;
            for (g, &v) in grads[e0..e0 + d].iter_mut().zip(row) {
                *g += v;
            }
            let p0 = pe + r * d;
            for (g, &v) in grads[p0..p0 + d].iter_mut().zip(row) {
                *g += v;
            }
        }
    }

    /// Last decoder layer's cross-attention for teacher-forced `y_in`, summed
    /// over heads and row-normalized: `[len(y_in) x len(x)]`.
    pub fn cross_attention_map(&self, x: &[u32], y_in: &[u32]) -> Result<Mat<S>> {
        let (_, cache) = self.forward_train(x, y_in, None)?;
        let last = cache.dec_layers.last().ok_or(Error::Config("model has no decoder layers".into()))?;
        let probs = &last.cross_attn.probs;
        let mut out = Mat::zeros(y_in.len(), x.len());
        for p in probs {
            out.add_assign(p);
        }
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let s: S = row.iter().copied().sum();
            if s > S::zero() {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(out)
    }
}

fn build_layout<S: Scalar>(c: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore<S>, Layout) {
    let d = c.d_model;
    let mut p = ParamStore::default();
    let mut normal = |std: f64| Normal::new(0.0, std).expect("valid std").sample(rng);
    let mut add = |p: &mut ParamStore<S>, name: String, rows: usize, cols: usize, std: f64| {
        p.add(name, rows, cols, || S::from_f64_lossy(normal(std)))
    };
    let ln = |p: &mut ParamStore<S>, name: &str| LnIds {
        gain: p.add(format!("{name}.g"), 1, d, S::one),
        bias: p.add(format!("{name}.b"), 1, d, S::zero),
    };
    let lin_std = 1.0 / (d as f64).sqrt();
    let ff_std = 1.0 / (c.d_ff as f64).sqrt();
    let resid_std = lin_std / (2.0 * (c.n_enc_layers + c.n_dec_layers).max(1) as f64).sqrt();

    let tok_emb = add(&mut p, "tok_emb".into(), c.vocab_size, d, 0.5);
    let enc_pos = add(&mut p, "enc.pos".into(), c.max_len, d, 0.1);
    let dec_pos = add(&mut p, "dec.pos".into(), c.max_len, d, 0.1);
    let mut attn = |p: &mut ParamStore<S>, name: &str| AttnIds {
        wq: add(p, format!("{name}.wq"), d, d, lin_std),
        wk: add(p, format!("{name}.wk"), d, d, lin_std),
        wv: add(p, format!("{name}.wv"), d, d, lin_std),
        wo: add(p, format!("{name}.wo"), d, d, resid_std),
    };
    let mut enc = Vec::new();
    for l in 0..c.n_enc_layers {
        let ln1 = ln(&mut p, &format!("enc.{l}.ln1"));
        let attn_ids = attn(&mut p, &format!("enc.{l}.attn"));
        let ln2 = ln(&mut p, &format!("enc.{l}.ln2"));
        enc.push((ln1, attn_ids, ln2));
    }
    let mut dec = Vec::new();
    for l in 0..c.n_dec_layers {
        let ln1 = ln(&mut p, &format!("dec.{l}.ln1"));
        let self_attn = attn(&mut p, &format!("dec.{l}.self"));
        let ln2 = ln(&mut p, &format!("dec.{l}.ln2"));
        let cross_attn = attn(&mut p, &format!("dec.{l}.cross"));
        let ln3 = ln(&mut p, &format!("dec.{l}.ln3"));
        dec.push((ln1, self_attn, ln2, cross_attn, ln3));
    }
    let mut ffn = |p: &mut ParamStore<S>, name: &str| FfnIds {
        w1: add(p, format!("{name}.w1"), d, c.d_ff, lin_std),
        w2: add(p, format!("{name}.w2"), c.d_ff, d, ff_std.min(resid_std * 2.0)),
    };
    let enc: Vec<EncLayerIds> = enc
        .into_iter()
        .enumerate()
        .map(|(l, (ln1, attn, ln2))| EncLayerIds { ln1, attn, ln2, ffn: ffn(&mut p, &format!("enc.{l}.ffn")) })
        .collect();
    let dec: Vec<DecLayerIds> = dec
        .into_iter()
        .enumerate()
        .map(|(l, (ln1, self_attn, ln2, cross_attn, ln3))| DecLayerIds {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            ln3,
            ffn: ffn(&mut p, &format!("dec.{l}.ffn")),
        })
        .collect();
    let enc_ln = ln(&mut p, "enc.ln");
    let dec_ln = ln(&mut p, "dec.ln");
    let out = add(&mut p, "out.w".into(), d, c.vocab_size, lin_std);
    (p, Layout { tok_emb, enc_pos, dec_pos, enc, dec, enc_ln, dec_ln, out })
}
