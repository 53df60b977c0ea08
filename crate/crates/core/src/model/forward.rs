//! Forward pass of the encoder-decoder on a [`Tape`].
//!
//! Every public model operation (training loss, single decode steps, the
//! standalone fusion helpers) goes through [`Net`], so the training path and
//! the inference path share one implementation.

use super::config::{FusionMode, GateMode};
use super::params::{AttnIdx, FfnIdx, LinearIdx, ModelParams, NormIdx};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::PatchFeatures;
use crate::tensor::{Real, Tensor};
use crate::vocab::{BOS, EOS, PAD};

/// Additive score for disallowed attention entries. Finite so that fully
/// masked rows stay finite.
const MASK_NEG: f64 = -1e9;

/// Padded token-id matrices of one batch. Targets are shifted: the decoder
/// reads `BOS y` and predicts `y EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl SeqBatch {
    pub fn new(pairs: &[(&[u32], &[u32])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Contract(format!("source sentence {b} is empty")));
            }
            src[b * src_len..b * src_len + s.len()].copy_from_slice(s);
            tgt_in[b * tgt_len] = BOS;
            tgt_in[b * tgt_len + 1..b * tgt_len + 1 + t.len()].copy_from_slice(t);
            tgt_out[b * tgt_len..b * tgt_len + t.len()].copy_from_slice(t);
            tgt_out[b * tgt_len + t.len()] = EOS;
        }
        Ok(SeqBatch {
            size,
            src_len,
            tgt_len,
            src,
            tgt_in,
            tgt_out,
        })
    }

    /// Source plus target tokens, the unit used for token-count batching.
    pub fn token_count(&self) -> usize {
        self.src
            .iter()
            .chain(&self.tgt_out)
            .filter(|&&t| t != PAD)
            .count()
    }
}

/// Patch features of every example in a batch, stacked to `[B·p × d_img]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub patches: usize,
    pub has_cls: bool,
    pub data: Tensor<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(records: &[&PatchFeatures]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let (p, d) = (first.patch_count(), first.dim());
        if p == 0 {
            return Err(Error::EmptyFeatures);
        }
        let mut data = Vec::with_capacity(records.len() * p * d);
        for r in records {
            if r.patch_count() != p || r.dim() != d || r.has_cls != first.has_cls {
                return Err(Error::dim(format!(
                    "image `{}` is {}×{} (cls={}), batch expects {}×{} (cls={})",
                    r.image_id,
                    r.patch_count(),
                    r.dim(),
                    r.has_cls,
                    p,
                    d,
                    first.has_cls
                )));
            }
            data.extend(r.patches.data().iter().map(|&x| T::of(x as f64)));
        }
        Ok(ImageBatch {
            patches: p,
            has_cls: first.has_cls,
            data: Tensor::new(vec![records.len() * p, d], data)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub text: SeqBatch,
    pub image: Option<ImageBatch<T>>,
}

impl<T: Real> Batch<T> {
    pub fn new(pairs: &[(&[u32], &[u32])], images: Option<&[&PatchFeatures]>) -> Result<Self> {
        let text = SeqBatch::new(pairs)?;
        let image = match images {
            Some(recs) => {
                if recs.len() != pairs.len() {
                    return Err(Error::Alignment(format!(
                        "{} sentence pairs but {} feature records",
                        pairs.len(),
                        recs.len()
                    )));
                }
                Some(ImageBatch::new(recs)?)
            }
            None => None,
        };
        Ok(Batch { text, image })
    }
}

/// Sinusoidal position table `[len × d]`.
pub fn sinusoid_table(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = angle.sin();
            out[pos * d + 2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            out[pos * d + d - 1] = (pos as f64).sin();
        }
    }
    out
}

pub(crate) struct Net<'a, T: Real> {
    pub tape: Tape<T>,
    params: &'a ModelParams<T>,
    vars: Vec<Option<Var>>,
    grad: bool,
    train: bool,
    seed: u64,
    dropout_calls: u64,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(params: &'a ModelParams<T>, grad: bool, train: bool, seed: u64) -> Self {
        Net {
            tape: Tape::new(),
            params,
            vars: vec![None; params.len()],
            grad,
            train,
            seed,
            dropout_calls: 0,
        }
    }

    /// Parameter `i` on the tape, registered on first use.
    pub fn p(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = self.tape.leaf_shared(self.params.shared(i), self.grad);
        self.vars[i] = Some(v);
        v
    }

    pub fn param_vars(&self) -> &[Option<Var>] {
        &self.vars
    }

    fn d(&self) -> usize {
        self.params.config().d_model
    }

    fn linear(&mut self, x: Var, idx: LinearIdx) -> Result<Var> {
        let (w, b) = (self.p(idx.w), self.p(idx.b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.params.config().dropout;
        self.dropout_calls += 1;
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls);
        self.tape.dropout(x, p, seed, self.train)
    }

    fn norm(&mut self, x: Var, idx: NormIdx) -> Result<Var> {
        let (g, b) = (self.p(idx.gain), self.p(idx.bias));
        self.tape.layer_norm(x, g, b)
    }

    fn ffn(&mut self, x: Var, idx: FfnIdx) -> Result<Var> {
        let h = self.linear(x, idx.up)?;
        let h = self.tape.relu(h);
        self.linear(h, idx.down)
    }

    /// `[B·L × d]` to `[B·H, L, d/H]`.
    fn split_heads(&mut self, x: Var, b: usize, l: usize) -> Result<Var> {
        let h = self.params.config().heads;
        let dk = self.d() / h;
        if h == 1 {
            return self.tape.reshape(x, &[b, l, dk]);
        }
        let x = self.tape.reshape(x, &[b, l, h, dk])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[b * h, l, dk])
    }

    fn merge_heads(&mut self, x: Var, b: usize, l: usize) -> Result<Var> {
        let h = self.params.config().heads;
        let d = self.d();
        if h == 1 {
            return self.tape.reshape(x, &[b * l, d]);
        }
        let x = self.tape.reshape(x, &[b, h, l, d / h])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[b * l, d])
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &mut self,
        q_in: Var,
        kv_in: Var,
        b: usize,
        lq: usize,
        lk: usize,
        mask: Option<Var>,
        idx: AttnIdx,
    ) -> Result<Var> {
        let dk = self.d() / self.params.config().heads;
        let q = self.linear(q_in, idx.q)?;
        let k = self.linear(kv_in, idx.k)?;
        let v = self.linear(kv_in, idx.v)?;
        let q = self.split_heads(q, b, lq)?;
        let k = self.split_heads(k, b, lk)?;
        let v = self.split_heads(v, b, lk)?;
        let s = self.tape.bmm(q, k, true)?;
        let mut s = self.tape.scale(s, 1.0 / (dk as f64).sqrt());
        if let Some(m) = mask {
            s = self.tape.add(s, m)?;
        }
        let a = self.tape.softmax_rows(s);
        let o = self.tape.bmm(a, v, false)?;
        let o = self.merge_heads(o, b, lq)?;
        self.linear(o, idx.o)
    }

    /// Additive mask `[B·H, lq, lk]` hiding padded keys and, if `causal`, future keys.
    fn attn_mask(&mut self, key_ids: &[u32], b: usize, lq: usize, lk: usize, causal: bool) -> Var {
        let h = self.params.config().heads;
        let neg = T::of(MASK_NEG);
        let mut m = vec![T::zero(); b * h * lq * lk];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * lq * lk;
                for i in 0..lq {
                    for j in 0..lk {
                        if key_ids[bi * lk + j] == PAD || (causal && j > i) {
                            m[base + i * lk + j] = neg;
                        }
                    }
                }
            }
        }
        self.tape
            .constant(Tensor::new(vec![b * h, lq, lk], m).expect("mask shape"))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let max = self.params.config().max_len;
        if len > max {
            return Err(Error::Length { len, max });
        }
        Ok(())
    }

    /// Token embedding scaled by √d plus sinusoidal positions, `[B·L × d]`.
    fn embed(&mut self, table: usize, ids: &[u32], b: usize, l: usize) -> Result<Var> {
        self.check_len(l)?;
        let d = self.d();
        let t = self.p(table);
        let e = self.tape.embedding(t, ids)?;
        let e = self.tape.scale(e, (d as f64).sqrt());
        let table = sinusoid_table(l, d);
        let pos = Tensor::from_fn(&[b * l, d], |i| T::of(table[i % (l * d)]));
        let pos = self.tape.constant(pos);
        let x = self.tape.add(e, pos)?;
        self.dropout(x)
    }

    /// Text encoder over padded source ids, `[B·L × d]`.
    pub fn encode(&mut self, src: &[u32], b: usize, l: usize) -> Result<Var> {
        let layout = self.params.layout();
        let layers = layout.encoder.clone();
        let mut x = self.embed(layout.src_embed, src, b, l)?;
        let mask = src
            .contains(&PAD)
            .then(|| self.attn_mask(src, b, l, l, false));
        for layer in layers {
            let h = self.norm(x, layer.norm_attn)?;
            let a = self.mha(h, h, b, l, l, mask, layer.attn)?;
            let a = self.dropout(a)?;
            x = self.tape.add(x, a)?;
            let h = self.norm(x, layer.norm_ffn)?;
            let f = self.ffn(h, layer.ffn)?;
            let f = self.dropout(f)?;
            x = self.tape.add(x, f)?;
        }
        Ok(x)
    }

    fn fusion(&self) -> Result<super::params::FusionIdx> {
        self.params
            .layout()
            .fusion
            .ok_or_else(|| Error::Config("model has no fusion parameters (text_only)".into()))
    }

    /// `raw · W`, `[B·p × d_img]` to `[B·p × d]`.
    pub fn project_image(&mut self, raw: Var) -> Result<Var> {
        let fusion = self.fusion()?;
        let d_img = self.params.config().d_img;
        let got = self.tape.value(raw).last_dim();
        if got != d_img {
            return Err(Error::dim(format!(
                "image feature dimension: expected {d_img}, got {got}"
            )));
        }
        let w = self.p(fusion.w_img);
        self.tape.matmul(raw, w)
    }

    /// Broadcasts the CLS row (or the patch mean) of each image over `l` positions.
    pub fn pool(&mut self, h_img: Var, b: usize, p: usize, has_cls: bool, l: usize) -> Result<Var> {
        if p == 0 {
            return Err(Error::EmptyFeatures);
        }
        let d = self.tape.value(h_img).last_dim();
        let weights = Tensor::from_fn(&[b, l, p], |i| {
            let j = i % p;
            match (has_cls, j) {
                (true, 0) => T::one(),
                (true, _) => T::zero(),
                (false, _) => T::of(1.0 / p as f64),
            }
        });
        let weights = self.tape.constant(weights);
        let img = self.tape.reshape(h_img, &[b, p, d])?;
        let pooled = self.tape.bmm(weights, img, false)?;
        self.tape.reshape(pooled, &[b * l, d])
    }

    /// Single-head attention of text states over patches. Returns the image
    /// context `[B·l × d]` and the weights `[B, l, p]`.
    pub fn select(
        &mut self,
        h_text: Var,
        h_img: Var,
        b: usize,
        l: usize,
        p: usize,
    ) -> Result<(Var, Var)> {
        if p == 0 {
            return Err(Error::EmptyFeatures);
        }
        let fusion = self.fusion()?;
        let d = self.tape.value(h_text).last_dim();
        let (q, k, v) = match fusion.select {
            Some(sel) => {
                let (wq, wk, wv) = (self.p(sel.q), self.p(sel.k), self.p(sel.v));
                (
                    self.tape.matmul(h_text, wq)?,
                    self.tape.matmul(h_img, wk)?,
                    self.tape.matmul(h_img, wv)?,
                )
            }
            None => (h_text, h_img, h_img),
        };
        let q = self.tape.reshape(q, &[b, l, d])?;
        let k = self.tape.reshape(k, &[b, p, d])?;
        let v = self.tape.reshape(v, &[b, p, d])?;
        let s = self.tape.bmm(q, k, true)?;
        let s = self.tape.scale(s, 1.0 / (d as f64).sqrt());
        let weights = self.tape.softmax_rows(s);
        let ctx = self.tape.bmm(weights, v, false)?;
        let ctx = self.tape.reshape(ctx, &[b * l, d])?;
        Ok((ctx, weights))
    }

    /// `λ = σ(H_text·U + ctx·V)`, output `(1-λ)⊙H_text + λ⊙ctx`. Returns `(out, λ)`.
    pub fn gate(&mut self, h_text: Var, ctx: Var) -> Result<(Var, Var)> {
        let fusion = self.fusion()?;
        let (st, sc) = (self.tape.shape(h_text), self.tape.shape(ctx));
        if st != sc {
            return Err(Error::dim(format!("gated fusion of {st:?} and {sc:?}")));
        }
        let (rows, d) = (st[0], st[1]);
        let (u, v) = (self.p(fusion.u), self.p(fusion.v));
        let a = self.tape.matmul(h_text, u)?;
        let c = self.tape.matmul(ctx, v)?;
        let pre = self.tape.add(a, c)?;
        let mut lambda = self.tape.sigmoid(pre);
        if self.params.config().gate_mode == GateMode::Scalar {
            let ones = self.tape.constant(Tensor::full(&[1, d], T::one()));
            lambda = self.tape.matmul(lambda, ones)?;
        }
        debug_assert_eq!(self.tape.shape(lambda), &[rows, d]);
        let diff = self.tape.sub(ctx, h_text)?;
        let mix = self.tape.mul(lambda, diff)?;
        Ok((self.tape.add(h_text, mix)?, lambda))
    }

    /// Encoder output after fusion, plus selective-attention weights if any.
    pub fn fuse(
        &mut self,
        h_text: Var,
        image: Option<&ImageBatch<T>>,
        b: usize,
        l: usize,
    ) -> Result<(Var, Option<Var>)> {
        let mode = self.params.config().fusion_mode;
        if mode == FusionMode::TextOnly {
            return Ok((h_text, None));
        }
        let image = image
            .ok_or_else(|| Error::Config(format!("fusion mode {mode} needs image features")))?;
        let raw = self.tape.constant(image.data.clone());
        let h_img = self.project_image(raw)?;
        let (ctx, weights) = match mode {
            FusionMode::Gated => (self.pool(h_img, b, image.patches, image.has_cls, l)?, None),
            _ => {
                let (c, w) = self.select(h_text, h_img, b, l, image.patches)?;
                (c, Some(w))
            }
        };
        let (out, _) = self.gate(h_text, ctx)?;
        Ok((out, weights))
    }

    /// Decoder logits `[B·lt × V]` given shifted targets and the fused memory.
    pub fn decode(
        &mut self,
        tgt_in: &[u32],
        b: usize,
        lt: usize,
        memory: Var,
        src: &[u32],
        ls: usize,
    ) -> Result<Var> {
        let layout = self.params.layout();
        let layers = layout.decoder.clone();
        let (final_norm, out_proj) = (layout.final_norm, layout.out_proj);
        let mut y = self.embed(layout.tgt_embed, tgt_in, b, lt)?;
        let self_mask = Some(self.attn_mask(tgt_in, b, lt, lt, true));
        let cross_mask = src
            .contains(&PAD)
            .then(|| self.attn_mask(src, b, lt, ls, false));
        for layer in layers {
            let h = self.norm(y, layer.norm_self)?;
            let a = self.mha(h, h, b, lt, lt, self_mask, layer.self_attn)?;
            let a = self.dropout(a)?;
            y = self.tape.add(y, a)?;
            let h = self.norm(y, layer.norm_cross)?;
            let a = self.mha(h, memory, b, lt, ls, cross_mask, layer.cross_attn)?;
            let a = self.dropout(a)?;
            y = self.tape.add(y, a)?;
            let h = self.norm(y, layer.norm_ffn)?;
            let f = self.ffn(h, layer.ffn)?;
            let f = self.dropout(f)?;
            y = self.tape.add(y, f)?;
        }
        let y = self.norm(y, final_norm)?;
        self.linear(y, out_proj)
    }

    /// Full teacher-forced pass. Returns `(loss, logits)`.
    pub fn loss(&mut self, batch: &Batch<T>) -> Result<(Var, Var)> {
        let t = &batch.text;
        let h_text = self.encode(&t.src, t.size, t.src_len)?;
        let (memory, _) = self.fuse(h_text, batch.image.as_ref(), t.size, t.src_len)?;
        let logits = self.decode(&t.tgt_in, t.size, t.tgt_len, memory, &t.src, t.src_len)?;
        let eps = self.params.config().label_smoothing;
        let loss = self
            .tape
            .cross_entropy_label_smoothed(logits, &t.tgt_out, eps, PAD)?;
        Ok((loss, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_shifts_targets() {
        let b = SeqBatch::new(&[(&[5, 6, 7][..], &[8, 9][..]), (&[5][..], &[10][..])]).unwrap();
        assert_eq!((b.src_len, b.tgt_len), (3, 3));
        assert_eq!(b.src, vec![5, 6, 7, 5, PAD, PAD]);
        assert_eq!(b.tgt_in, vec![BOS, 8, 9, BOS, 10, PAD]);
        assert_eq!(b.tgt_out, vec![8, 9, EOS, 10, EOS, PAD]);
        assert_eq!(b.token_count(), 3 + 1 + 3 + 2);
    }

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoid_table(2, 4);
        assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t[4] - 1f64.sin()).abs() < 1e-15);
        assert!((t[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
