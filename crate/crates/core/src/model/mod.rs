//! Transformer encoder-decoder with optional image fusion.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{FusionMode, GateMode, ModelConfig};
pub use forward::{sinusoid_table, Batch, ImageBatch, SeqBatch};
pub use params::{Layout, ModelParams, ParamSpec};

use forward::Net;

use crate::error::{Error, Result};
use crate::features::PatchFeatures;
use crate::tensor::{Real, Tensor};
use crate::vocab::PAD;

/// Encoder-side states of one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair<T> {
    pub src: Vec<u32>,
    /// Text encoder output `[L × d]`.
    pub h_text: Tensor<T>,
    /// Projected patches `[p × d]`, when the model reads images.
    pub h_img: Option<Tensor<T>>,
    /// Encoder memory handed to the decoder `[L × d]`.
    pub fused: Tensor<T>,
    /// Selective-attention weights `[L × p]`.
    pub attn: Option<Tensor<T>>,
    /// Gate values `[L × d]`.
    pub gate: Option<Tensor<T>>,
}

/// Loss value and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub loss: f64,
    /// One entry per parameter, zero for parameters the batch did not touch.
    pub grads: Vec<Tensor<T>>,
    pub tokens: usize,
}

/// Builds the `[L × d]` pooled image matrix used by gated fusion.
pub fn pool_image_for_gate<T: Real>(
    h_img: &Tensor<T>,
    has_cls: bool,
    len: usize,
) -> Result<Tensor<T>> {
    if h_img.shape().len() != 2 {
        return Err(Error::dim(format!(
            "expected [p × d] image states, got {:?}",
            h_img.shape()
        )));
    }
    let (p, d) = (h_img.shape()[0], h_img.shape()[1]);
    let mut row = vec![T::zero(); d];
    if has_cls {
        row.copy_from_slice(h_img.row(0));
    } else {
        for i in 0..p {
            for (r, &x) in row.iter_mut().zip(h_img.row(i)) {
                *r += x;
            }
        }
        let inv = T::of(1.0 / p as f64);
        row.iter_mut().for_each(|r| *r *= inv);
    }
    Ok(Tensor::from_fn(&[len, d], |i| row[i % d]))
}

fn check_ids(ids: &[u32], vocab: usize, side: &str) -> Result<()> {
    match ids.iter().find(|&&t| t as usize >= vocab) {
        Some(&t) => Err(Error::Contract(format!(
            "{side} token id {t} outside vocabulary of {vocab}"
        ))),
        None => Ok(()),
    }
}

impl<T: Real> ModelParams<T> {
    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let c = self.config();
        check_ids(&batch.text.src, c.src_vocab, "source")?;
        check_ids(&batch.text.tgt_in, c.tgt_vocab, "target")?;
        Ok(())
    }

    /// Mean label-smoothed loss of a batch.
    pub fn forward_loss(&self, batch: &Batch<T>, train: bool, seed: u64) -> Result<f64> {
        self.check_batch(batch)?;
        let mut net = Net::new(self, false, train, seed);
        let (loss, _) = net.loss(batch)?;
        Ok(net.tape.value(loss).data()[0].as_f64())
    }

    /// Loss and gradients of every parameter.
    pub fn loss_and_grads(&self, batch: &Batch<T>, train: bool, seed: u64) -> Result<LossGrads<T>> {
        self.check_batch(batch)?;
        let mut net = Net::new(self, true, train, seed);
        let (loss, _) = net.loss(batch)?;
        net.tape.backward(loss)?;
        let value = net.tape.value(loss).data()[0].as_f64();
        let grads = net
            .param_vars()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| net.tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.tensor(i).shape()))
            })
            .collect();
        Ok(LossGrads {
            loss: value,
            grads,
            tokens: batch.text.tgt_out.iter().filter(|&&t| t != PAD).count(),
        })
    }

    /// Teacher-forced next-token accuracy: `(correct, scored)` over non-pad targets.
    pub fn teacher_forced_accuracy(&self, batch: &Batch<T>) -> Result<(usize, usize)> {
        self.check_batch(batch)?;
        let mut net = Net::new(self, false, false, 0);
        let (_, logits) = net.loss(batch)?;
        let logits = net.tape.value(logits);
        let mut correct = 0;
        let mut total = 0;
        for (r, &gold) in batch.text.tgt_out.iter().enumerate() {
            if gold == PAD {
                continue;
            }
            total += 1;
            correct += usize::from(argmax(logits.row(r)) == gold as usize);
        }
        Ok((correct, total))
    }

    /// Runs the encoder (and fusion) on one source sentence in eval mode.
    pub fn encode_pair(
        &self,
        src: &[u32],
        image: Option<&PatchFeatures>,
    ) -> Result<EncodedPair<T>> {
        if src.is_empty() {
            return Err(Error::Contract("empty source sentence".into()));
        }
        if src.contains(&PAD) {
            return Err(Error::Contract("source contains padding".into()));
        }
        check_ids(src, self.config().src_vocab, "source")?;
        let l = src.len();
        let mut net = Net::new(self, false, false, 0);
        let h_text = net.encode(src, 1, l)?;
        let mode = self.config().fusion_mode;
        if !mode.uses_image() {
            let h = net.tape.value(h_text).clone();
            return Ok(EncodedPair {
                src: src.to_vec(),
                h_text: h.clone(),
                h_img: None,
                fused: h,
                attn: None,
                gate: None,
            });
        }
        let image = image
            .ok_or_else(|| Error::Config(format!("fusion mode {mode} needs image features")))?;
        let ib = ImageBatch::<T>::new(&[image])?;
        let raw = net.tape.constant(ib.data.clone());
        let h_img = net.project_image(raw)?;
        let (ctx, weights) = match mode {
            FusionMode::Gated => (net.pool(h_img, 1, ib.patches, ib.has_cls, l)?, None),
            _ => {
                let (c, w) = net.select(h_text, h_img, 1, l, ib.patches)?;
                (c, Some(w))
            }
        };
        let (fused, lambda) = net.gate(h_text, ctx)?;
        let t = &net.tape;
        Ok(EncodedPair {
            src: src.to_vec(),
            h_text: t.value(h_text).clone(),
            h_img: Some(t.value(h_img).clone()),
            fused: t.value(fused).clone(),
            attn: weights
                .map(|w| t.value(w).clone().reshape(&[l, ib.patches]))
                .transpose()?,
            gate: Some(t.value(lambda).clone()),
        })
    }

    /// Text encoder output `[L × d]`.
    pub fn encode_text(&self, src: &[u32]) -> Result<Tensor<T>> {
        let l = src.len();
        check_ids(src, self.config().src_vocab, "source")?;
        let mut net = Net::new(self, false, false, 0);
        let h = net.encode(src, 1, l)?;
        Ok(net.tape.value(h).clone())
    }

    /// `features · W_img`, `[p × d]`.
    pub fn project_image(&self, features: &PatchFeatures) -> Result<Tensor<T>> {
        let mut net = Net::new(self, false, false, 0);
        let raw = net.tape.constant(features.patches.cast());
        let h = net.project_image(raw)?;
        Ok(net.tape.value(h).clone())
    }

    /// Gate between text states and an image context of the same shape.
    /// Returns `(fused, λ)`.
    pub fn gated_fuse(
        &self,
        h_text: &Tensor<T>,
        ctx: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut net = Net::new(self, false, false, 0);
        let h = net.tape.constant(h_text.clone());
        let c = net.tape.constant(ctx.clone());
        let (out, lambda) = net.gate(h, c)?;
        Ok((net.tape.value(out).clone(), net.tape.value(lambda).clone()))
    }

    /// Text-to-patch attention. Returns `(context [L × d], weights [L × p])`.
    pub fn selective_attention(
        &self,
        h_text: &Tensor<T>,
        h_img: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if h_img.shape().len() != 2 || h_text.shape().len() != 2 {
            return Err(Error::dim(
                "selective attention takes 2-D states".to_string(),
            ));
        }
        let (l, p) = (h_text.shape()[0], h_img.shape()[0]);
        if h_text.shape()[1] != h_img.shape()[1] {
            return Err(Error::dim(format!(
                "text width {} vs image width {}",
                h_text.shape()[1],
                h_img.shape()[1]
            )));
        }
        let mut net = Net::new(self, false, false, 0);
        let ht = net.tape.constant(h_text.clone());
        let hi = net.tape.constant(h_img.clone());
        let (ctx, w) = net.select(ht, hi, 1, l, p)?;
        Ok((
            net.tape.value(ctx).clone(),
            net.tape.value(w).clone().reshape(&[l, p])?,
        ))
    }

    /// Next-token logits `[tgt_vocab]` after `prefix` (which starts with BOS).
    pub fn decode_step(&self, prefix: &[u32], enc: &EncodedPair<T>) -> Result<Tensor<T>> {
        let logits = self.decoder_logits(enc, std::slice::from_ref(&prefix.to_vec()))?;
        let v = self.config().tgt_vocab;
        let lt = prefix.len();
        Tensor::new(vec![v], logits.row(lt - 1).to_vec())
    }

    fn decoder_logits(&self, enc: &EncodedPair<T>, prefixes: &[Vec<u32>]) -> Result<Tensor<T>> {
        let k = prefixes.len();
        let lt = prefixes.first().map_or(0, Vec::len);
        if k == 0 || lt == 0 || prefixes.iter().any(|p| p.len() != lt) {
            return Err(Error::Contract(
                "prefixes must be non-empty and of equal length".into(),
            ));
        }
        let c = self.config();
        let ids: Vec<u32> = prefixes.concat();
        check_ids(&ids, c.tgt_vocab, "target")?;
        let ls = enc.src.len();
        let mut net = Net::new(self, false, false, 0);
        let mem_data: Vec<T> = (0..k)
            .flat_map(|_| enc.fused.data().iter().copied())
            .collect();
        let memory = net
            .tape
            .constant(Tensor::new(vec![k * ls, c.d_model], mem_data)?);
        let src: Vec<u32> = (0..k).flat_map(|_| enc.src.iter().copied()).collect();
        let logits = net.decode(&ids, k, lt, memory, &src, ls)?;
        Ok(net.tape.value(logits).clone())
    }

    /// Log-probabilities of the next target token for each prefix. Every
    /// prefix starts with BOS and all have the same length.
    pub fn next_log_probs(
        &self,
        enc: &EncodedPair<T>,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        let logits = self.decoder_logits(enc, prefixes)?;
        let lt = prefixes[0].len();
        Ok((0..prefixes.len())
            .map(|b| log_softmax(logits.row(b * lt + lt - 1)))
            .collect())
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests;
