use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FusionMode, GateMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot uniform over `[fan_in, fan_out]`, bound multiplied by the gain.
    Xavier(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIdx {
    pub up: LinearIdx,
    pub down: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct EncLayerIdx {
    pub norm_attn: NormIdx,
    pub attn: AttnIdx,
    pub norm_ffn: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct DecLayerIdx {
    pub norm_self: NormIdx,
    pub self_attn: AttnIdx,
    pub norm_cross: NormIdx,
    pub cross_attn: AttnIdx,
    pub norm_ffn: NormIdx,
    pub ffn: FfnIdx,
}

/// Q/K/V projections of selective attention (absent under `raw_qkv`).
#[derive(Clone, Copy, Debug)]
pub struct SelectIdx {
    pub q: usize,
    pub k: usize,
    pub v: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionIdx {
    /// Image projection `[d_img × d_model]`.
    pub w_img: usize,
    /// Gate weights for the text side.
    pub u: usize,
    /// Gate weights for the image side.
    pub v: usize,
    pub select: Option<SelectIdx>,
}

/// Declared order and shapes of every trainable tensor. The order is the
/// checkpoint order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub encoder: Vec<EncLayerIdx>,
    pub fusion: Option<FusionIdx>,
    pub decoder: Vec<DecLayerIdx>,
    pub final_norm: NormIdx,
    pub out_proj: LinearIdx,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> LinearIdx {
        self.linear_gain(prefix, d_in, d_out, 1.0)
    }

    fn linear_gain(&mut self, prefix: &str, d_in: usize, d_out: usize, gain: f64) -> LinearIdx {
        LinearIdx {
            w: self.add(
                format!("{prefix}.weight"),
                &[d_in, d_out],
                Init::Xavier(gain),
            ),
            b: self.add(format!("{prefix}.bias"), &[d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            up: self.linear(&format!("{prefix}.up"), d, f),
            down: self.linear(&format!("{prefix}.down"), f, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let src_embed = b.add("src_embed".into(), &[cfg.src_vocab, d], Init::Xavier(1.0));
        let tgt_embed = b.add("tgt_embed".into(), &[cfg.tgt_vocab, d], Init::Xavier(1.0));
        let encoder = (0..cfg.enc_layers)
            .map(|l| EncLayerIdx {
                norm_attn: b.norm(&format!("enc.{l}.norm_attn"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                norm_ffn: b.norm(&format!("enc.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let fusion =
            cfg.fusion_mode.uses_image().then(|| {
                let gate_out = match cfg.gate_mode {
                    GateMode::Elementwise => d,
                    GateMode::Scalar => 1,
                };
                let w_img = b.add("fusion.w_img".into(), &[cfg.d_img, d], Init::Xavier(1.0));
                let u = b.add("fusion.gate_u".into(), &[d, gate_out], Init::Xavier(1.0));
                let v = b.add("fusion.gate_v".into(), &[d, gate_out], Init::Xavier(1.0));
                let select = (cfg.fusion_mode == FusionMode::SelectiveAttention && !cfg.raw_qkv)
                    .then(|| SelectIdx {
                        q: b.add("fusion.select_q".into(), &[d, d], Init::Xavier(1.0)),
                        k: b.add("fusion.select_k".into(), &[d, d], Init::Xavier(1.0)),
                        v: b.add("fusion.select_v".into(), &[d, d], Init::Xavier(1.0)),
                    });
                FusionIdx {
                    w_img,
                    u,
                    v,
                    select,
                }
            });
        let decoder = (0..cfg.dec_layers)
            .map(|l| DecLayerIdx {
                norm_self: b.norm(&format!("dec.{l}.norm_self"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                norm_cross: b.norm(&format!("dec.{l}.norm_cross"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                norm_ffn: b.norm(&format!("dec.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let final_norm = b.norm("dec.final_norm", d);
        // Halved so that initial logits are close to uniform.
        let out_proj = b.linear_gain("out_proj", d, cfg.tgt_vocab, 0.5);
        Layout {
            specs: b.specs,
            src_embed,
            tgt_embed,
            encoder,
            fusion,
            decoder,
            final_norm,
            out_proj,
        }
    }

    pub fn param_count(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// All trainable tensors of one model, in [`Layout`] order.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: Arc<Layout>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialisation: Glorot-uniform matrices, zero biases, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::full(&spec.shape, T::one()),
                    Init::Xavier(gain) => {
                        let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| T::of(rng.random_range(-bound..bound)))
                    }
                };
                Arc::new(t)
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout: Arc::new(layout),
            tensors,
        })
    }

    /// Builds from explicit tensors, checking them against the layout.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            layout: Arc::new(layout),
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub(crate) fn shared(&self, i: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        let i = self.layout.specs.iter().position(|s| s.name == name)?;
        Some(&self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.specs.iter().position(|s| s.name == name)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.layout
            .specs
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| (s.name.as_str(), t.as_ref()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    /// Arithmetic mean of parameter sets that share one configuration.
    pub fn average(sets: &[ModelParams<T>]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
        if let Some(other) = sets.iter().find(|s| s.config != first.config) {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: {:?} vs {:?}",
                first.config, other.config
            )));
        }
        let n = sets.len() as f64;
        let tensors = (0..first.len())
            .map(|i| {
                let shape = first.tensors[i].shape();
                let numel = first.tensors[i].numel();
                // accumulate in f64 so the mean does not depend on input order
                let mut acc = vec![0.0f64; numel];
                for s in sets {
                    for (a, x) in acc.iter_mut().zip(s.tensors[i].data()) {
                        *a += x.as_f64();
                    }
                }
                Arc::new(Tensor::from_fn(shape, |k| T::of(acc[k] / n)))
            })
            .collect();
        Ok(ModelParams {
            config: first.config.clone(),
            layout: Arc::clone(&first.layout),
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_a_function_of_config() {
        for mode in FusionMode::ALL {
            let cfg = ModelConfig {
                fusion_mode: mode,
                ..Default::default()
            };
            let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
            let b = ModelParams::<f32>::init(&cfg, 2).unwrap();
            assert_eq!(a.param_count(), b.param_count());
            assert_eq!(a.param_count(), Layout::new(&cfg).param_count());
            let shapes_a: Vec<_> = a
                .named()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect();
            let shapes_b: Vec<_> = b
                .named()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect();
            assert_eq!(shapes_a, shapes_b);
        }
    }

    #[test]
    fn tiny_text_only_count() {
        // hand count for d=128, ffn=256, V=100 on both sides
        let (d, f, v) = (128usize, 256usize, 100usize);
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norm = 2 * d;
        let enc = attn + ffn + 2 * norm;
        let dec = 2 * attn + ffn + 3 * norm;
        let expected = 2 * v * d + 4 * enc + 4 * dec + norm + d * v + v;
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn fusion_params_follow_mode() {
        let base = ModelConfig {
            d_img: 64,
            ..Default::default()
        };
        let text = Layout::new(&base);
        let gated = Layout::new(&ModelConfig {
            fusion_mode: FusionMode::Gated,
            ..base.clone()
        });
        let sel = Layout::new(&ModelConfig {
            fusion_mode: FusionMode::SelectiveAttention,
            ..base.clone()
        });
        let raw = Layout::new(&ModelConfig {
            fusion_mode: FusionMode::SelectiveAttention,
            raw_qkv: true,
            ..base.clone()
        });
        assert_eq!(
            gated.param_count() - text.param_count(),
            64 * 128 + 2 * 128 * 128
        );
        assert_eq!(sel.param_count() - gated.param_count(), 3 * 128 * 128);
        assert_eq!(raw.param_count(), gated.param_count());
        let scalar = Layout::new(&ModelConfig {
            fusion_mode: FusionMode::Gated,
            gate_mode: GateMode::Scalar,
            ..base
        });
        assert_eq!(gated.param_count() - scalar.param_count(), 2 * 128 * 127);
    }

    #[test]
    fn average_is_mean_and_order_free() {
        let cfg = ModelConfig {
            d_model: 8,
            d_ffn: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            src_vocab: 6,
            tgt_vocab: 6,
            ..Default::default()
        };
        let a = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let b = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let ab = ModelParams::average(&[a.clone(), b.clone()]).unwrap();
        let ba = ModelParams::average(&[b.clone(), a.clone()]).unwrap();
        for i in 0..a.len() {
            assert_eq!(ab.tensor(i), ba.tensor(i));
            let x = a.tensor(i).data()[0];
            let y = b.tensor(i).data()[0];
            assert!((ab.tensor(i).data()[0] - (x + y) / 2.0).abs() < 1e-15);
        }
        let other = ModelParams::<f64>::init(&ModelConfig { d_ffn: 16, ..cfg }, 1).unwrap();
        assert!(matches!(
            ModelParams::average(&[a, other]),
            Err(Error::Checkpoint(_))
        ));
    }
}
