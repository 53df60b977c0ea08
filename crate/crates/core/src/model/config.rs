use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How image features reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    TextOnly,
    /// Sigmoid gate between the text states and a pooled image vector.
    Gated,
    /// Single-head attention from text states over patches, then the gate.
    SelectiveAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::TextOnly,
        FusionMode::Gated,
        FusionMode::SelectiveAttention,
    ];

    pub fn uses_image(self) -> bool {
        self != FusionMode::TextOnly
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            FusionMode::TextOnly => 0,
            FusionMode::Gated => 1,
            FusionMode::SelectiveAttention => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::TextOnly => "text_only",
            FusionMode::Gated => "gated",
            FusionMode::SelectiveAttention => "selective_attention",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_only" | "text-only" => Ok(FusionMode::TextOnly),
            "gated" => Ok(FusionMode::Gated),
            "selective_attention" | "selective-attention" | "selective" => {
                Ok(FusionMode::SelectiveAttention)
            }
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Shape of the fusion gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// One gate value per position and channel.
    Elementwise,
    /// One gate value per position, shared across channels.
    Scalar,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Elementwise => "elementwise",
            GateMode::Scalar => "scalar",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise" => Ok(GateMode::Elementwise),
            "scalar" => Ok(GateMode::Scalar),
            other => Err(Error::Config(format!("unknown gate mode `{other}`"))),
        }
    }
}

/// Encoder-decoder hyperparameters. Defaults are the Transformer-Tiny setup.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub fusion_mode: FusionMode,
    pub gate_mode: GateMode,
    /// Use text/image states directly as Q/K/V in selective attention.
    pub raw_qkv: bool,
    pub d_img: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            d_model: 128,
            d_ffn: 256,
            heads: 4,
            dropout: 0.3,
            label_smoothing: 0.1,
            fusion_mode: FusionMode::TextOnly,
            gate_mode: GateMode::Elementwise,
            raw_qkv: false,
            d_img: 128,
            src_vocab: 100,
            tgt_vocab: 100,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0,1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing {} not in [0,1)",
                self.label_smoothing
            ));
        }
        if self.d_ffn == 0 || self.max_len == 0 {
            return fail("d_ffn and max_len must be positive".into());
        }
        // specials (pad, bos, eos, unk) plus at least one real token
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return fail("vocabularies need at least 5 entries".into());
        }
        if self.fusion_mode.uses_image() && self.d_img == 0 {
            return fail("d_img must be positive in fusion modes".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_defaults() {
        let c = ModelConfig::default();
        assert_eq!(
            (c.enc_layers, c.dec_layers, c.d_model, c.d_ffn, c.heads),
            (4, 4, 128, 256, 4)
        );
        assert_eq!((c.dropout, c.label_smoothing), (0.3, 0.1));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_heads_and_rates() {
        let c = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            label_smoothing: -0.1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fusion_mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
            assert_eq!(FusionMode::from_code(m.code()), Some(m));
        }
    }
}
