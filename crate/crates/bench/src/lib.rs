//! Fixtures shared by the benchmarks.

use mmt_probe::model::Batch;
use mmt_probe::{FusionMode, ModelConfig, ModelParams, PatchFeatures, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn filled(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        (x as f32 / (1u64 << 23) as f32) - 1.0
    })
}

pub fn tiny(mode: FusionMode, d_img: usize) -> ModelConfig {
    ModelConfig {
        fusion_mode: mode,
        d_img,
        src_vocab: 120,
        tgt_vocab: 140,
        ..ModelConfig::default()
    }
}

pub fn model(mode: FusionMode, d_img: usize) -> ModelParams<f32> {
    ModelParams::init(&tiny(mode, d_img), 7).expect("valid configuration")
}

/// `n` sentence pairs of length `len` with `patches × d_img` features each.
pub fn batch(cfg: &ModelConfig, n: usize, len: usize, patches: usize) -> Batch<f32> {
    let sents: Vec<(Vec<u32>, Vec<u32>)> = (0..n)
        .map(|i| {
            let s = (0..len)
                .map(|j| 4 + ((i * 31 + j * 7) % (cfg.src_vocab - 4)) as u32)
                .collect();
            let t = (0..len)
                .map(|j| 4 + ((i * 17 + j * 11) % (cfg.tgt_vocab - 4)) as u32)
                .collect();
            (s, t)
        })
        .collect();
    let pairs: Vec<(&[u32], &[u32])> = sents
        .iter()
        .map(|(s, t)| (s.as_slice(), t.as_slice()))
        .collect();
    let feats: Vec<PatchFeatures> = (0..n)
        .map(|i| {
            PatchFeatures::new(
                format!("{i}"),
                filled(&[patches, cfg.d_img], i as u64),
                true,
            )
            .expect("finite")
        })
        .collect();
    let refs: Vec<&PatchFeatures> = feats.iter().collect();
    Batch::new(&pairs, cfg.fusion_mode.uses_image().then_some(&refs[..])).expect("consistent batch")
}
