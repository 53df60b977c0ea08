use super::*;
use crate::vocab::{BOS, EOS};

fn micro(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 8,
        d_ffn: 16,
        heads: 2,
        dropout: 0.0,
        label_smoothing: 0.1,
        fusion_mode: mode,
        d_img: 6,
        src_vocab: 11,
        tgt_vocab: 12,
        max_len: 16,
        ..ModelConfig::default()
    }
}

fn feats(id: &str, p: usize, d: usize, cls: bool, seed: u64) -> PatchFeatures {
    let t = Tensor::from_fn(&[p, d], |i| {
        (((i as u64 + 1) * (seed + 7) * 2654435761) % 1000) as f32 / 500.0 - 1.0
    });
    PatchFeatures::new(id, t, cls).unwrap()
}

fn zero_blocks(p: &mut ModelParams<f64>) {
    let names: Vec<String> = p.named().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        if n.starts_with("enc.") && !n.contains("norm") {
            p.tensor_mut(i).data_mut().fill(0.0);
        }
    }
}

#[test]
fn single_token_shape_under_default_config() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
    assert_eq!(p.encode_text(&[7]).unwrap().shape(), &[1, 128]);
}

#[test]
fn positions_break_symmetry() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::TextOnly), 3).unwrap();
    let a = p.encode_text(&[5, 6, 7]).unwrap();
    let b = p.encode_text(&[6, 5, 7]).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn zero_blocks_pass_embedding_through() {
    let cfg = micro(FusionMode::TextOnly);
    let mut p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    zero_blocks(&mut p);
    let src = [4u32, 9, 5];
    let out = p.encode_text(&src).unwrap();
    let emb = p.by_name("src_embed").unwrap();
    let pos = sinusoid_table(3, 8);
    for (r, &t) in src.iter().enumerate() {
        for j in 0..8 {
            let want = emb.row(t as usize)[j] * 8f64.sqrt() + pos[r * 8 + j];
            assert!((out.row(r)[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn over_length_input_is_rejected() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::TextOnly), 3).unwrap();
    let long = vec![5u32; 17];
    assert!(matches!(
        p.encode_text(&long),
        Err(Error::Length { len: 17, max: 16 })
    ));
}

#[test]
fn projection_matches_direct_product() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::Gated), 9).unwrap();
    let f = feats("x", 4, 6, false, 2);
    let out = p.project_image(&f).unwrap();
    let w = p.by_name("fusion.w_img").unwrap();
    for i in 0..4 {
        for j in 0..8 {
            let want: f64 = (0..6)
                .map(|k| f.patches.row(i)[k] as f64 * w.row(k)[j])
                .sum();
            assert!((out.row(i)[j] - want).abs() < 1e-12);
        }
    }
    let one = p.project_image(&feats("y", 1, 6, false, 1)).unwrap();
    assert_eq!(one.shape(), &[1, 8]);
    match p.project_image(&feats("z", 2, 5, false, 1)) {
        Err(Error::Dimension(m)) => assert!(m.contains("expected 6") && m.contains("got 5"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn identity_projection() {
    let cfg = ModelConfig {
        d_img: 8,
        ..micro(FusionMode::Gated)
    };
    let mut p = ModelParams::<f64>::init(&cfg, 9).unwrap();
    let i = p.index_of("fusion.w_img").unwrap();
    *p.tensor_mut(i) = Tensor::identity(8);
    let f = feats("x", 3, 8, false, 4);
    let out = p.project_image(&f).unwrap();
    assert!(out.max_abs_diff(&f.patches.cast()) < 1e-15);
}

fn with_zero_gate(mut p: ModelParams<f64>) -> ModelParams<f64> {
    for n in ["fusion.gate_u", "fusion.gate_v"] {
        let i = p.index_of(n).unwrap();
        p.tensor_mut(i).data_mut().fill(0.0);
    }
    p
}

#[test]
fn gate_examples() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::Gated), 2).unwrap();
    let h = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.37).sin());
    let c = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.11).cos());
    let (out, lambda) = p.gated_fuse(&h, &c).unwrap();
    for (k, &l) in lambda.data().iter().enumerate() {
        assert!(l > 0.0 && l < 1.0);
        let (a, b) = (h.data()[k], c.data()[k]);
        assert!(out.data()[k] >= a.min(b) - 1e-15 && out.data()[k] <= a.max(b) + 1e-15);
    }
    let (same, _) = p.gated_fuse(&h, &h).unwrap();
    assert!(same.max_abs_diff(&h) < 1e-15);

    let z = with_zero_gate(p);
    let (out, lambda) = z.gated_fuse(&h, &c).unwrap();
    assert!(lambda.data().iter().all(|&l| l == 0.5));
    for k in 0..24 {
        assert!((out.data()[k] - (h.data()[k] + c.data()[k]) / 2.0).abs() < 1e-15);
    }
    let bad = Tensor::zeros(&[2, 8]);
    assert!(matches!(z.gated_fuse(&h, &bad), Err(Error::Dimension(_))));
}

#[test]
fn scalar_gate_is_constant_per_row() {
    let cfg = ModelConfig {
        gate_mode: GateMode::Scalar,
        ..micro(FusionMode::Gated)
    };
    let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let h = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.37).sin());
    let c = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.11).cos());
    let (_, lambda) = p.gated_fuse(&h, &c).unwrap();
    for r in 0..3 {
        assert!(lambda.row(r).iter().all(|&x| x == lambda.row(r)[0]));
    }
}

#[test]
fn pooling_examples() {
    let h = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
    let out = pool_image_for_gate(&h, false, 2).unwrap();
    assert_eq!(out.data(), &[2.0, 2.0, 2.0, 2.0]);
    let out = pool_image_for_gate(&h, true, 3).unwrap();
    assert_eq!(out.data(), &[1.0; 6]);
    let one = Tensor::from_rows(&[vec![4.0, -1.0]]).unwrap();
    assert_eq!(
        pool_image_for_gate(&one, false, 2).unwrap().data(),
        &[4.0, -1.0, 4.0, -1.0]
    );
}

#[test]
fn empty_features_are_rejected() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::SelectiveAttention), 2).unwrap();
    let mut net = forward::Net::new(&p, false, false, 0);
    let h = net.tape.constant(Tensor::zeros(&[2, 8]));
    assert!(matches!(
        net.pool(h, 1, 0, false, 2),
        Err(Error::EmptyFeatures)
    ));
    assert!(matches!(
        net.select(h, h, 1, 2, 0),
        Err(Error::EmptyFeatures)
    ));
}

#[test]
fn selective_attention_examples() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::SelectiveAttention), 4).unwrap();
    let h = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.3).sin());
    let wv = p.by_name("fusion.select_v").unwrap();

    let img = Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1 - 0.3);
    let (ctx, w) = p.selective_attention(&h, &img).unwrap();
    let v = img.matmul(wv).unwrap();
    assert!(w.data().iter().all(|&x| x == 1.0));
    for r in 0..3 {
        for j in 0..8 {
            assert!((ctx.row(r)[j] - v.row(0)[j]).abs() < 1e-12);
        }
    }

    let img = Tensor::from_fn(&[4, 8], |i| (i % 8) as f64 * 0.2);
    let (ctx, _) = p.selective_attention(&h, &img).unwrap();
    let v = img.matmul(wv).unwrap();
    for r in 0..3 {
        for j in 0..8 {
            assert!((ctx.row(r)[j] - v.row(0)[j]).abs() < 1e-12);
        }
    }

    let img = Tensor::from_fn(&[5, 8], |i| ((i * 7) % 11) as f64 * 0.1 - 0.5);
    let (ctx, w) = p.selective_attention(&h, &img).unwrap();
    let v = img.matmul(wv).unwrap();
    for r in 0..3 {
        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..8 {
            let col: Vec<f64> = (0..5).map(|i| v.row(i)[j]).collect();
            let (lo, hi) = col
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            assert!(ctx.row(r)[j] >= lo - 1e-12 && ctx.row(r)[j] <= hi + 1e-12);
        }
    }
}

#[test]
fn raw_selective_attention_hand_computed() {
    let cfg = ModelConfig {
        d_model: 2,
        heads: 1,
        raw_qkv: true,
        ..micro(FusionMode::SelectiveAttention)
    };
    let p = ModelParams::<f64>::init(&cfg, 4).unwrap();
    assert!(p.index_of("fusion.select_q").is_none());
    let h = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let img = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
    let (ctx, w) = p.selective_attention(&h, &img).unwrap();
    let s = [1.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt()];
    let z = s[0].exp() + s[1].exp();
    let a = [s[0].exp() / z, s[1].exp() / z];
    assert!((w.data()[0] - a[0]).abs() < 1e-10);
    assert!((ctx.data()[0] - (a[0] * 1.0 + a[1] * 3.0)).abs() < 1e-10);
    assert!((ctx.data()[1] - (a[0] * 2.0 - a[1])).abs() < 1e-10);
}

fn pairs() -> Vec<(Vec<u32>, Vec<u32>)> {
    vec![
        (vec![4, 5, 6, 7], vec![8, 9, 10]),
        (vec![5, 9], vec![4, 11, 6, 7, 5]),
        (vec![10, 4, 8], vec![9]),
    ]
}

fn batch(mode: FusionMode, images: &[PatchFeatures]) -> Batch<f64> {
    let pr = pairs();
    let refs: Vec<(&[u32], &[u32])> = pr.iter().map(|(s, t)| (&s[..], &t[..])).collect();
    let imgs: Vec<&PatchFeatures> = images.iter().collect();
    Batch::new(&refs, mode.uses_image().then_some(&imgs[..])).unwrap()
}

fn images(p: usize, cls: bool, seed: u64) -> Vec<PatchFeatures> {
    (0..3)
        .map(|i| feats(&format!("{i}"), p, 6, cls, seed + i))
        .collect()
}

#[test]
fn decode_steps_reproduce_training_loss() {
    for mode in FusionMode::ALL {
        let cfg = ModelConfig {
            label_smoothing: 0.0,
            ..micro(mode)
        };
        let p = ModelParams::<f64>::init(&cfg, 21).unwrap();
        let imgs = images(3, true, 5);
        let mut total = 0.0;
        let mut count = 0;
        for (i, (src, tgt)) in pairs().iter().enumerate() {
            let enc = p
                .encode_pair(src, mode.uses_image().then(|| &imgs[i]))
                .unwrap();
            let mut prefix = vec![BOS];
            for &gold in tgt.iter().chain([EOS].iter()) {
                let logits = p.decode_step(&prefix, &enc).unwrap();
                assert_eq!(logits.shape(), &[12]);
                total -= log_softmax(logits.data())[gold as usize];
                count += 1;
                prefix.push(gold);
            }
        }
        let loss = p.forward_loss(&batch(mode, &imgs), false, 0).unwrap();
        assert!(
            (loss - total / count as f64).abs() < 1e-10,
            "{mode}: {loss} vs {}",
            total / count as f64
        );
    }
}

#[test]
fn later_tokens_do_not_change_earlier_logits() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::TextOnly), 21).unwrap();
    let enc = p.encode_pair(&[4, 5, 6], None).unwrap();
    let a = p
        .next_log_probs(&enc, &[vec![BOS, 7, 8], vec![BOS, 7, 9]])
        .unwrap();
    let b = p.decode_step(&[BOS, 7], &enc).unwrap();
    let lb = log_softmax(b.data());
    let c = p
        .decoder_logits(&enc, &[vec![BOS, 7, 8], vec![BOS, 7, 11]])
        .unwrap();
    for j in 0..12 {
        assert!((c.row(1)[j] - b.data()[j]).abs() < 1e-12);
        assert!((c.row(4)[j] - b.data()[j]).abs() < 1e-12);
    }
    assert_ne!(a[0], a[1]);
    assert!(lb.iter().map(|x| x.exp()).sum::<f64>() - 1.0 < 1e-12);
}

#[test]
fn initial_loss_near_uniform() {
    let cfg = ModelConfig {
        src_vocab: 100,
        tgt_vocab: 100,
        ..ModelConfig::default()
    };
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let src: Vec<Vec<u32>> = (0..8)
        .map(|i| {
            (0..10)
                .map(|j| 4 + ((i * 13 + j * 7) % 96) as u32)
                .collect()
        })
        .collect();
    let refs: Vec<(&[u32], &[u32])> = src.iter().map(|s| (&s[..], &s[..])).collect();
    let b = Batch::<f32>::new(&refs, None).unwrap();
    let loss = p.forward_loss(&b, false, 0).unwrap();
    assert!((loss - 100f64.ln()).abs() < 0.2, "{loss}");
}

#[test]
fn text_only_ignores_features() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::TextOnly), 8).unwrap();
    let pr = pairs();
    let refs: Vec<(&[u32], &[u32])> = pr.iter().map(|(s, t)| (&s[..], &t[..])).collect();
    let a = images(3, false, 1);
    let b = images(3, false, 99);
    let ia: Vec<&PatchFeatures> = a.iter().collect();
    let ib: Vec<&PatchFeatures> = b.iter().collect();
    let la = p
        .forward_loss(&Batch::new(&refs, Some(&ia[..])).unwrap(), false, 0)
        .unwrap();
    let lb = p
        .forward_loss(&Batch::new(&refs, Some(&ib[..])).unwrap(), false, 0)
        .unwrap();
    let ln = p
        .forward_loss(&Batch::new(&refs, None).unwrap(), false, 0)
        .unwrap();
    assert_eq!(la, lb);
    assert_eq!(la, ln);
}

#[test]
fn fusion_modes_need_features() {
    for mode in [FusionMode::Gated, FusionMode::SelectiveAttention] {
        let p = ModelParams::<f64>::init(&micro(mode), 8).unwrap();
        let pr = pairs();
        let refs: Vec<(&[u32], &[u32])> = pr.iter().map(|(s, t)| (&s[..], &t[..])).collect();
        let b = Batch::new(&refs, None).unwrap();
        assert!(matches!(
            p.forward_loss(&b, false, 0),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn fusion_parameters_receive_gradient() {
    for mode in [FusionMode::Gated, FusionMode::SelectiveAttention] {
        let p = ModelParams::<f64>::init(&micro(mode), 8).unwrap();
        let g = p
            .loss_and_grads(&batch(mode, &images(4, false, 3)), false, 0)
            .unwrap();
        for n in ["fusion.w_img", "fusion.gate_u", "fusion.gate_v"] {
            let i = p.index_of(n).unwrap();
            assert!(
                g.grads[i].data().iter().any(|&x| x.abs() > 1e-9),
                "{mode} {n}"
            );
        }
    }
}

#[test]
fn patch_order_does_not_matter_for_selective_attention() {
    let mode = FusionMode::SelectiveAttention;
    let p = ModelParams::<f64>::init(&micro(mode), 8).unwrap();
    let imgs = images(5, false, 3);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted: Vec<PatchFeatures> = imgs
        .iter()
        .map(|f| {
            let rows: Vec<Vec<f32>> = perm.iter().map(|&r| f.patches.row(r).to_vec()).collect();
            PatchFeatures::new(f.image_id.clone(), Tensor::from_rows(&rows).unwrap(), false)
                .unwrap()
        })
        .collect();
    let a = p.forward_loss(&batch(mode, &imgs), false, 0).unwrap();
    let b = p.forward_loss(&batch(mode, &permuted), false, 0).unwrap();
    assert!((a - b).abs() < 1e-6);
}

#[test]
fn encode_pair_exposes_attention_and_gate() {
    let p = ModelParams::<f64>::init(&micro(FusionMode::SelectiveAttention), 8).unwrap();
    let f = feats("a", 5, 6, true, 1);
    let e = p.encode_pair(&[4, 5, 6], Some(&f)).unwrap();
    let attn = e.attn.unwrap();
    assert_eq!(attn.shape(), &[3, 5]);
    for r in 0..3 {
        assert!((attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(e.gate.unwrap().data().iter().all(|&l| l > 0.0 && l < 1.0));
}

#[test]
fn dropout_changes_training_loss_only() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..micro(FusionMode::Gated)
    };
    let p = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let b = batch(FusionMode::Gated, &images(2, false, 1));
    let e1 = p.forward_loss(&b, false, 1).unwrap();
    let e2 = p.forward_loss(&b, false, 2).unwrap();
    assert_eq!(e1, e2);
    let t1 = p.forward_loss(&b, true, 1).unwrap();
    assert_eq!(t1, p.forward_loss(&b, true, 1).unwrap());
    assert_ne!(t1, p.forward_loss(&b, true, 2).unwrap());
}
