//! Central finite-difference checks of every tape operation and of the full
//! model in each fusion mode, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::features::PatchFeatures;
use crate::model::{Batch, FusionMode, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const NEGLIGIBLE: f64 = 1e-7;

/// Outcome of one check: the worst per-tensor relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub elements: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both norms are below
/// [`NEGLIGIBLE`]. Central differences at `STEP` carry rounding noise near
/// 1e-11 per element, so a true zero gradient never reads as exactly zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let (na, nn) = (norm(analytic), norm(numeric));
    if na < NEGLIGIBLE && nn < NEGLIGIBLE {
        return 0.0;
    }
    norm(&diff) / na.max(nn)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU is never evaluated at its kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Checks `sum(R ⊙ build(inputs))` for a fixed random `R`.
fn check_fn(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, build: &Build) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let weights: std::cell::RefCell<Option<Tensor<f64>>> = std::cell::RefCell::new(None);
    let mut eval = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), grad)).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let r = weights
            .borrow_mut()
            .get_or_insert_with(|| random_tensor(&mut rng, &shape, -1.0, 1.0))
            .clone();
        let r = tape.constant(r);
        let prod = tape.mul(out, r)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v)).collect()))
    };
    let (_, grads) = eval(&inputs, true)?;
    let mut worst = 0f64;
    let mut elements = 0;
    let mut vals = inputs.clone();
    for i in 0..vals.len() {
        let mut numeric = vec![0.0; vals[i].numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x = vals[i].data()[k];
            vals[i].data_mut()[k] = x + STEP;
            let (fp, _) = eval(&vals, false)?;
            vals[i].data_mut()[k] = x - STEP;
            let (fm, _) = eval(&vals, false)?;
            vals[i].data_mut()[k] = x;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        let analytic = grads[i]
            .as_ref()
            .map_or_else(|| vec![0.0; numeric.len()], |g| g.data().to_vec());
        worst = worst.max(relative_error(&analytic, &numeric));
        elements += numeric.len();
    }
    Ok(GradReport {
        name: name.to_string(),
        seed,
        max_rel_err: worst,
        elements,
    })
}

/// Names accepted by [`check_op`].
pub const OPS: [&str; 17] = [
    "matmul",
    "bmm",
    "bmm_transposed",
    "add_broadcast",
    "sub",
    "mul_broadcast",
    "scale",
    "sigmoid",
    "relu",
    "dropout",
    "softmax_rows",
    "layer_norm",
    "embedding",
    "reshape",
    "permute",
    "sum",
    "cross_entropy",
];

/// Finite-difference check of one operation on random shapes drawn from `seed`.
pub fn check_op(name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n, b) = (dim(1, 5), dim(1, 5), dim(1, 5), dim(1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, -1.5, 1.5);
    match name {
        "matmul" => check_fn(name, seed, vec![t(&[m, k]), t(&[k, n])], &|tp, v| {
            tp.matmul(v[0], v[1])
        }),
        "bmm" => check_fn(name, seed, vec![t(&[b, m, k]), t(&[b, k, n])], &|tp, v| {
            tp.bmm(v[0], v[1], false)
        }),
        "bmm_transposed" => check_fn(name, seed, vec![t(&[b, m, k]), t(&[b, n, k])], &|tp, v| {
            tp.bmm(v[0], v[1], true)
        }),
        "add_broadcast" => check_fn(name, seed, vec![t(&[m, n]), t(&[n])], &|tp, v| {
            tp.add(v[0], v[1])
        }),
        "sub" => check_fn(name, seed, vec![t(&[m, n]), t(&[m, n])], &|tp, v| {
            tp.sub(v[0], v[1])
        }),
        "mul_broadcast" => check_fn(name, seed, vec![t(&[b, m, n]), t(&[1, m, n])], &|tp, v| {
            tp.mul(v[0], v[1])
        }),
        "scale" => check_fn(name, seed, vec![t(&[m, n])], &|tp, v| {
            Ok(tp.scale(v[0], -0.7))
        }),
        "sigmoid" => check_fn(name, seed, vec![t(&[m, n]).map(|x| x * 4.0)], &|tp, v| {
            Ok(tp.sigmoid(v[0]))
        }),
        "relu" => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            check_fn(name, seed, vec![off_kink(&mut r, &[m, n])], &|tp, v| {
                Ok(tp.relu(v[0]))
            })
        }
        "dropout" => {
            let s = seed;
            check_fn(name, seed, vec![t(&[m, n + 4])], &move |tp, v| {
                tp.dropout(v[0], 0.3, s, true)
            })
        }
        "softmax_rows" => check_fn(
            name,
            seed,
            vec![t(&[b, m, n + 1]).map(|x| x * 3.0)],
            &|tp, v| Ok(tp.softmax_rows(v[0])),
        ),
        "layer_norm" => check_fn(
            name,
            seed,
            vec![t(&[m, n + 1]), t(&[n + 1]), t(&[n + 1])],
            &|tp, v| tp.layer_norm(v[0], v[1], v[2]),
        ),
        "embedding" => {
            let ids: Vec<u32> = (0..m + 2)
                .map(|i| ((i * 7 + seed as usize) % (k + 1)) as u32)
                .collect();
            check_fn(name, seed, vec![t(&[k + 1, n])], &move |tp, v| {
                tp.embedding(v[0], &ids)
            })
        }
        "reshape" => check_fn(name, seed, vec![t(&[m, k * n])], &move |tp, v| {
            tp.reshape(v[0], &[m * k, n])
        }),
        "permute" => check_fn(name, seed, vec![t(&[b, m, k, n])], &|tp, v| {
            tp.permute(v[0], &[0, 2, 1, 3])
        }),
        "sum" => check_fn(name, seed, vec![t(&[m, n])], &|tp, v| {
            let s = tp.sum(v[0]);
            Ok(s)
        }),
        "cross_entropy" => {
            let v_size = n + 2;
            let targets: Vec<u32> = (0..m + 1)
                .map(|i| {
                    if i == 1 {
                        0
                    } else {
                        ((i * 5 + seed as usize) % v_size) as u32
                    }
                })
                .collect();
            let targets = if targets.iter().all(|&x| x == 0) {
                vec![1; m + 1]
            } else {
                targets
            };
            check_fn(
                name,
                seed,
                vec![t(&[m + 1, v_size]).map(|x| x * 2.0)],
                &move |tp, v| tp.cross_entropy_label_smoothed(v[0], &targets, 0.1, 0),
            )
        }
        other => Err(crate::error::Error::Config(format!(
            "no gradient check named `{other}`"
        ))),
    }
}

/// Small configuration used by the full-model check.
pub fn micro_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 8,
        d_ffn: 12,
        heads: 2,
        dropout: 0.1,
        label_smoothing: 0.1,
        fusion_mode: mode,
        d_img: 6,
        src_vocab: 11,
        tgt_vocab: 12,
        max_len: 16,
        ..ModelConfig::default()
    }
}

/// Two-sentence micro-batch with random features, derived from `seed`.
pub fn micro_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C4);
    let mut sent = |len: usize, vocab: usize| -> Vec<u32> {
        (0..len)
            .map(|_| rng.random_range(4..vocab as u32))
            .collect()
    };
    let s1 = sent(4, cfg.src_vocab);
    let s2 = sent(2, cfg.src_vocab);
    let t1 = sent(3, cfg.tgt_vocab);
    let t2 = sent(5, cfg.tgt_vocab);
    let has_cls = seed.is_multiple_of(2);
    let feats: Vec<PatchFeatures> = (0..2)
        .map(|i| {
            let t = Tensor::from_fn(&[3, cfg.d_img], |_| rng.random_range(-1.0f32..1.0));
            PatchFeatures::new(format!("{i}"), t, has_cls)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&PatchFeatures> = feats.iter().collect();
    Batch::new(
        &[(&s1[..], &t1[..]), (&s2[..], &t2[..])],
        cfg.fusion_mode.uses_image().then_some(&refs[..]),
    )
}

/// Checks every parameter of the model on a micro-batch. Dropout is active
/// with a fixed seed, so the loss is a deterministic function of the weights.
pub fn check_model(mode: FusionMode, seed: u64) -> Result<GradReport> {
    let cfg = micro_config(mode);
    let mut params = ModelParams::<f64>::init(&cfg, seed)?;
    // random gains/biases so no parameter sits at a special point
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFACE);
    for i in 0..params.len() {
        if params.tensor(i).shape().len() == 1 {
            for x in params.tensor_mut(i).data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
    let batch = micro_batch(&cfg, seed)?;
    let drop_seed = seed.wrapping_mul(31);
    let analytic = params.loss_and_grads(&batch, true, drop_seed)?;
    let mut worst = 0f64;
    let mut elements = 0;
    for i in 0..params.len() {
        let n = params.tensor(i).numel();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x = params.tensor(i).data()[k];
            params.tensor_mut(i).data_mut()[k] = x + STEP;
            let fp = params.forward_loss(&batch, true, drop_seed)?;
            params.tensor_mut(i).data_mut()[k] = x - STEP;
            let fm = params.forward_loss(&batch, true, drop_seed)?;
            params.tensor_mut(i).data_mut()[k] = x;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.grads[i].data(), &numeric));
        elements += n;
    }
    Ok(GradReport {
        name: format!("model/{mode}"),
        seed,
        max_rel_err: worst,
        elements,
    })
}

/// Every operation and every fusion mode over `seeds` seeds.
pub fn full_suite(seeds: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for op in OPS {
        for s in 0..seeds {
            out.push(check_op(op, s)?);
        }
    }
    for mode in FusionMode::ALL {
        for s in 0..seeds {
            out.push(check_model(mode, s)?);
        }
    }
    Ok(out)
}
