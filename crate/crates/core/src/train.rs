//! Optimiser, learning-rate schedule, batching and the training loop.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ParallelExample;
use crate::decode::{translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureIndex, PatchFeatures};
use crate::metrics::bleu;
use crate::model::{load_checkpoint, save_checkpoint, Batch, ModelParams};
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocab;

/// Linear warmup from `floor` to `peak`, then inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub floor: f64,
    pub peak: f64,
    pub warmup: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            floor: 1e-7,
            peak: 5e-3,
            warmup: 2000,
        }
    }
}

impl Schedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            return self.peak / (step.max(1) as f64).sqrt();
        }
        if step <= self.warmup {
            self.floor + (self.peak - self.floor) * step as f64 / self.warmup as f64
        } else {
            self.peak * (self.warmup as f64 / step as f64).sqrt()
        }
    }
}

/// Learning rate at `step` under the default schedule.
pub fn lr_schedule(step: u64) -> f64 {
    Schedule::default().lr(step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros = |i: usize| vec![T::zero(); params.tensor(i).numel()];
        Adam {
            config,
            step: 0,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        // eps is applied to the bias-corrected second moment
        let eps_hat = T::of(c.eps * (1.0 - c.beta2.powi(t)).sqrt());
        let lr_t = T::of(lr_t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w -= lr_t * *m / (v.sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

/// Token ids of one example and the index of its feature record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub image: Option<usize>,
}

impl EncodedExample {
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len() + 1
    }
}

/// Id-encoded corpus with its feature records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<EncodedExample>,
    pub features: Vec<PatchFeatures>,
}

impl Dataset {
    pub fn encode(
        examples: &[ParallelExample],
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        features: Option<&FeatureIndex>,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(examples.len());
        let mut feats = Vec::new();
        for (i, e) in examples.iter().enumerate() {
            if e.src.is_empty() {
                return Err(Error::Contract(format!("example {i} has an empty source")));
            }
            let image = match features {
                Some(idx) => {
                    feats.push(idx.get(&e.image_id)?.clone());
                    Some(feats.len() - 1)
                }
                None => None,
            };
            out.push(EncodedExample {
                src: src_vocab.encode(&e.src),
                tgt: tgt_vocab.encode(&e.tgt),
                image,
            });
        }
        Ok(Dataset {
            examples: out,
            features: feats,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn image(&self, i: usize) -> Option<&PatchFeatures> {
        self.examples[i].image.map(|k| &self.features[k])
    }

    /// Feature payloads reassigned to other examples (see `shuffle_incongruent`).
    pub fn with_features(&self, features: Vec<PatchFeatures>) -> Result<Self> {
        if features.len() != self.features.len() {
            return Err(Error::Alignment(format!(
                "{} replacement records for {}",
                features.len(),
                self.features.len()
            )));
        }
        Ok(Dataset {
            examples: self.examples.clone(),
            features,
        })
    }

    /// Stacks examples into a padded batch.
    pub fn batch<T: Real>(&self, idx: &[usize], with_images: bool) -> Result<Batch<T>> {
        let pairs: Vec<(&[u32], &[u32])> = idx
            .iter()
            .map(|&i| (&self.examples[i].src[..], &self.examples[i].tgt[..]))
            .collect();
        if !with_images {
            return Batch::new(&pairs, None);
        }
        let imgs = idx
            .iter()
            .map(|&i| {
                self.image(i)
                    .ok_or_else(|| Error::Config(format!("example {i} has no image features")))
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::new(&pairs, Some(&imgs))
    }
}

/// Groups a seeded shuffle of the corpus into batches of at most
/// `max_tokens` source+target tokens (a single longer example forms its own batch).
pub fn token_batches(data: &Dataset, max_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let n = data.examples[i].tokens();
        if !cur.is_empty() && used + n > max_tokens {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub batch_tokens: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Validate (and checkpoint) every this many steps; 0 disables validation.
    pub valid_every: u64,
    /// Stop after this many validations without a BLEU improvement.
    pub patience: usize,
    /// Number of most recent checkpoints to average at the end.
    pub average_last: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            batch_tokens: 4096,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            valid_every: 200,
            patience: 10,
            average_last: 10,
            decode: DecodeConfig {
                beam: 1,
                max_out_len: 64,
            },
            seed: 1,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be ≥ 1".into()));
        }
        if !(self.schedule.peak > 0.0 && self.schedule.floor >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("Adam needs β in [0,1) and ε > 0".into()));
        }
        self.decode.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_bleu: Option<f64>,
}

impl LogRow {
    pub fn tsv(&self) -> String {
        let bleu = self.val_bleu.map_or(String::new(), |b| format!("{b:.4}"));
        format!("{}\t{:.6e}\t{:.6}\t{bleu}", self.step, self.lr, self.loss)
    }
}

pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Mean of the last `average_last` validation checkpoints, if any were taken.
    pub averaged: Option<ModelParams<T>>,
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub best_bleu: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub early_stopped: bool,
}

impl<T> TrainOutcome<T> {
    pub fn final_params(&self) -> &ModelParams<T> {
        self.averaged.as_ref().unwrap_or(&self.params)
    }
}

/// Decodes every example of a dataset.
pub fn translate_all<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    let uses_image = params.config().fusion_mode.uses_image();
    (0..data.len())
        .map(|i| {
            let img = if uses_image { data.image(i) } else { None };
            Ok(translate(params, &data.examples[i].src, img, cfg)?.tokens)
        })
        .collect()
}

pub fn corpus_bleu<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset,
    cfg: &DecodeConfig,
) -> Result<f64> {
    let hyps = translate_all(params, data, cfg)?;
    let refs: Vec<Vec<u32>> = data.examples.iter().map(|e| e.tgt.clone()).collect();
    bleu(&hyps, &refs)
}

/// Teacher-forced accuracy over a dataset, in batches of `batch_tokens`.
pub fn token_accuracy<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset,
    batch_tokens: usize,
) -> Result<f64> {
    let uses_image = params.config().fusion_mode.uses_image();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut c, mut n) = (0, 0);
    for idx in token_batches(data, batch_tokens, &mut rng) {
        let b = data.batch::<T>(&idx, uses_image)?;
        let (ci, ni) = params.teacher_forced_accuracy(&b)?;
        c += ci;
        n += ni;
    }
    Ok(c as f64 / n.max(1) as f64)
}

/// Mean loss per target token over a dataset, dropout off.
pub fn dataset_loss<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset,
    batch_tokens: usize,
) -> Result<f64> {
    let uses_image = params.config().fusion_mode.uses_image();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut n) = (0.0, 0usize);
    for idx in token_batches(data, batch_tokens, &mut rng) {
        let b = data.batch::<T>(&idx, uses_image)?;
        let tokens = b
            .text
            .tgt_out
            .iter()
            .filter(|&&t| t != crate::vocab::PAD)
            .count();
        total += params.forward_loss(&b, false, 0)? * tokens as f64;
        n += tokens;
    }
    Ok(total / n.max(1) as f64)
}

/// Trains `params` in place of a copy and returns the result.
pub fn train<T: Real>(
    mut params: ModelParams<T>,
    data: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let uses_image = params.config().fusion_mode.uses_image();
    if uses_image && data.features.is_empty() {
        return Err(Error::Config(format!(
            "fusion mode {} needs image features",
            params.config().fusion_mode
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log_file = match &cfg.log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "step\tlr\tloss\tval_bleu")?;
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params, cfg.adam);
    let mut log = Vec::new();
    let mut recent: VecDeque<ModelParams<T>> = VecDeque::new();
    let mut checkpoints = Vec::new();
    let mut best_bleu: Option<f64> = None;
    let mut stale = 0;
    let mut step = 0u64;
    let mut early_stopped = false;
    'outer: while step < cfg.max_steps {
        for idx in token_batches(data, cfg.batch_tokens, &mut rng) {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            let batch = data.batch::<T>(&idx, uses_image)?;
            let out = params.loss_and_grads(
                &batch,
                true,
                cfg.seed.wrapping_mul(1_000_003).wrapping_add(step),
            )?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    loss: out.loss,
                });
            }
            let lr = cfg.schedule.lr(step);
            adam.update(&mut params, &out.grads, lr)?;
            let mut row = LogRow {
                step,
                lr,
                loss: out.loss,
                val_bleu: None,
            };
            if cfg.valid_every > 0 && step.is_multiple_of(cfg.valid_every) {
                if let Some(v) = valid {
                    let b = corpus_bleu(&params, v, &cfg.decode)?;
                    row.val_bleu = Some(b);
                    if best_bleu.is_none_or(|best| b > best) {
                        best_bleu = Some(b);
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
                if let Some(dir) = &cfg.checkpoint_dir {
                    let p = dir.join(format!("checkpoint_{step:07}.mmtc"));
                    save_checkpoint(&p, &params, step)?;
                    checkpoints.push(p);
                }
                if cfg.average_last > 0 {
                    recent.push_back(params.clone());
                    if recent.len() > cfg.average_last {
                        recent.pop_front();
                    }
                }
                info!(
                    "step {step} loss {:.4} lr {lr:.3e} val_bleu {:?}",
                    out.loss, row.val_bleu
                );
            } else {
                debug!("step {step} loss {:.4}", out.loss);
            }
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", row.tsv())?;
            }
            log.push(row);
            if valid.is_some() && cfg.patience > 0 && stale >= cfg.patience {
                early_stopped = true;
                break 'outer;
            }
        }
    }
    let averaged = if recent.is_empty() {
        None
    } else {
        Some(ModelParams::average(recent.make_contiguous())?)
    };
    Ok(TrainOutcome {
        params,
        averaged,
        log,
        steps: step,
        best_bleu,
        checkpoints,
        early_stopped,
    })
}

/// Mean of the parameters stored in several checkpoint files.
pub fn average_checkpoints<T: Real>(paths: &[&Path]) -> Result<ModelParams<T>> {
    if paths.is_empty() {
        return Err(Error::Checkpoint("no checkpoints to average".into()));
    }
    let sets = paths
        .iter()
        .map(|p| load_checkpoint::<T>(p).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::average(&sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionMode, ModelConfig};

    #[test]
    fn schedule_goldens() {
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(lr_schedule(0), 1e-7) < 1e-12);
        assert!(rel(lr_schedule(2000), 5e-3) < 1e-12);
        assert!(rel(lr_schedule(8000), 2.5e-3) < 1e-12);
        assert!(rel(lr_schedule(2001), 5e-3) < 1e-3);
        assert!(lr_schedule(1000) < lr_schedule(1999));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 4,
            d_ffn: 4,
            heads: 1,
            src_vocab: 6,
            tgt_vocab: 6,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor<f64>> = (0..p.len())
            .map(|i| Tensor::from_fn(p.tensor(i).shape(), |k| if k % 2 == 0 { 0.3 } else { -2.0 }))
            .collect();
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.update(&mut p, &grads, 0.01).unwrap();
        for i in 0..p.len() {
            for (k, (a, b)) in p
                .tensor(i)
                .data()
                .iter()
                .zip(before.tensor(i).data())
                .enumerate()
            {
                let want = if k % 2 == 0 { -0.01 } else { 0.01 };
                assert!((a - b - want).abs() < 1e-8);
            }
        }
    }

    fn copy_data(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let s: Vec<u32> = (0..3 + i % 3)
                    .map(|j| 4 + ((i * 7 + j * 3) % 8) as u32)
                    .collect();
                EncodedExample {
                    src: s.clone(),
                    tgt: s,
                    image: None,
                }
            })
            .collect();
        Dataset {
            examples,
            features: vec![],
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            d_ffn: 32,
            heads: 2,
            dropout: 0.1,
            fusion_mode: FusionMode::TextOnly,
            src_vocab: 12,
            tgt_vocab: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batches_respect_token_budget() {
        let d = copy_data(30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = token_batches(&d, 40, &mut rng);
        let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.iter().map(|&i| d.examples[i].tokens()).sum::<usize>() <= 40);
        }
    }

    #[test]
    fn loss_falls_and_runs_are_identical() {
        let d = copy_data(20);
        let cfg = TrainConfig {
            max_steps: 60,
            batch_tokens: 80,
            schedule: Schedule {
                warmup: 20,
                ..Schedule::default()
            },
            valid_every: 20,
            average_last: 2,
            ..TrainConfig::default()
        };
        let p = ModelParams::<f32>::init(&tiny(), 4).unwrap();
        let a = train(p.clone(), &d, Some(&d), &cfg).unwrap();
        let b = train(p, &d, Some(&d), &cfg).unwrap();
        let la: Vec<u64> = a.log.iter().map(|r| r.loss.to_bits()).collect();
        let lb: Vec<u64> = b.log.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(la, lb);
        assert!(a.log.last().unwrap().loss < a.log[0].loss);
        assert!(a.averaged.is_some());
        assert_eq!(a.log.iter().filter(|r| r.val_bleu.is_some()).count(), 3);
    }

    #[test]
    fn divergence_names_the_step() {
        let d = copy_data(4);
        let cfg = TrainConfig {
            max_steps: 5,
            schedule: Schedule {
                floor: 1e30,
                peak: 1e30,
                warmup: 1,
            },
            ..TrainConfig::default()
        };
        let p = ModelParams::<f32>::init(&tiny(), 4).unwrap();
        match train(p, &d, None, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 2),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn averaging_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(&tiny(), 4).unwrap();
        let mut z = p.clone();
        for i in 0..z.len() {
            z.tensor_mut(i).data_mut().fill(0.0);
        }
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&a, &p, 1).unwrap();
        save_checkpoint(&b, &z, 2).unwrap();
        let avg = average_checkpoints::<f32>(&[&a, &b]).unwrap();
        for i in 0..p.len() {
            for (x, y) in avg.tensor(i).data().iter().zip(p.tensor(i).data()) {
                assert_eq!(*x, y / 2.0);
            }
        }
        let same = average_checkpoints::<f32>(&[a.as_path(); 10]).unwrap();
        assert_eq!(same.tensor(3), p.tensor(3));
        assert!(average_checkpoints::<f32>(&[]).is_err());
    }
}
