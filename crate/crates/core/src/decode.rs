//! Greedy and beam-search decoding over any next-token model.
//!
//! Scores are summed log-probabilities with no length penalty. PAD and BOS are
//! never proposed. Ties go to the earlier hypothesis, then the lower token id.

use crate::error::{Error, Result};
use crate::features::PatchFeatures;
use crate::model::{EncodedPair, ModelParams};
use crate::tensor::Real;
use crate::vocab::{BOS, EOS, PAD};

/// Something that scores the next token of BOS-prefixed sequences.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// One log-probability row per prefix. All prefixes share a length.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// A model bound to one encoded source sentence.
pub struct BoundModel<'a, T: Real> {
    pub params: &'a ModelParams<T>,
    pub encoded: EncodedPair<T>,
}

impl<'a, T: Real> BoundModel<'a, T> {
    pub fn new(
        params: &'a ModelParams<T>,
        src: &[u32],
        image: Option<&PatchFeatures>,
    ) -> Result<Self> {
        Ok(BoundModel {
            params,
            encoded: params.encode_pair(src, image)?,
        })
    }
}

impl<T: Real> StepModel for BoundModel<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config().tgt_vocab
    }

    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        self.params.next_log_probs(&self.encoded, prefixes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_out_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_out_len: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_out_len == 0 {
            return Err(Error::Config("beam and max_out_len must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without BOS and EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

fn proposable(v: usize) -> bool {
    v as u32 != PAD && v as u32 != BOS
}

pub fn greedy<M: StepModel + ?Sized>(model: &M, max_out_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_out_len {
        let lp = model.next_log_probs(std::slice::from_ref(&prefix))?;
        let row = &lp[0];
        let mut best: Option<usize> = None;
        for v in (0..row.len()).filter(|&v| proposable(v)) {
            if best.is_none_or(|b| row[v] > row[b]) {
                best = Some(v);
            }
        }
        let v =
            best.ok_or_else(|| Error::Contract("vocabulary has no proposable tokens".into()))?;
        log_prob += row[v];
        if v as u32 == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(v as u32);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

pub fn beam_search<M: StepModel + ?Sized>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..cfg.max_out_len {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let lps = model.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, row) in lps.iter().enumerate() {
            for (v, &lp) in row.iter().enumerate() {
                if proposable(v) {
                    cands.push((alive[h].1 + lp, h, v));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam);
        for &(score, h, v) in cands.iter().take(cfg.beam) {
            let mut seq = alive[h].0.clone();
            if v as u32 == EOS {
                finished.push((seq, score));
            } else {
                seq.push(v as u32);
                next.push((seq, score));
            }
        }
        alive = next;
        let best_alive = alive.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished
            .iter()
            .map(|f| f.1)
            .fold(f64::NEG_INFINITY, f64::max);
        // Scores only decrease, so an alive hypothesis can no longer win.
        if alive.is_empty() || best_done >= best_alive {
            break;
        }
    }
    let pick = |pool: &[(Vec<u32>, f64)]| {
        pool.iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x.clone())
    };
    let (seq, score, done) = match pick(&finished) {
        Some((s, sc)) => (s, sc, true),
        None => {
            let (s, sc) = pick(&alive).expect("beam keeps at least one hypothesis");
            (s, sc, false)
        }
    };
    Ok(Hypothesis {
        tokens: seq[1..].to_vec(),
        log_prob: score,
        finished: done,
    })
}

/// Beam (or greedy for `beam == 1`) decode of one source sentence.
pub fn translate<T: Real>(
    params: &ModelParams<T>,
    src: &[u32],
    image: Option<&PatchFeatures>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let m = BoundModel::new(params, src, image)?;
    if cfg.beam == 1 {
        greedy(&m, cfg.max_out_len)
    } else {
        beam_search(&m, cfg)
    }
}

/// Table-driven model for tests: log-probs depend only on the prefix.
pub struct FnModel<F> {
    pub vocab: usize,
    pub f: F,
}

impl<F: Fn(&[u32]) -> Vec<f64>> StepModel for FnModel<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| (self.f)(p)).collect())
    }
}

/// Every completion up to `max_out_len` tokens: EOS-finished sequences and
/// unfinished ones of full length. Returns the best finished one, else the
/// best unfinished one.
pub fn exhaustive<M: StepModel + ?Sized>(model: &M, max_out_len: usize) -> Result<Hypothesis> {
    let mut best_done: Option<(Vec<u32>, f64)> = None;
    let mut best_open: Option<(Vec<u32>, f64)> = None;
    let mut frontier = vec![(vec![BOS], 0.0)];
    for depth in 0..max_out_len {
        let mut next = Vec::new();
        for (p, s) in &frontier {
            let row = &model.next_log_probs(std::slice::from_ref(p))?[0];
            for (v, &lp) in row.iter().enumerate().filter(|(v, _)| proposable(*v)) {
                let score = s + lp;
                if v as u32 == EOS {
                    if best_done.as_ref().is_none_or(|b| score > b.1) {
                        best_done = Some((p.clone(), score));
                    }
                } else {
                    let mut q = p.clone();
                    q.push(v as u32);
                    if depth + 1 == max_out_len && best_open.as_ref().is_none_or(|b| score > b.1) {
                        best_open = Some((q.clone(), score));
                    }
                    next.push((q, score));
                }
            }
        }
        frontier = next;
    }
    let (seq, score, done) = match (best_done, best_open) {
        (Some((s, sc)), _) => (s, sc, true),
        (None, Some((s, sc))) => (s, sc, false),
        (None, None) => return Err(Error::Contract("nothing to enumerate".into())),
    };
    Ok(Hypothesis {
        tokens: seq[1..].to_vec(),
        log_prob: score,
        finished: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_softmax;

    // Tokens: 0 pad, 1 bos, 2 eos, 3 a, 4 b.
    fn toy() -> FnModel<impl Fn(&[u32]) -> Vec<f64>> {
        FnModel {
            vocab: 5,
            f: |p: &[u32]| {
                let logits: [f64; 5] = match p {
                    [1] => [-9.0, -9.0, -3.0, 1.0, 0.8],
                    [1, 3] => [-9.0, -9.0, -1.0, 0.0, 0.0],
                    [1, 4] => [-9.0, -9.0, 3.0, -2.0, -2.0],
                    [1, 3, _] => [-9.0, -9.0, 0.5, 0.0, 0.0],
                    [1, 4, _] => [-9.0, -9.0, 2.0, 0.0, 0.0],
                    _ => [-9.0, -9.0, 0.0, 0.0, 0.0],
                };
                log_softmax(&logits)
            },
        }
    }

    #[test]
    fn beam_two_finds_what_greedy_misses() {
        let m = toy();
        let g = greedy(&m, 3).unwrap();
        let b = beam_search(
            &m,
            &DecodeConfig {
                beam: 2,
                max_out_len: 3,
            },
        )
        .unwrap();
        let e = exhaustive(&m, 3).unwrap();
        assert_eq!(b, e);
        assert_eq!(b.tokens, vec![4]);
        assert_ne!(g.tokens, b.tokens);
        assert!(b.log_prob >= g.log_prob);
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = toy();
        let g = greedy(&m, 3).unwrap();
        let b = beam_search(
            &m,
            &DecodeConfig {
                beam: 1,
                max_out_len: 3,
            },
        )
        .unwrap();
        assert_eq!(g, b);
    }

    #[test]
    fn unfinished_hypothesis_at_length_limit() {
        let m = FnModel {
            vocab: 4,
            f: |_: &[u32]| log_softmax(&[0.0, 0.0, -5.0, 5.0]),
        };
        let h = beam_search(
            &m,
            &DecodeConfig {
                beam: 1,
                max_out_len: 2,
            },
        )
        .unwrap();
        assert_eq!(h.tokens, vec![3, 3]);
        assert!(!h.finished);
        assert_eq!(h, greedy(&m, 2).unwrap());
        // a finished hypothesis is preferred whenever one exists
        let b = beam_search(
            &m,
            &DecodeConfig {
                beam: 2,
                max_out_len: 2,
            },
        )
        .unwrap();
        assert!(b.finished);
        assert_eq!(b, exhaustive(&m, 2).unwrap());
    }

    #[test]
    fn zero_beam_is_rejected() {
        assert!(beam_search(
            &toy(),
            &DecodeConfig {
                beam: 0,
                max_out_len: 3
            }
        )
        .is_err());
    }
}
