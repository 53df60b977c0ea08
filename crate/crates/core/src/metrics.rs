//! Corpus BLEU-4 and restrict/relaxed probing accuracy.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::probing::SidecarEntry;

/// Matched and total n-gram counts for orders 1..=4, plus lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_p.exp()
    }
}

fn ngram_counts<W: Hash + Eq>(toks: &[W], n: usize) -> HashMap<&[W], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_default() += 1;
        }
    }
    m
}

pub fn bleu_stats<W: Hash + Eq>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("BLEU of an empty corpus".into()));
    }
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        st.hyp_len += h.len() as u64;
        st.ref_len += r.len() as u64;
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            st.totals[n - 1] += h.len().saturating_sub(n - 1) as u64;
            st.matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    Ok(st)
}

/// Corpus BLEU-4 in `[0, 100]`, no smoothing, single reference per line.
pub fn bleu<W: Hash + Eq>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    Restrict,
    Relaxed,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Restrict => "restrict",
            Criterion::Relaxed => "relaxed",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restrict" | "strict" => Ok(Criterion::Restrict),
            "relaxed" => Ok(Criterion::Relaxed),
            _ => Err(Error::Config(format!("unknown criterion `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProbeScore {
    pub correct: usize,
    pub total: usize,
}

impl ProbeScore {
    /// Micro-averaged accuracy; zero when nothing was scored.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Whether one hypothesis line satisfies one masked item.
pub fn item_correct<S: AsRef<str>>(hyp: &[S], entry: &SidecarEntry, criterion: Criterion) -> bool {
    let has = |form: &str| hyp.iter().any(|t| t.as_ref() == form);
    match criterion {
        Criterion::Restrict => entry.reference_form.as_deref().is_some_and(has),
        Criterion::Relaxed => {
            entry.reference_form.as_deref().is_some_and(has)
                || entry.relaxed_forms.iter().any(|f| has(f))
        }
    }
}

/// Scores every sidecar item against the hypothesis line it belongs to.
pub fn probing_accuracy<S: AsRef<str>>(
    hyps: &[Vec<S>],
    sidecar: &[SidecarEntry],
    criterion: Criterion,
) -> Result<ProbeScore> {
    let mut score = ProbeScore::default();
    for e in sidecar {
        let hyp = hyps.get(e.line).ok_or_else(|| {
            Error::Alignment(format!(
                "sidecar refers to line {} but there are {} hypotheses",
                e.line,
                hyps.len()
            ))
        })?;
        score.total += 1;
        score.correct += usize::from(item_correct(hyp, e, criterion));
    }
    Ok(score)
}
