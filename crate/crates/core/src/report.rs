//! Evaluation reports, congruent/incongruent comparison and attention dumps.

use std::fmt;
use std::path::Path;

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::features::{shuffle_incongruent, PatchFeatures};
use crate::metrics::{probing_accuracy, Criterion, ProbeScore};
use crate::model::{FusionMode, ModelParams};
use crate::probing::SidecarEntry;
use crate::tensor::{Real, Tensor};
use crate::train::{corpus_bleu, Dataset};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAccuracy {
    pub task: String,
    pub restrict: ProbeScore,
    pub relaxed: ProbeScore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Congruence {
    pub congruent: f64,
    pub incongruent: f64,
}

impl Congruence {
    pub fn delta(&self) -> f64 {
        self.congruent - self.incongruent
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub sentences: usize,
    pub bleu: Option<f64>,
    pub probing: Vec<TaskAccuracy>,
    pub congruence: Option<Congruence>,
}

impl EvalReport {
    pub fn new(sentences: usize) -> Self {
        EvalReport {
            sentences,
            ..EvalReport::default()
        }
    }

    /// Scores `hyps` under both criteria. Fails if restrict exceeds relaxed.
    pub fn add_probing<S: AsRef<str>>(
        &mut self,
        task: &str,
        hyps: &[Vec<S>],
        sidecar: &[SidecarEntry],
    ) -> Result<()> {
        let restrict = probing_accuracy(hyps, sidecar, Criterion::Restrict)?;
        let relaxed = probing_accuracy(hyps, sidecar, Criterion::Relaxed)?;
        if restrict.correct > relaxed.correct || restrict.total != sidecar.len() {
            return Err(Error::Contract(format!(
                "{task}: restrict {}/{} exceeds relaxed {}/{}",
                restrict.correct, restrict.total, relaxed.correct, relaxed.total
            )));
        }
        self.probing.push(TaskAccuracy {
            task: task.to_string(),
            restrict,
            relaxed,
        });
        Ok(())
    }

    /// Line-oriented `key=value` output.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("sentences={}\n", self.sentences);
        if let Some(b) = self.bleu {
            out.push_str(&format!("bleu={b:.4}\n"));
        }
        for t in &self.probing {
            out.push_str(&format!("probe.{}.masks={}\n", t.task, t.restrict.total));
            out.push_str(&format!(
                "probe.{}.restrict={:.6}\n",
                t.task,
                t.restrict.accuracy()
            ));
            out.push_str(&format!(
                "probe.{}.relaxed={:.6}\n",
                t.task,
                t.relaxed.accuracy()
            ));
        }
        if let Some(c) = self.congruence {
            out.push_str(&format!("bleu.congruent={:.4}\n", c.congruent));
            out.push_str(&format!("bleu.incongruent={:.4}\n", c.incongruent));
            out.push_str(&format!("bleu.delta={:.4}\n", c.delta()));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sentences evaluated: {}", self.sentences)?;
        if let Some(b) = self.bleu {
            writeln!(f, "BLEU: {b:.2}")?;
        }
        for t in &self.probing {
            writeln!(
                f,
                "{} probing over {} masks: restrict {:.2}%  relaxed {:.2}%",
                t.task,
                t.restrict.total,
                100.0 * t.restrict.accuracy(),
                100.0 * t.relaxed.accuracy()
            )?;
        }
        if let Some(c) = self.congruence {
            writeln!(
                f,
                "congruent BLEU {:.2}  incongruent BLEU {:.2}  delta {:.2}",
                c.congruent,
                c.incongruent,
                c.delta()
            )?;
        }
        Ok(())
    }
}

/// BLEU with the true features and with features deranged across the set.
/// Both decodes share `cfg`. A text-only model is rejected unless `force`.
pub fn congruence_report<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset,
    cfg: &DecodeConfig,
    seed: u64,
    force: bool,
) -> Result<Congruence> {
    if params.config().fusion_mode == FusionMode::TextOnly && !force {
        return Err(Error::Config(
            "incongruent decoding needs a model that reads images".into(),
        ));
    }
    let shuffled = data.with_features(shuffle_incongruent(&data.features, seed)?)?;
    Ok(Congruence {
        congruent: corpus_bleu(params, data, cfg)?,
        incongruent: corpus_bleu(params, &shuffled, cfg)?,
    })
}

/// Selective-attention weights `[L × p]` of one sentence.
pub fn attention_map<T: Real>(
    params: &ModelParams<T>,
    src: &[u32],
    features: &PatchFeatures,
) -> Result<Tensor<T>> {
    if params.config().fusion_mode != FusionMode::SelectiveAttention {
        return Err(Error::Config(format!(
            "attention dumps need selective_attention, model is {}",
            params.config().fusion_mode
        )));
    }
    let enc = params.encode_pair(src, Some(features))?;
    Ok(enc.attn.expect("selective attention yields weights"))
}

/// One CSV row per source token, one column per patch.
pub fn attention_csv<T: Real>(weights: &Tensor<T>) -> String {
    let mut out = String::new();
    for r in 0..weights.rows() {
        let row: Vec<String> = weights
            .row(r)
            .iter()
            .map(|x| format!("{}", x.as_f64()))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn dump_attention<T: Real>(
    params: &ModelParams<T>,
    src: &[u32],
    features: &PatchFeatures,
    path: &Path,
) -> Result<Tensor<T>> {
    let w = attention_map(params, src, features)?;
    std::fs::write(path, attention_csv(&w))?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::model::ModelConfig;
    use crate::probing::MaskCategory;

    fn entry(line: usize, reference: &str, forms: &[&str]) -> SidecarEntry {
        SidecarEntry {
            line,
            position: 0,
            category: MaskCategory::Color,
            original: "x".into(),
            reference_form: Some(reference.into()),
            relaxed_forms: forms.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn report_lines() {
        let mut r = EvalReport::new(2);
        r.bleu = Some(12.5);
        let hyps = vec![tokenize("rote"), tokenize("roter")];
        let side = vec![
            entry(0, "rote", &["rote", "roter"]),
            entry(1, "rote", &["rote", "roter"]),
        ];
        r.add_probing("color", &hyps, &side).unwrap();
        r.congruence = Some(Congruence {
            congruent: 20.0,
            incongruent: 15.0,
        });
        let kv = r.to_key_values();
        assert!(kv.contains("probe.color.restrict=0.500000\n"));
        assert!(kv.contains("probe.color.relaxed=1.000000\n"));
        assert!(kv.contains("bleu.delta=5.0000\n"));
        assert!(r.to_string().contains("restrict 50.00%"));
    }

    #[test]
    fn attention_dump_needs_selective_mode() {
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            d_ffn: 8,
            heads: 2,
            d_img: 4,
            src_vocab: 8,
            tgt_vocab: 8,
            fusion_mode: FusionMode::Gated,
            ..ModelConfig::default()
        };
        let f = PatchFeatures::new("a", Tensor::full(&[1, 4], 0.5), false).unwrap();
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        assert!(matches!(
            attention_map(&p, &[4, 5], &f),
            Err(Error::Config(_))
        ));
        let cfg = ModelConfig {
            fusion_mode: FusionMode::SelectiveAttention,
            ..cfg
        };
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let w = attention_map(&p, &[4, 5], &f).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        assert_eq!(attention_csv(&w), "1\n1\n");
    }
}
