//! Planted-signal experiments: a synthetic corpus whose masked words can only
//! be recovered from synthetic image features.

use crate::corpus::ParallelExample;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::features::{
    generate_synthetic, FeatureIndex, FeatureRegime, PatchFeatures, SyntheticSpec,
};
use crate::metrics::bleu;
use crate::model::{FusionMode, ModelConfig, ModelParams};
use crate::probing::{mask_parallel, ProbingTask, SidecarEntry};
use crate::report::{congruence_report, EvalReport};
use crate::synth::{generate_corpus, CorpusSpec};
use crate::train::{train, translate_all, Dataset, TrainConfig};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSetup {
    pub corpus: CorpusSpec,
    pub task: ProbingTask,
    pub sigma: f64,
    pub regime: FeatureRegime,
    pub valid: usize,
    pub test: usize,
}

impl Default for PlantedSetup {
    fn default() -> Self {
        PlantedSetup {
            corpus: CorpusSpec::default(),
            task: ProbingTask::Noun(2),
            sigma: 0.5,
            regime: FeatureRegime::standard("vit-224-32", 64).expect("standard regime"),
            valid: 100,
            test: 300,
        }
    }
}

/// Encoded splits plus everything needed to score the test split.
#[derive(Clone, Debug)]
pub struct PlantedData {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Sidecar entries of the test split, with lines relative to it.
    pub test_sidecar: Vec<SidecarEntry>,
    pub masked: Vec<ParallelExample>,
    pub features: Vec<PatchFeatures>,
}

/// Generates, masks, plants and splits. The last `test` pairs form the test
/// split and the `valid` pairs before them the validation split.
pub fn prepare_planted(setup: &PlantedSetup, seed: u64) -> Result<PlantedData> {
    let corpus = generate_corpus(&CorpusSpec {
        seed,
        ..setup.corpus.clone()
    });
    let n = corpus.examples.len();
    if setup.valid + setup.test >= n {
        return Err(Error::Config(format!(
            "{} pairs cannot hold {} validation and {} test pairs",
            n, setup.valid, setup.test
        )));
    }
    let (masked, probing) = mask_parallel(&corpus.examples, &corpus.lexicon, setup.task)?;
    let spec = SyntheticSpec::new(
        corpus.plantable_words(),
        setup.regime.clone(),
        setup.sigma,
        seed,
    )?;
    let features = generate_synthetic(&masked, &probing.examples, &spec)?;
    let index = FeatureIndex::new(features.clone())?;

    let train_end = n - setup.valid - setup.test;
    let valid_end = n - setup.test;
    let src_vocab = Vocab::build(masked[..train_end].iter().map(|e| e.src.as_slice()));
    let tgt_vocab = Vocab::build(masked[..train_end].iter().map(|e| e.tgt.as_slice()));
    let split = |r: std::ops::Range<usize>| {
        Dataset::encode(&masked[r], &src_vocab, &tgt_vocab, Some(&index))
    };
    let test_sidecar = probing
        .sidecar
        .iter()
        .filter(|e| e.line >= valid_end)
        .map(|e| SidecarEntry {
            line: e.line - valid_end,
            ..e.clone()
        })
        .collect();
    Ok(PlantedData {
        train: split(0..train_end)?,
        valid: split(train_end..valid_end)?,
        test: split(valid_end..n)?,
        test_sidecar,
        src_vocab,
        tgt_vocab,
        masked,
        features,
    })
}

/// Model configuration sized to the prepared vocabularies and features.
pub fn planted_model(base: &ModelConfig, data: &PlantedData, mode: FusionMode) -> ModelConfig {
    ModelConfig {
        fusion_mode: mode,
        d_img: data.features.first().map_or(base.d_img, PatchFeatures::dim),
        src_vocab: data.src_vocab.len(),
        tgt_vocab: data.tgt_vocab.len(),
        ..base.clone()
    }
}

pub struct PlantedRun {
    pub mode: FusionMode,
    pub params: ModelParams<f32>,
    pub report: EvalReport,
}

/// Trains one mode and scores the test split: BLEU, probing under both
/// criteria, and congruent/incongruent BLEU.
pub fn run_planted(
    data: &PlantedData,
    base: &ModelConfig,
    mode: FusionMode,
    train_cfg: &TrainConfig,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<PlantedRun> {
    let cfg = planted_model(base, data, mode);
    let init = ModelParams::<f32>::init(&cfg, seed)?;
    let tc = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let valid = (tc.valid_every > 0).then_some(&data.valid);
    let outcome = train(init, &data.train, valid, &tc)?;
    let params = outcome.final_params().clone();
    let report = evaluate_planted(&params, data, decode, seed)?;
    Ok(PlantedRun {
        mode,
        params,
        report,
    })
}

pub fn evaluate_planted(
    params: &ModelParams<f32>,
    data: &PlantedData,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    let hyps = translate_all(params, &data.test, decode)?;
    let words: Vec<Vec<String>> = hyps.iter().map(|h| data.tgt_vocab.decode(h)).collect();
    let mut report = EvalReport::new(data.test.len());
    let refs: Vec<Vec<u32>> = data.test.examples.iter().map(|e| e.tgt.clone()).collect();
    report.bleu = Some(bleu(&hyps, &refs)?);
    report.add_probing("noun", &words, &data.test_sidecar)?;
    report.congruence = Some(congruence_report(params, &data.test, decode, seed, true)?);
    Ok(report)
}
