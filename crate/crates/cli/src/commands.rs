use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::info;

use mmt_probe::corpus::{
    line_image_id, read_lines, read_parallel, read_tokenized, write_tokenized,
};
use mmt_probe::decode::{translate, DecodeConfig};
use mmt_probe::features::{
    read_features, synthesize_one, write_features, FeatureIndex, PatchFeatures,
};
use mmt_probe::gradcheck::full_suite;
use mmt_probe::metrics::{bleu, probing_accuracy, Criterion};
use mmt_probe::model::{load_checkpoint, save_checkpoint};
use mmt_probe::probing::{build_probing_corpus, read_sidecar, write_sidecar, ProbingTask};
use mmt_probe::report::{congruence_report, dump_attention, EvalReport};
use mmt_probe::synth::{generate_corpus, CorpusSpec};
use mmt_probe::train::{average_checkpoints, train, Dataset};
use mmt_probe::{Error, FeatureRegime, MaskLexicon, ModelParams, SyntheticSpec, Vocab};

use crate::config::ExperimentConfig;
use crate::{Cli, Command, Global};

pub enum Failure {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// The operation itself failed; exit code 1.
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage<T>(r: mmt_probe::Result<T>) -> Outcome<T> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Format {
    /// Line-oriented `key=value`.
    #[default]
    Kv,
    /// Human-readable summary.
    Text,
}

struct Ctx {
    cfg: ExperimentConfig,
    global: Global,
}

impl Ctx {
    fn new(global: Global) -> Outcome<Self> {
        let mut cfg = match &global.config {
            Some(p) => usage(ExperimentConfig::load(p))?,
            None => ExperimentConfig::default(),
        };
        for o in &global.overrides {
            usage(cfg.set(o))?;
        }
        if let Some(s) = global.seed {
            usage(cfg.set(&format!("run.seed={s}")))?;
        }
        Ok(Ctx { cfg, global })
    }

    fn seed(&self) -> Outcome<u64> {
        usage(self.cfg.seed())
    }

    /// The explicit flag, else the configured key.
    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.cfg.path(key))
    }

    fn require(&self, flag: &Option<PathBuf>, key: &str, name: &str) -> Outcome<PathBuf> {
        self.path(flag, key)
            .ok_or_else(|| Failure::Usage(format!("{name} is required (flag or `{key}`)")))
    }

    fn lexicon(&self, flag: &Option<PathBuf>) -> Outcome<MaskLexicon> {
        match self.path(flag, "paths.lexicon") {
            Some(p) => Ok(MaskLexicon::read(&p)?),
            None => Ok(MaskLexicon::table1()),
        }
    }

    fn decode(&self, beam: Option<usize>, max_out_len: Option<usize>) -> Outcome<DecodeConfig> {
        let base = usage(self.cfg.decode())?;
        let cfg = DecodeConfig {
            beam: beam.unwrap_or(base.beam),
            max_out_len: max_out_len.unwrap_or(base.max_out_len),
        };
        usage(cfg.validate())?;
        Ok(cfg)
    }

    /// Writes to `--out`, or stdout without it.
    fn emit(&self, text: &str) -> Outcome {
        match &self.global.out {
            Some(p) => std::fs::write(p, text).map_err(|e| Failure::Domain(e.into())),
            None => std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Failure::Domain(e.into())),
        }
    }

    fn require_out(&self, what: &str) -> Outcome<PathBuf> {
        self.global
            .out
            .clone()
            .or_else(|| self.cfg.path("paths.out_dir"))
            .ok_or_else(|| Failure::Usage(format!("--out is required for {what}")))
    }
}

fn join_lines(lines: &[Vec<String>]) -> String {
    lines.iter().map(|l| l.join(" ") + "\n").collect()
}

fn report_text(r: &EvalReport, f: Format) -> String {
    match f {
        Format::Kv => r.to_key_values(),
        Format::Text => r.to_string(),
    }
}

pub fn run(cli: Cli) -> Outcome {
    let ctx = Ctx::new(cli.global)?;
    match cli.command {
        Command::Mask(a) => mask(&ctx, a),
        Command::GenCorpus(a) => gen_corpus(&ctx, a),
        Command::GenFeatures(a) => gen_features(&ctx, a),
        Command::Train => run_train(&ctx),
        Command::Translate(a) => run_translate(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Probe(a) => probe(&ctx, a),
        Command::Congruence(a) => congruence(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::DumpAttn(a) => dump_attn(&ctx, a),
        Command::AvgCkpt(a) => avg_ckpt(&ctx, a),
    }
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Tokenised source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// color, character, noun (with --k) or nounK.
    #[arg(long)]
    task: Option<String>,
    /// Number of nouns to mask for the noun task (1-4).
    #[arg(long)]
    k: Option<usize>,
    /// Lexicon TSV; the built-in example lexicon when absent.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Target references, used to pin each mask's exact target form.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Where to write the scoring sidecar.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

fn parse_task(
    name: Option<&str>,
    k: Option<usize>,
    cfg: &ExperimentConfig,
) -> Outcome<ProbingTask> {
    let task = match (name, k) {
        (Some("noun"), Some(k)) => usage(format!("noun{k}").parse())?,
        (Some("noun"), None) => return Err(Failure::Usage("the noun task needs --k".into())),
        (Some(t), None) => usage(t.parse())?,
        (Some(_), Some(_)) => {
            return Err(Failure::Usage("--k only applies to the noun task".into()))
        }
        (None, _) => {
            usage(cfg.task())?.ok_or_else(|| Failure::Usage("--task is required".into()))?
        }
    };
    Ok(task)
}

fn mask(ctx: &Ctx, a: MaskArgs) -> Outcome {
    let task = parse_task(a.task.as_deref(), a.k, &ctx.cfg)?;
    let lex = ctx.lexicon(&a.lexicon)?;
    let src = read_tokenized(&a.input)?;
    let refs = a.refs.as_deref().map(read_tokenized).transpose()?;
    let corpus = build_probing_corpus(&src, refs.as_deref(), &lex, task)?;
    if let Some(p) = &a.sidecar {
        write_sidecar(p, &corpus.sidecar)?;
    }
    info!(
        "{task}: masked {} items in {} of {} sentences",
        corpus.sidecar.len(),
        corpus.altered_sentences(),
        src.len()
    );
    let text: String = corpus
        .examples
        .iter()
        .map(|e| e.masked_line() + "\n")
        .collect();
    ctx.emit(&text)
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 3000)]
    pairs: usize,
    #[arg(long, default_value_t = 0.2)]
    plural_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    color_rate: f64,
}

fn gen_corpus(ctx: &Ctx, a: GenCorpusArgs) -> Outcome {
    let dir = ctx.require_out("gen-corpus")?;
    let corpus = generate_corpus(&CorpusSpec {
        pairs: a.pairs,
        plural_rate: a.plural_rate,
        color_rate: a.color_rate,
        seed: ctx.seed()?,
    });
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Domain(e.into()))?;
    let src: Vec<_> = corpus.examples.iter().map(|e| e.src.clone()).collect();
    let tgt: Vec<_> = corpus.examples.iter().map(|e| e.tgt.clone()).collect();
    write_tokenized(&dir.join("corpus.src"), &src)?;
    write_tokenized(&dir.join("corpus.tgt"), &tgt)?;
    let ids: String = corpus
        .examples
        .iter()
        .map(|e| e.image_id.clone() + "\n")
        .collect();
    std::fs::write(dir.join("image_ids"), ids).map_err(|e| Failure::Domain(e.into()))?;
    std::fs::write(dir.join("lexicon.tsv"), corpus.lexicon.to_tsv())
        .map_err(|e| Failure::Domain(e.into()))?;
    info!("wrote {} pairs to {}", a.pairs, dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenFeaturesArgs {
    /// Sidecar of the masked corpus; its originals are planted.
    #[arg(long)]
    sidecar: PathBuf,
    /// Any file with one line per sentence, for the line count.
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    image_ids: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Regime as `name:d_img`, `patches:d_img` or `patches:d_img:cls`.
    #[arg(long, default_value = "vit-224-32:64")]
    regime: String,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
}

fn image_ids(ids: Option<&Path>, lines: usize) -> Outcome<Vec<String>> {
    match ids {
        Some(p) => {
            let v: Vec<String> = read_lines(p)?
                .into_iter()
                .map(|l| l.trim().to_string())
                .collect();
            if v.len() != lines {
                return Err(
                    Error::Alignment(format!("{} ids for {lines} sentences", v.len())).into(),
                );
            }
            Ok(v)
        }
        None => Ok((0..lines).map(line_image_id).collect()),
    }
}

fn gen_features(ctx: &Ctx, a: GenFeaturesArgs) -> Outcome {
    let out = ctx.require_out("gen-features")?;
    let regime: FeatureRegime = usage(a.regime.parse())?;
    let lex = ctx.lexicon(&a.lexicon)?;
    let sidecar = read_sidecar(&a.sidecar)?;
    let src = ctx.require(&a.src, "paths.src", "--src")?;
    let lines = read_lines(&src)?.len();
    let ids = image_ids(ctx.path(&a.image_ids, "paths.image_ids").as_deref(), lines)?;
    let spec = SyntheticSpec::new(lex.plantable_words(), regime, a.sigma, ctx.seed()?)?;
    let mut planted: Vec<Vec<&str>> = vec![Vec::new(); lines];
    for e in &sidecar {
        planted
            .get_mut(e.line)
            .ok_or_else(|| {
                Error::Alignment(format!("sidecar line {} beyond {lines} sentences", e.line))
            })?
            .push(&e.original);
    }
    let records = ids
        .iter()
        .zip(&planted)
        .map(|(id, w)| synthesize_one(id, w, &spec))
        .collect::<mmt_probe::Result<Vec<_>>>()?;
    write_features(&out, &records)?;
    info!(
        "wrote {} feature records to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn feature_index(path: Option<PathBuf>) -> Outcome<Option<FeatureIndex>> {
    Ok(path
        .map(|p| read_features(&p).and_then(FeatureIndex::new))
        .transpose()?)
}

fn run_train(ctx: &Ctx) -> Outcome {
    let cfg = &ctx.cfg;
    let model = usage(cfg.model())?;
    let mut tc = usage(cfg.train())?;
    let dir = ctx.require_out("train")?;
    let src = ctx.require(&None, "paths.src", "paths.src")?;
    let tgt = ctx.require(&None, "paths.tgt", "paths.tgt")?;
    let features = cfg.path("paths.features");
    if model.fusion_mode.uses_image() && features.is_none() {
        return Err(Failure::Usage(format!(
            "fusion mode {} needs paths.features",
            model.fusion_mode
        )));
    }
    let index = feature_index(features.filter(|_| model.fusion_mode.uses_image()))?;
    let examples = read_parallel(&src, &tgt, cfg.path("paths.image_ids").as_deref())?;
    let sv = Vocab::build(examples.iter().map(|e| e.src.as_slice()));
    let tv = Vocab::build(examples.iter().map(|e| e.tgt.as_slice()));
    let data = Dataset::encode(&examples, &sv, &tv, index.as_ref())?;
    let valid = match (cfg.path("paths.valid_src"), cfg.path("paths.valid_tgt")) {
        (Some(s), Some(t)) => {
            let ex = read_parallel(&s, &t, cfg.path("paths.valid_image_ids").as_deref())?;
            Some(Dataset::encode(&ex, &sv, &tv, index.as_ref())?)
        }
        (None, None) => None,
        _ => {
            return Err(Failure::Usage(
                "set both paths.valid_src and paths.valid_tgt".into(),
            ))
        }
    };
    if valid.is_none() {
        tc.valid_every = 0;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Domain(e.into()))?;
    sv.write(&dir.join("vocab.src"))?;
    tv.write(&dir.join("vocab.tgt"))?;
    tc.checkpoint_dir = Some(dir.join("checkpoints"));
    tc.log_path = Some(dir.join("train_log.tsv"));
    let mc = mmt_probe::ModelConfig {
        src_vocab: sv.len(),
        tgt_vocab: tv.len(),
        d_img: index
            .as_ref()
            .and_then(|i| i.records().first())
            .map_or(model.d_img, PatchFeatures::dim),
        ..model
    };
    usage(mc.validate())?;
    info!(
        "training {} on {} pairs (vocab {} / {})",
        mc.fusion_mode,
        data.len(),
        sv.len(),
        tv.len()
    );
    let init = ModelParams::<f32>::init(&mc, tc.seed)?;
    let outcome = train(init, &data, valid.as_ref(), &tc)?;
    save_checkpoint(
        &dir.join("model.mmtc"),
        outcome.final_params(),
        outcome.steps,
    )?;
    info!(
        "finished after {} steps{}",
        outcome.steps,
        if outcome.early_stopped {
            " (early stop)"
        } else {
            ""
        }
    );
    Ok(())
}

/// Source side plus the model and vocabularies needed to decode it.
#[derive(Args, Debug)]
pub struct ModelInput {
    /// Checkpoint file; `vocab.src` and `vocab.tgt` are read from its directory.
    #[arg(long)]
    model: PathBuf,
    /// Directory holding the vocabularies, when not next to the checkpoint.
    #[arg(long)]
    vocab_dir: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    image_ids: Option<PathBuf>,
}

struct Loaded {
    params: ModelParams<f32>,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    src: Vec<Vec<String>>,
    image_ids: Vec<String>,
    index: Option<FeatureIndex>,
}

impl Loaded {
    fn new(ctx: &Ctx, m: &ModelInput) -> Outcome<Self> {
        let (params, _) = load_checkpoint::<f32>(&m.model)?;
        let dir = m
            .vocab_dir
            .clone()
            .or_else(|| m.model.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        let src = read_tokenized(&ctx.require(&m.src, "paths.src", "--src")?)?;
        let image_ids = image_ids(
            ctx.path(&m.image_ids, "paths.image_ids").as_deref(),
            src.len(),
        )?;
        let features = ctx.path(&m.features, "paths.features");
        if params.config().fusion_mode.uses_image() && features.is_none() {
            return Err(Failure::Usage(format!(
                "the model uses {} fusion; pass --features",
                params.config().fusion_mode
            )));
        }
        Ok(Loaded {
            src_vocab: Vocab::read(&dir.join("vocab.src"))?,
            tgt_vocab: Vocab::read(&dir.join("vocab.tgt"))?,
            index: feature_index(features)?,
            params,
            src,
            image_ids,
        })
    }

    fn image(&self, line: usize) -> Outcome<Option<&PatchFeatures>> {
        if !self.params.config().fusion_mode.uses_image() {
            return Ok(None);
        }
        let idx = self.index.as_ref().expect("checked at load");
        Ok(Some(idx.get(&self.image_ids[line])?))
    }

    /// Dataset with the given references, or the source as a placeholder.
    fn dataset(&self, refs: Option<&[Vec<String>]>) -> Outcome<Dataset> {
        let examples: Vec<_> = self
            .src
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = refs.map_or_else(Vec::new, |r| r[i].clone());
                mmt_probe::ParallelExample::new(s.clone(), t, self.image_ids[i].clone())
            })
            .collect();
        let index = self
            .index
            .as_ref()
            .filter(|_| self.params.config().fusion_mode.uses_image());
        Ok(Dataset::encode(
            &examples,
            &self.src_vocab,
            &self.tgt_vocab,
            index,
        )?)
    }
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_out_len: Option<usize>,
}

fn run_translate(ctx: &Ctx, a: TranslateArgs) -> Outcome {
    let dc = ctx.decode(a.beam, a.max_out_len)?;
    let l = Loaded::new(ctx, &a.input)?;
    let mut out = Vec::with_capacity(l.src.len());
    for (i, s) in l.src.iter().enumerate() {
        let ids = l.src_vocab.encode(s);
        let h = translate(&l.params, &ids, l.image(i)?, &dc)?;
        out.push(l.tgt_vocab.decode(&h.tokens));
    }
    ctx.emit(&join_lines(&out))
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Hypotheses, one tokenised sentence per line.
    #[arg(long)]
    hyp: PathBuf,
    /// References aligned with the hypotheses.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Probing sidecar; adds accuracy under `--criterion`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    criterion: Option<Criterion>,
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Outcome {
    let hyps = read_tokenized(&a.hyp)?;
    let refs = read_tokenized(&a.reference)?;
    let mut out = format!(
        "sentences={}\nbleu={:.4}\n",
        hyps.len(),
        bleu(&hyps, &refs)?
    );
    if let Some(p) = &a.sidecar {
        let criterion = match a.criterion {
            Some(c) => c,
            None => usage(ctx.cfg.criterion())?,
        };
        let score = probing_accuracy(&hyps, &read_sidecar(p)?, criterion)?;
        out.push_str(&format!(
            "probe.criterion={criterion}\nprobe.masks={}\nprobe.correct={}\nprobe.accuracy={:.6}\n",
            score.total,
            score.correct,
            score.accuracy()
        ));
    }
    ctx.emit(&out)
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    sidecar: PathBuf,
    /// Label used in the report keys.
    #[arg(long, default_value = "probe")]
    name: String,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn probe(ctx: &Ctx, a: ProbeArgs) -> Outcome {
    let hyps = read_tokenized(&a.hyp)?;
    let mut r = EvalReport::new(hyps.len());
    r.add_probing(&a.name, &hyps, &read_sidecar(&a.sidecar)?)?;
    ctx.emit(&report_text(&r, a.format))
}

#[derive(Args, Debug)]
pub struct CongruenceArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_out_len: Option<usize>,
    /// Run even for a text-only model, whose delta is zero by construction.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn congruence(ctx: &Ctx, a: CongruenceArgs) -> Outcome {
    let dc = ctx.decode(a.beam, a.max_out_len)?;
    let l = Loaded::new(ctx, &a.input)?;
    let refs = read_tokenized(&a.reference)?;
    if refs.len() != l.src.len() {
        return Err(Error::Alignment(format!(
            "{} references for {} sentences",
            refs.len(),
            l.src.len()
        ))
        .into());
    }
    let data = l.dataset(Some(&refs))?;
    if !l.params.config().fusion_mode.uses_image() && !a.force {
        return Err(Failure::Usage(
            "a text-only model ignores images; pass --force to run anyway".into(),
        ));
    }
    let c = congruence_report(&l.params, &data, &dc, ctx.seed()?, a.force)?;
    let mut r = EvalReport::new(data.len());
    r.bleu = Some(c.congruent);
    r.congruence = Some(c);
    ctx.emit(&report_text(&r, a.format))
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seeds per operation and per fusion mode.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Outcome {
    let reports = full_suite(a.seeds)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!(
            "{}\t{}\t{}\t{:.3e}\t{}\n",
            r.name,
            r.seed,
            r.elements,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    text.push_str(&format!("checks={} failed={failed}\n", reports.len()));
    ctx.emit(&text)?;
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct DumpAttnArgs {
    #[command(flatten)]
    input: ModelInput,
    /// Zero-based line of the source file.
    #[arg(long, default_value_t = 0)]
    line: usize,
}

fn dump_attn(ctx: &Ctx, a: DumpAttnArgs) -> Outcome {
    let out = ctx.require_out("dump-attn")?;
    let l = Loaded::new(ctx, &a.input)?;
    let s = l.src.get(a.line).ok_or_else(|| {
        Failure::Usage(format!(
            "--line {} but the source has {} lines",
            a.line,
            l.src.len()
        ))
    })?;
    let img = l
        .image(a.line)?
        .ok_or_else(|| Failure::Usage("attention dumps need a selective_attention model".into()))?;
    dump_attention(&l.params, &l.src_vocab.encode(s), img, &out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AvgCkptArgs {
    /// Checkpoints to average; they must share one configuration.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn avg_ckpt(ctx: &Ctx, a: AvgCkptArgs) -> Outcome {
    let out = ctx.require_out("avg-ckpt")?;
    let paths: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    let avg = average_checkpoints::<f32>(&paths)?;
    let (_, step) = load_checkpoint::<f32>(paths[paths.len() - 1])?;
    save_checkpoint(&out, &avg, step)?;
    Ok(())
}
