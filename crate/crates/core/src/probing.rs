//! Insufficient-text construction: colour, character and noun masking.
//!
//! Masking is deterministic. Nouns are ranked by the lexicon's frequency rank
//! (1 = most frequent), ties broken by sentence position, so the positions
//! masked at level `k` are always a subset of those at level `k + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{read_lines, ParallelExample};
use crate::error::{Error, Result};

pub const MASK_C: &str = "[MASK_C]";
pub const MASK_P: &str = "[MASK_P]";
pub const MASK_N: &str = "[MASK_N]";
pub const MASK_NS: &str = "[MASK_NS]";

/// The six character words used by the character probing task.
pub const DEFAULT_CHARACTERS: [&str; 6] = ["man", "woman", "people", "men", "girl", "boy"];

/// Lexicon for the example sentence used in the tests and the CLI demo.
pub const TABLE1_LEXICON: &str = include_str!("../fixtures/table1_lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskCategory {
    Color,
    Person,
    Noun,
    Nouns,
}

impl MaskCategory {
    pub fn token(self) -> &'static str {
        match self {
            MaskCategory::Color => MASK_C,
            MaskCategory::Person => MASK_P,
            MaskCategory::Noun => MASK_N,
            MaskCategory::Nouns => MASK_NS,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            MaskCategory::Color => "C",
            MaskCategory::Person => "P",
            MaskCategory::Noun => "N",
            MaskCategory::Nouns => "NS",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        [Self::Color, Self::Person, Self::Noun, Self::Nouns]
            .into_iter()
            .find(|c| c.code() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LexCategory {
    Color,
    Character,
    Noun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Number {
    Singular,
    Plural,
    Unmarked,
}

/// One source word of the lexicon and its target-side forms, grouped by lemma.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexEntry {
    pub word: String,
    pub number: Number,
    pub rank: Option<u32>,
    pub groups: Vec<Vec<String>>,
}

impl LexEntry {
    pub fn all_forms(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().flatten().map(String::as_str)
    }
}

/// Word lists that drive masking and restrict/relaxed scoring.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskLexicon {
    pub colors: BTreeMap<String, LexEntry>,
    pub characters: BTreeMap<String, LexEntry>,
    pub nouns: BTreeMap<String, LexEntry>,
}

fn normalize(w: &str) -> String {
    w.to_lowercase()
}

impl MaskLexicon {
    /// Parses the TSV format: `category  word  number(s|p|-)  rank  forms`,
    /// where forms are comma separated and lemma groups are split by `;`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lex = MaskLexicon::default();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(err(format!(
                    "expected 5 tab-separated columns, got {}",
                    cols.len()
                )));
            }
            let word = normalize(cols[1].trim());
            if word.is_empty() {
                return Err(err("empty source word".into()));
            }
            let number = match cols[2].trim() {
                "s" => Number::Singular,
                "p" => Number::Plural,
                "-" | "" => Number::Unmarked,
                other => return Err(err(format!("number tag `{other}` is not s, p or -"))),
            };
            let rank = match cols[3].trim() {
                "-" | "" => None,
                r => Some(
                    r.parse::<u32>()
                        .map_err(|_| err(format!("bad frequency rank `{r}`")))?,
                ),
            };
            let groups: Vec<Vec<String>> = cols[4]
                .split(';')
                .map(|g| {
                    g.split(',')
                        .map(|f| f.trim().to_string())
                        .filter(|f| !f.is_empty())
                        .collect::<Vec<_>>()
                })
                .filter(|g| !g.is_empty())
                .collect();
            if groups.is_empty() {
                return Err(err(format!("`{word}` has no target forms")));
            }
            let entry = LexEntry {
                word: word.clone(),
                number,
                rank,
                groups,
            };
            let map = match cols[0].trim() {
                "color" => &mut lex.colors,
                "character" => &mut lex.characters,
                "noun" => &mut lex.nouns,
                other => return Err(err(format!("unknown category `{other}`"))),
            };
            if map.insert(word.clone(), entry).is_some() {
                return Err(err(format!("duplicate entry for `{word}`")));
            }
        }
        lex.validate(origin)?;
        Ok(lex)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_lines(path)?.join("\n");
        Self::parse(&text, path)
    }

    pub fn table1() -> Self {
        Self::parse(TABLE1_LEXICON, Path::new("table1_lexicon.tsv"))
            .expect("shipped lexicon parses")
    }

    /// Colours must not overlap the other categories. Character words may
    /// also be listed as nouns, so that noun masking can reach them.
    fn validate(&self, origin: &Path) -> Result<()> {
        for w in self.colors.keys() {
            if self.characters.contains_key(w) || self.nouns.contains_key(w) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: 0,
                    msg: format!("`{w}` is listed as a colour and as another category"),
                });
            }
        }
        Ok(())
    }

    pub fn entry(&self, category: MaskCategory, word: &str) -> Option<&LexEntry> {
        let w = normalize(word);
        match category {
            MaskCategory::Color => self.colors.get(&w),
            MaskCategory::Person => self.characters.get(&w),
            MaskCategory::Noun | MaskCategory::Nouns => self.nouns.get(&w),
        }
    }

    /// Every source word of a category.
    pub fn words(&self, category: LexCategory) -> impl Iterator<Item = &str> {
        match category {
            LexCategory::Color => &self.colors,
            LexCategory::Character => &self.characters,
            LexCategory::Noun => &self.nouns,
        }
        .keys()
        .map(String::as_str)
    }

    /// Nouns, then colours, then characters; the order planted-feature tables use.
    pub fn plantable_words(&self) -> Vec<String> {
        self.nouns
            .keys()
            .chain(self.colors.keys())
            .chain(self.characters.keys())
            .cloned()
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, map) in [
            ("color", &self.colors),
            ("character", &self.characters),
            ("noun", &self.nouns),
        ] {
            for e in map.values() {
                let number = match e.number {
                    Number::Singular => "s",
                    Number::Plural => "p",
                    Number::Unmarked => "-",
                };
                let rank = e.rank.map_or("-".to_string(), |r| r.to_string());
                let forms: Vec<String> = e.groups.iter().map(|g| g.join(",")).collect();
                out.push_str(&format!(
                    "{name}\t{}\t{number}\t{rank}\t{}\n",
                    e.word,
                    forms.join(";")
                ));
            }
        }
        out
    }
}

/// One masked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub position: usize,
    pub category: MaskCategory,
    pub original: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub original: Vec<String>,
    pub masked: Vec<String>,
    pub records: Vec<MaskRecord>,
}

impl MaskedExample {
    fn from_records(tokens: &[String], mut records: Vec<MaskRecord>) -> Self {
        records.sort_by_key(|r| r.position);
        let mut masked = tokens.to_vec();
        for r in &records {
            masked[r.position] = r.category.token().to_string();
        }
        MaskedExample {
            original: tokens.to_vec(),
            masked,
            records,
        }
    }

    /// Puts the recorded original words back.
    pub fn restore(&self) -> Vec<String> {
        let mut out = self.masked.clone();
        for r in &self.records {
            out[r.position] = r.original.clone();
        }
        out
    }

    pub fn masked_line(&self) -> String {
        self.masked.join(" ")
    }
}

fn mask_set(
    tokens: &[String],
    set: &BTreeMap<String, LexEntry>,
    category: MaskCategory,
) -> MaskedExample {
    let records = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| set.contains_key(&normalize(t)))
        .map(|(position, t)| MaskRecord {
            position,
            category,
            original: t.clone(),
        })
        .collect();
    MaskedExample::from_records(tokens, records)
}

/// Replaces every colour word by `[MASK_C]`.
pub fn mask_color(tokens: &[String], lexicon: &MaskLexicon) -> MaskedExample {
    mask_set(tokens, &lexicon.colors, MaskCategory::Color)
}

/// Replaces every character word by `[MASK_P]`.
pub fn mask_character(tokens: &[String], lexicon: &MaskLexicon) -> MaskedExample {
    mask_set(tokens, &lexicon.characters, MaskCategory::Person)
}

/// Masks the `k` highest-ranked nouns; plural nouns become `[MASK_NS]`.
pub fn mask_nouns(tokens: &[String], lexicon: &MaskLexicon, k: usize) -> Result<MaskedExample> {
    if !(1..=4).contains(&k) {
        return Err(Error::Contract(format!("noun mask level {k} not in 1..=4")));
    }
    let mut candidates: Vec<(u32, usize, &LexEntry)> = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            lexicon
                .nouns
                .get(&normalize(t))
                .map(|e| (e.rank.unwrap_or(u32::MAX), i, e))
        })
        .collect();
    candidates.sort_by_key(|&(rank, pos, _)| (rank, pos));
    let records = candidates
        .into_iter()
        .take(k)
        .map(|(_, position, e)| MaskRecord {
            position,
            category: if e.number == Number::Plural {
                MaskCategory::Nouns
            } else {
                MaskCategory::Noun
            },
            original: tokens[position].clone(),
        })
        .collect();
    Ok(MaskedExample::from_records(tokens, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbingTask {
    Color,
    Character,
    Noun(usize),
}

impl ProbingTask {
    pub fn apply(self, tokens: &[String], lexicon: &MaskLexicon) -> Result<MaskedExample> {
        match self {
            ProbingTask::Color => Ok(mask_color(tokens, lexicon)),
            ProbingTask::Character => Ok(mask_character(tokens, lexicon)),
            ProbingTask::Noun(k) => mask_nouns(tokens, lexicon, k),
        }
    }
}

impl fmt::Display for ProbingTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbingTask::Color => f.write_str("color"),
            ProbingTask::Character => f.write_str("character"),
            ProbingTask::Noun(k) => write!(f, "noun{k}"),
        }
    }
}

impl FromStr for ProbingTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" | "colour" => Ok(ProbingTask::Color),
            "character" | "char" => Ok(ProbingTask::Character),
            _ => {
                let k = s
                    .strip_prefix("noun")
                    .map(|r| r.trim_start_matches([':', '_', '-']))
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|k| (1..=4).contains(k))
                    .ok_or_else(|| Error::Config(format!("unknown probing task `{s}`")))?;
                Ok(ProbingTask::Noun(k))
            }
        }
    }
}

/// Scoring information for one masked item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidecarEntry {
    pub line: usize,
    pub position: usize,
    pub category: MaskCategory,
    pub original: String,
    /// Target form attested in the reference line, if any.
    pub reference_form: Option<String>,
    /// Forms accepted under the relaxed criterion.
    pub relaxed_forms: Vec<String>,
}

impl SidecarEntry {
    /// `line  position  category  original  ref;form,form,...`
    pub fn to_tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{};{}",
            self.line,
            self.position,
            self.category.code(),
            self.original,
            self.reference_form.as_deref().unwrap_or(""),
            self.relaxed_forms.join(",")
        )
    }

    pub fn parse_tsv_line(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(format!("expected 5 columns, got {}", cols.len()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad integer `{s}`"));
        let category = MaskCategory::from_code(cols[2])
            .ok_or_else(|| format!("bad category `{}`", cols[2]))?;
        let (reference, forms) = cols[4]
            .split_once(';')
            .ok_or_else(|| "target forms need `reference;forms`".to_string())?;
        Ok(SidecarEntry {
            line: num(cols[0])?,
            position: num(cols[1])?,
            category,
            original: cols[3].to_string(),
            reference_form: (!reference.is_empty()).then(|| reference.to_string()),
            relaxed_forms: forms
                .split(',')
                .filter(|f| !f.is_empty())
                .map(str::to_string)
                .collect(),
        })
    }
}

pub fn write_sidecar(path: &Path, entries: &[SidecarEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_tsv_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarEntry>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            SidecarEntry::parse_tsv_line(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Finds the reference form of a masked word and the lemma group it belongs to.
fn target_forms(
    entry: Option<&LexEntry>,
    reference: Option<&[String]>,
) -> (Option<String>, Vec<String>) {
    let Some(entry) = entry else {
        return (None, Vec::new());
    };
    if let Some(reference) = reference {
        for tok in reference {
            if let Some(group) = entry.groups.iter().find(|g| g.contains(tok)) {
                return (Some(tok.clone()), group.clone());
            }
        }
    }
    let mut all: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for f in entry.all_forms() {
        if seen.insert(f) {
            all.push(f.to_string());
        }
    }
    (None, all)
}

/// Output of [`build_probing_corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbingCorpus {
    pub examples: Vec<MaskedExample>,
    pub sidecar: Vec<SidecarEntry>,
}

impl ProbingCorpus {
    pub fn altered_sentences(&self) -> usize {
        self.examples
            .iter()
            .filter(|e| !e.records.is_empty())
            .count()
    }
}

/// Applies one masker to every sentence and records how each mask is scored.
/// `references` are the target-side sentences used to pin the exact form.
pub fn build_probing_corpus(
    sentences: &[Vec<String>],
    references: Option<&[Vec<String>]>,
    lexicon: &MaskLexicon,
    task: ProbingTask,
) -> Result<ProbingCorpus> {
    if let Some(r) = references {
        if r.len() != sentences.len() {
            return Err(Error::Alignment(format!(
                "{} sentences but {} references",
                sentences.len(),
                r.len()
            )));
        }
    }
    let mut examples = Vec::with_capacity(sentences.len());
    let mut sidecar = Vec::new();
    for (line, tokens) in sentences.iter().enumerate() {
        let ex = task.apply(tokens, lexicon)?;
        for r in &ex.records {
            let entry = lexicon.entry(r.category, &r.original);
            let (reference_form, relaxed_forms) =
                target_forms(entry, references.map(|refs| refs[line].as_slice()));
            sidecar.push(SidecarEntry {
                line,
                position: r.position,
                category: r.category,
                original: r.original.clone(),
                reference_form,
                relaxed_forms,
            });
        }
        examples.push(ex);
    }
    Ok(ProbingCorpus { examples, sidecar })
}

/// Masks the source side of a parallel corpus in place, keeping the records.
pub fn mask_parallel(
    examples: &[ParallelExample],
    lexicon: &MaskLexicon,
    task: ProbingTask,
) -> Result<(Vec<ParallelExample>, ProbingCorpus)> {
    let src: Vec<Vec<String>> = examples.iter().map(|e| e.src.clone()).collect();
    let tgt: Vec<Vec<String>> = examples.iter().map(|e| e.tgt.clone()).collect();
    let corpus = build_probing_corpus(&src, Some(&tgt), lexicon, task)?;
    let masked = examples
        .iter()
        .zip(&corpus.examples)
        .map(|(e, m)| ParallelExample {
            src: m.masked.clone(),
            tgt: e.tgt.clone(),
            image_id: e.image_id.clone(),
            masks: m.records.clone(),
        })
        .collect();
    Ok((masked, corpus))
}
