//! Synthetic parallel corpus for planted-signal experiments.
//!
//! Sentences are built from templates whose slots are typed by noun category
//! (clothing, vehicle, animal, object), so context reveals the category of a
//! masked noun but not which noun it was. The target side is a toy language
//! with gendered articles and adjective endings, so a wrong noun guess also
//! costs the surrounding words.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{line_image_id, ParallelExample};
use crate::probing::{LexEntry, MaskLexicon, Number};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Gender {
    M,
    F,
    N,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cat {
    Clothing,
    Vehicle,
    Animal,
    Object,
}

const NOUNS: [(Cat, &str, &str, Gender); 40] = [
    (Cat::Clothing, "shirt", "hemd", Gender::N),
    (Cat::Clothing, "jacket", "jacke", Gender::F),
    (Cat::Clothing, "hat", "hut", Gender::M),
    (Cat::Clothing, "dress", "kleid", Gender::N),
    (Cat::Clothing, "coat", "mantel", Gender::M),
    (Cat::Clothing, "skirt", "rock", Gender::M),
    (Cat::Clothing, "scarf", "schal", Gender::M),
    (Cat::Clothing, "helmet", "helm", Gender::M),
    (Cat::Clothing, "sweater", "pulli", Gender::M),
    (Cat::Clothing, "uniform", "montur", Gender::F),
    (Cat::Vehicle, "car", "auto", Gender::N),
    (Cat::Vehicle, "bike", "rad", Gender::N),
    (Cat::Vehicle, "bus", "bus", Gender::M),
    (Cat::Vehicle, "boat", "boot", Gender::N),
    (Cat::Vehicle, "truck", "laster", Gender::M),
    (Cat::Vehicle, "train", "zug", Gender::M),
    (Cat::Vehicle, "motorcycle", "motorrad", Gender::N),
    (Cat::Vehicle, "scooter", "roller", Gender::M),
    (Cat::Vehicle, "tractor", "traktor", Gender::M),
    (Cat::Vehicle, "canoe", "kanu", Gender::N),
    (Cat::Animal, "dog", "hund", Gender::M),
    (Cat::Animal, "cat", "katze", Gender::F),
    (Cat::Animal, "horse", "pferd", Gender::N),
    (Cat::Animal, "bird", "vogel", Gender::M),
    (Cat::Animal, "cow", "kuh", Gender::F),
    (Cat::Animal, "sheep", "schaf", Gender::N),
    (Cat::Animal, "goat", "ziege", Gender::F),
    (Cat::Animal, "duck", "ente", Gender::F),
    (Cat::Animal, "camel", "kamel", Gender::N),
    (Cat::Animal, "monkey", "affe", Gender::M),
    (Cat::Object, "ball", "ball", Gender::M),
    (Cat::Object, "bag", "tasche", Gender::F),
    (Cat::Object, "umbrella", "schirm", Gender::M),
    (Cat::Object, "guitar", "gitarre", Gender::F),
    (Cat::Object, "kite", "drachen", Gender::M),
    (Cat::Object, "sign", "schild", Gender::N),
    (Cat::Object, "flag", "fahne", Gender::F),
    (Cat::Object, "box", "kiste", Gender::F),
    (Cat::Object, "drum", "trommel", Gender::F),
    (Cat::Object, "basket", "korb", Gender::M),
];

const COLORS: [(&str, &str); 8] = [
    ("red", "rot"),
    ("blue", "blau"),
    ("green", "grün"),
    ("black", "schwarz"),
    ("white", "weiß"),
    ("yellow", "gelb"),
    ("brown", "braun"),
    ("gray", "grau"),
];

const CHARACTERS: [(&str, &str, Gender); 4] = [
    ("man", "mann", Gender::M),
    ("woman", "frau", Gender::F),
    ("boy", "junge", Gender::M),
    ("girl", "mädchen", Gender::N),
];

fn plural_src(w: &str) -> String {
    if w.ends_with('s') || w.ends_with('x') {
        format!("{w}es")
    } else if w == "sheep" {
        "sheeps".into()
    } else {
        format!("{w}s")
    }
}

fn plural_tgt(w: &str) -> String {
    if w.ends_with('e') {
        format!("{w}n")
    } else if w.ends_with("er") || w.ends_with("el") || w.ends_with("en") {
        format!("{w}s")
    } else {
        format!("{w}e")
    }
}

fn article(g: Gender) -> &'static str {
    match g {
        Gender::F => "eine",
        _ => "ein",
    }
}

/// Adjective after an indefinite article, or in the plural.
fn adjective(stem: &str, g: Gender, plural: bool) -> String {
    let ending = match (plural, g) {
        (true, _) => "e",
        (false, Gender::M) => "er",
        (false, Gender::F) => "e",
        (false, Gender::N) => "es",
    };
    format!("{stem}{ending}")
}

#[derive(Clone, Copy)]
enum Item {
    /// Fixed word pair.
    Lit(&'static str, &'static str),
    /// Noun phrase over slot `usize`: article/number, optional colour, noun.
    Np(usize, bool),
    /// Article and character word.
    Character,
}

struct Template {
    slots: &'static [Cat],
    items: &'static [Item],
}

use Item::{Character, Lit, Np};

const TEMPLATES: [Template; 8] = [
    Template {
        slots: &[Cat::Clothing, Cat::Vehicle, Cat::Animal],
        items: &[
            Character,
            Lit("in", "in"),
            Np(0, true),
            Lit("rides", "fährt"),
            Np(1, false),
            Lit("past", "an"),
            Np(2, false),
            Lit("by", "vorbei"),
        ],
    },
    Template {
        slots: &[Cat::Object, Cat::Animal],
        items: &[
            Character,
            Lit("holds", "hält"),
            Np(0, true),
            Lit("next", "neben"),
            Lit("to", "bei"),
            Np(1, true),
        ],
    },
    Template {
        slots: &[Cat::Animal, Cat::Vehicle, Cat::Object],
        items: &[
            Np(0, true),
            Lit("sits", "sitzt"),
            Lit("on", "auf"),
            Np(1, false),
            Lit("with", "mit"),
            Np(2, true),
        ],
    },
    Template {
        slots: &[Cat::Clothing, Cat::Object],
        items: &[
            Character,
            Lit("wearing", "trägt"),
            Np(0, true),
            Lit("carries", "und"),
            Np(1, false),
        ],
    },
    Template {
        slots: &[Cat::Vehicle, Cat::Animal, Cat::Clothing],
        items: &[
            Np(0, true),
            Lit("drives", "fährt"),
            Lit("near", "nahe"),
            Np(1, false),
            Lit("and", "und"),
            Np(2, true),
        ],
    },
    Template {
        slots: &[Cat::Animal, Cat::Object],
        items: &[
            Np(0, false),
            Lit("plays", "spielt"),
            Lit("with", "mit"),
            Np(1, true),
            Lit("outside", "draußen"),
        ],
    },
    Template {
        slots: &[Cat::Clothing, Cat::Animal, Cat::Object],
        items: &[
            Character,
            Lit("in", "in"),
            Np(0, false),
            Lit("feeds", "füttert"),
            Np(1, true),
            Lit("beside", "neben"),
            Np(2, false),
        ],
    },
    Template {
        slots: &[Cat::Vehicle, Cat::Object],
        items: &[
            Lit("there", "da"),
            Lit("is", "ist"),
            Np(0, true),
            Lit("with", "mit"),
            Np(1, false),
            Lit("on", "auf"),
            Lit("top", "oben"),
        ],
    },
];

/// Parameters of [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub plural_rate: f64,
    pub color_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            pairs: 3000,
            plural_rate: 0.2,
            color_rate: 0.5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub examples: Vec<ParallelExample>,
    pub lexicon: MaskLexicon,
}

impl SynthCorpus {
    /// Source words that masking can hide, in lexicon order.
    pub fn plantable_words(&self) -> Vec<String> {
        self.lexicon.plantable_words()
    }
}

/// The lexicon matching the generated corpus. Noun frequency ranks are a
/// seeded permutation, so any category can be masked first.
pub fn lexicon(seed: u64) -> MaskLexicon {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1E71C0);
    let mut ranks: Vec<u32> = (1..=NOUNS.len() as u32).collect();
    ranks.shuffle(&mut rng);
    let mut nouns = BTreeMap::new();
    for (i, &(_, src, tgt, _)) in NOUNS.iter().enumerate() {
        let forms = vec![vec![tgt.to_string(), plural_tgt(tgt)]];
        for (word, number, rank) in [
            (src.to_string(), Number::Singular, ranks[i]),
            (
                plural_src(src),
                Number::Plural,
                ranks[i] + NOUNS.len() as u32,
            ),
        ] {
            nouns.insert(
                word.clone(),
                LexEntry {
                    word,
                    number,
                    rank: Some(rank),
                    groups: forms.clone(),
                },
            );
        }
    }
    let colors = COLORS
        .iter()
        .map(|&(src, stem)| {
            let forms = vec![
                stem.to_string(),
                format!("{stem}e"),
                format!("{stem}er"),
                format!("{stem}es"),
            ];
            (
                src.to_string(),
                LexEntry {
                    word: src.to_string(),
                    number: Number::Unmarked,
                    rank: None,
                    groups: vec![forms],
                },
            )
        })
        .collect();
    let characters = CHARACTERS
        .iter()
        .map(|&(src, tgt, _)| {
            (
                src.to_string(),
                LexEntry {
                    word: src.to_string(),
                    number: Number::Singular,
                    rank: None,
                    groups: vec![vec![tgt.to_string()]],
                },
            )
        })
        .collect();
    MaskLexicon {
        colors,
        characters,
        nouns,
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let by_cat = |c: Cat| NOUNS.iter().filter(move |n| n.0 == c).collect::<Vec<_>>();
    let mut examples = Vec::with_capacity(spec.pairs);
    for line in 0..spec.pairs {
        let t = &TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let nouns: Vec<_> = t
            .slots
            .iter()
            .map(|&c| **by_cat(c).choose(&mut rng).expect("category has nouns"))
            .collect();
        let plural: Vec<bool> = t
            .slots
            .iter()
            .map(|_| rng.random_bool(spec.plural_rate))
            .collect();
        let (mut src, mut tgt) = (Vec::new(), Vec::new());
        for item in t.items {
            match *item {
                Lit(s, g) => {
                    src.push(s.to_string());
                    tgt.push(g.to_string());
                }
                Character => {
                    let &(s, g, gender) = CHARACTERS.choose(&mut rng).expect("characters");
                    src.extend(["a".to_string(), s.to_string()]);
                    tgt.extend([article(gender).to_string(), g.to_string()]);
                }
                Np(slot, colorable) => {
                    let (_, s, g, gender) = nouns[slot];
                    let pl = plural[slot];
                    if pl {
                        src.push("two".into());
                        tgt.push("zwei".into());
                    } else {
                        src.push("a".into());
                        tgt.push(article(gender).into());
                    }
                    if colorable && rng.random_bool(spec.color_rate) {
                        let &(cs, cg) = COLORS.choose(&mut rng).expect("colours");
                        src.push(cs.to_string());
                        tgt.push(adjective(cg, gender, pl));
                    }
                    if pl {
                        src.push(plural_src(s));
                        tgt.push(plural_tgt(g));
                    } else {
                        src.push(s.to_string());
                        tgt.push(g.to_string());
                    }
                }
            }
        }
        examples.push(ParallelExample::new(src, tgt, line_image_id(line)));
    }
    SynthCorpus {
        examples,
        lexicon: lexicon(spec.seed),
    }
}
